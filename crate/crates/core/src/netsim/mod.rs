//! Trace-driven bottleneck link: Poisson packet arrivals at the sending
//! rate, Poisson service events at the available bandwidth, one FIFO queue.

mod fft;
mod session;

pub use fft::fft_magnitudes;
pub use session::{run_session, trajectory_of, write_trajectory_csv, Controller, Observation, Session, SessionConfig, Step, TRAJECTORY_HEADER};

use std::collections::VecDeque;

use rand::Rng;
use rand_distr::{Distribution, Exp};

use crate::error::{Error, Result};

/// Link parameters. `queue_capacity = None` sizes the queue per slot to
/// half a second of packets at that slot's bandwidth (at least 10).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub slot: f64,
    pub packet_size: usize,
    pub queue_capacity: Option<usize>,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            slot: 1.0,
            packet_size: 1500,
            queue_capacity: None,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.slot > 0.0) || !self.slot.is_finite() {
            return Err(Error::invalid("slot must be positive"));
        }
        if self.packet_size == 0 {
            return Err(Error::invalid("packet size must be positive"));
        }
        if self.queue_capacity == Some(0) {
            return Err(Error::invalid("queue capacity must be at least 1"));
        }
        Ok(())
    }

    pub fn capacity_for(&self, bandwidth_mbps: f64) -> usize {
        self.queue_capacity.unwrap_or_else(|| {
            let half_second = 0.5 * bandwidth_mbps * 1e6 / (8.0 * self.packet_size as f64);
            (half_second.round() as usize).max(10)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Queued {
    seq: u64,
    enqueued_at: f64,
}

/// Bottleneck queue carried from slot to slot.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct QueueState {
    queue: VecDeque<Queued>,
    /// Drops in the most recent slot.
    pub dropped_count: usize,
    /// Simulation time at the start of the next slot, seconds.
    pub clock: f64,
    next_seq: u64,
    /// Unspent service bytes carried into the next slot (less than one packet).
    credit: f64,
    prev_mean_delay: f64,
}

impl QueueState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    /// Enqueue timestamps, head first.
    pub fn enqueued(&self) -> impl Iterator<Item = f64> + '_ {
        self.queue.iter().map(|q| q.enqueued_at)
    }
}

/// What happened on the link during one slot.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SlotReport {
    pub bandwidth_mbps: f64,
    pub send_mbps: f64,
    pub recv_mbps: f64,
    pub mean_qdelay_s: f64,
    pub p95_qdelay_s: f64,
    pub delay_gradient_s: f64,
    pub loss_ratio: f64,
    pub arrivals: usize,
    pub departures: usize,
    pub drops: usize,
    pub dequeued_bytes: u64,
    pub queue_len_end: usize,
}

/// One dequeued packet, for audits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Departure {
    pub seq: u64,
    pub enqueued_at: f64,
    pub dequeued_at: f64,
    pub delay: f64,
}

/// Advances the link by one slot.
///
/// Service events are Poisson at the bandwidth's packet rate, but the bytes
/// served are additionally capped by the slot's bandwidth budget (with a
/// carry of under one packet), so the receive rate never exceeds the
/// available bandwidth by more than one packet's worth.
pub fn step_slot<R: Rng>(queue: &mut QueueState, send_mbps: f64, bandwidth_mbps: f64, cfg: &SimConfig, rng: &mut R) -> Result<SlotReport> {
    run_slot(queue, send_mbps, bandwidth_mbps, cfg, rng, None)
}

/// [`step_slot`] that also records every departure.
pub fn step_slot_traced<R: Rng>(
    queue: &mut QueueState,
    send_mbps: f64,
    bandwidth_mbps: f64,
    cfg: &SimConfig,
    rng: &mut R,
    log: &mut Vec<Departure>,
) -> Result<SlotReport> {
    run_slot(queue, send_mbps, bandwidth_mbps, cfg, rng, Some(log))
}

fn run_slot<R: Rng>(
    q: &mut QueueState,
    send_mbps: f64,
    bandwidth_mbps: f64,
    cfg: &SimConfig,
    rng: &mut R,
    mut log: Option<&mut Vec<Departure>>,
) -> Result<SlotReport> {
    cfg.validate()?;
    if !(send_mbps >= 0.0) || !send_mbps.is_finite() {
        return Err(Error::invalid(format!("send rate must be non-negative, got {send_mbps}")));
    }
    if !(bandwidth_mbps > 0.0) || !bandwidth_mbps.is_finite() {
        return Err(Error::invalid(format!("bandwidth must be positive, got {bandwidth_mbps}")));
    }
    let pkt_bits = 8.0 * cfg.packet_size as f64;
    let pkt_bytes = cfg.packet_size as f64;
    let lambda = send_mbps * 1e6 / pkt_bits;
    let mu = bandwidth_mbps * 1e6 / pkt_bits;
    let capacity = cfg.capacity_for(bandwidth_mbps);
    let start = q.clock;
    let end = start + cfg.slot;

    let arrival_gap = (lambda > 0.0).then(|| Exp::new(lambda).expect("positive rate"));
    let service_gap = Exp::new(mu).expect("positive rate");
    let mut next_arrival = arrival_gap.as_ref().map_or(f64::INFINITY, |d| start + d.sample(rng));
    let mut next_service = start + service_gap.sample(rng);

    q.credit += bandwidth_mbps * cfg.slot * 1e6 / 8.0;
    let mut delays = Vec::new();
    let (mut arrivals, mut drops) = (0usize, 0usize);
    loop {
        let t = next_arrival.min(next_service);
        if t >= end {
            break;
        }
        if next_arrival <= next_service {
            arrivals += 1;
            if q.queue.len() < capacity {
                q.queue.push_back(Queued {
                    seq: q.next_seq,
                    enqueued_at: t,
                });
            } else {
                drops += 1;
            }
            q.next_seq += 1;
            next_arrival = t + arrival_gap.as_ref().expect("arrivals imply a rate").sample(rng);
        } else {
            if q.credit >= pkt_bytes {
                if let Some(p) = q.queue.pop_front() {
                    q.credit -= pkt_bytes;
                    let delay = t - p.enqueued_at;
                    delays.push(delay);
                    if let Some(log) = log.as_deref_mut() {
                        log.push(Departure {
                            seq: p.seq,
                            enqueued_at: p.enqueued_at,
                            dequeued_at: t,
                            delay,
                        });
                    }
                }
            }
            next_service = t + service_gap.sample(rng);
        }
    }
    q.clock = end;
    q.credit = q.credit.min(pkt_bytes);
    q.dropped_count = drops;

    let departures = delays.len();
    let mean = if departures == 0 { 0.0 } else { delays.iter().sum::<f64>() / departures as f64 };
    let gradient = delay_gradient(q.prev_mean_delay, mean);
    q.prev_mean_delay = mean;
    let dequeued_bytes = (departures * cfg.packet_size) as u64;
    Ok(SlotReport {
        bandwidth_mbps,
        send_mbps,
        recv_mbps: dequeued_bytes as f64 * 8.0 / cfg.slot / 1e6,
        mean_qdelay_s: mean,
        p95_qdelay_s: percentile_nearest_rank(&mut delays, 0.95),
        delay_gradient_s: gradient,
        loss_ratio: if arrivals == 0 { 0.0 } else { drops as f64 / arrivals as f64 },
        arrivals,
        departures,
        drops,
        dequeued_bytes,
        queue_len_end: q.queue.len(),
    })
}

/// Change in mean queuing delay from the previous slot to this one. Only a
/// difference of delays, so any constant clock offset cancels.
pub fn delay_gradient(prev_mean_delay: f64, this_mean_delay: f64) -> f64 {
    this_mean_delay - prev_mean_delay
}

/// Mean of a slot's delays, with an empty slot counting as zero.
pub fn mean_delay(delays: &[f64]) -> f64 {
    if delays.is_empty() {
        0.0
    } else {
        delays.iter().sum::<f64>() / delays.len() as f64
    }
}

fn percentile_nearest_rank(values: &mut [f64], p: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(f64::total_cmp);
    let rank = (p * values.len() as f64).ceil() as usize;
    values[rank.clamp(1, values.len()) - 1]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from;
    use proptest::prelude::*;

    fn cfg(capacity: Option<usize>) -> SimConfig {
        SimConfig {
            queue_capacity: capacity,
            ..SimConfig::default()
        }
    }

    #[test]
    fn idle_link_reports_zeros() {
        let mut q = QueueState::new();
        let r = step_slot(&mut q, 0.0, 2.0, &cfg(None), &mut rng_from(1)).unwrap();
        assert_eq!((r.recv_mbps, r.mean_qdelay_s, r.p95_qdelay_s, r.loss_ratio), (0.0, 0.0, 0.0, 0.0));
        assert_eq!(q.clock, 1.0);
    }

    #[test]
    fn zero_send_rate_drains_backlog() {
        let c = cfg(Some(1000));
        let mut q = QueueState::new();
        let mut rng = rng_from(2);
        step_slot(&mut q, 4.0, 1.0, &c, &mut rng).unwrap();
        assert!(q.len() > 0);
        let r = step_slot(&mut q, 0.0, 1.0, &c, &mut rng).unwrap();
        assert_eq!(r.arrivals, 0);
        assert!(r.recv_mbps > 0.0 && r.mean_qdelay_s > 0.0);
    }

    #[test]
    fn mm1_waiting_time_within_factor_three() {
        let (bw, rho) = (2.0, 0.4);
        let mu = bw * 1e6 / (8.0 * 1500.0);
        let wq = rho / (mu * (1.0 - rho));
        let (mut sum, mut n) = (0.0, 0usize);
        for seed in 0..10 {
            let mut q = QueueState::new();
            let mut rng = rng_from(seed);
            for _ in 0..100 {
                let r = step_slot(&mut q, rho * bw, bw, &cfg(None), &mut rng).unwrap();
                sum += r.mean_qdelay_s * r.departures as f64;
                n += r.departures;
            }
        }
        let measured = sum / n as f64;
        assert!(measured <= 3.0 * wq && measured >= wq / 3.0, "measured {measured}, M/M/1 {wq}");
    }

    #[test]
    fn overload_fills_queue_and_drops() {
        let mut q = QueueState::new();
        let mut rng = rng_from(3);
        let c = cfg(Some(20));
        // Service events are random, so at the slot boundary the saturated
        // queue may be a packet or two short of full.
        let mut ends = Vec::new();
        for _ in 0..50 {
            let r = step_slot(&mut q, 2.0, 1.0, &c, &mut rng).unwrap();
            assert!(r.loss_ratio > 0.0);
            assert!(r.queue_len_end >= 10, "{}", r.queue_len_end);
            ends.push(r.queue_len_end);
        }
        let full = ends.iter().filter(|&&n| n == 20).count();
        assert!(full >= 15, "full at {full} of 50 slot ends");
        assert!(ends.iter().all(|&n| n <= 20));
        let mean = ends.iter().sum::<usize>() as f64 / ends.len() as f64;
        assert!(mean >= 18.0, "mean slot-end occupancy {mean}");
    }

    #[test]
    fn default_capacity_is_half_second_of_packets() {
        let c = cfg(None);
        assert_eq!(c.capacity_for(2.4), 100);
        assert_eq!(c.capacity_for(0.1), 10);
        assert_eq!(cfg(Some(7)).capacity_for(2.4), 7);
        assert!(cfg(Some(0)).validate().is_err());
    }

    #[test]
    fn delay_gradient_examples() {
        assert_eq!(delay_gradient(0.2, 0.2), 0.0);
        assert!((delay_gradient(0.10, 0.15) - 0.05).abs() < 1e-15);
        assert!(delay_gradient(0.3, 0.1) < 0.0);
        assert_eq!(mean_delay(&[]), 0.0);
    }

    #[test]
    fn p95_is_nearest_rank() {
        let mut v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile_nearest_rank(&mut v, 0.95), 95.0);
        assert_eq!(percentile_nearest_rank(&mut [3.0], 0.95), 3.0);
    }

    #[test]
    fn low_load_delay_does_not_drift() {
        let mut q = QueueState::new();
        let mut rng = rng_from(5);
        let mut p95 = Vec::new();
        for _ in 0..1000 {
            p95.push(step_slot(&mut q, 0.5, 1.0, &cfg(None), &mut rng).unwrap().p95_qdelay_s);
        }
        let early: f64 = p95[100..300].iter().sum::<f64>() / 200.0;
        let late: f64 = p95[800..1000].iter().sum::<f64>() / 200.0;
        assert!(late < 2.0 * early + 0.01, "early {early}, late {late}");
        assert!(p95.iter().all(|d| *d < 0.5));
    }

    #[test]
    fn rejects_bad_rates() {
        let mut q = QueueState::new();
        let mut rng = rng_from(0);
        assert!(step_slot(&mut q, -1.0, 1.0, &cfg(None), &mut rng).is_err());
        assert!(step_slot(&mut q, 1.0, 0.0, &cfg(None), &mut rng).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn conservation_fifo_and_bandwidth_cap(
            seed in any::<u64>(),
            slots in prop::collection::vec((0.0f64..3.0, 0.1f64..3.0), 1..30),
            capacity in prop::option::of(1usize..200),
        ) {
            let c = cfg(capacity);
            let mut q = QueueState::new();
            let mut rng = rng_from(seed);
            let mut log = Vec::new();
            let (mut arrivals, mut drops, mut departed, mut budget) = (0usize, 0usize, 0u64, 0.0);
            for &(send, bw) in &slots {
                let r = step_slot_traced(&mut q, send, bw, &c, &mut rng, &mut log).unwrap();
                arrivals += r.arrivals;
                drops += r.drops;
                departed += r.dequeued_bytes;
                budget += bw * c.slot * 1e6 / 8.0;
                prop_assert!(r.recv_mbps <= bw + 8.0 * 1500.0 / 1e6 + 1e-9);
                prop_assert!((0.0..=1.0).contains(&r.loss_ratio));
                if let Some(cap) = capacity {
                    prop_assert!(q.len() <= cap);
                }
            }
            prop_assert_eq!(arrivals, drops + log.len() + q.len());
            prop_assert_eq!(departed, (log.len() * 1500) as u64);
            prop_assert!(departed as f64 <= budget);
            for d in &log {
                prop_assert!(d.delay >= 0.0);
                prop_assert_eq!(d.delay, d.dequeued_at - d.enqueued_at);
            }
            prop_assert!(log.windows(2).all(|w| w[0].seq < w[1].seq));
        }
    }
}
