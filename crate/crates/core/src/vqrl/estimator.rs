use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::netsim::{step_slot, QueueState, SimConfig};
use crate::seed::{derive_indexed, derive_seed, rng_from};
use crate::tensor::{AdamConfig, Bound, Conv1d, Dense, ParamStore, Tape, Var};
use crate::trace::BandwidthTrace;
use crate::vqpn::smape;

use super::RATE_SCALE_MBPS;

const CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorConfig {
    /// Past slots of (send, receive, delay gradient) per input.
    pub history: usize,
    pub filters: usize,
    pub hidden: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Probe sending rates are drawn uniformly from this range, in Mbps.
    pub send_range: (f64, f64),
    pub sim: SimConfig,
    pub seed: u64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            history: 5,
            filters: 32,
            hidden: 32,
            lr: 1e-3,
            epochs: 30,
            batch_size: 16,
            send_range: (0.01, RATE_SCALE_MBPS),
            sim: SimConfig::default(),
            seed: 0,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.history < 2 || self.filters == 0 || self.hidden == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("history must be >= 2 and sizes positive"));
        }
        if !(self.lr > 0.0) || !(0.0 < self.send_range.0 && self.send_range.0 < self.send_range.1) {
            return Err(Error::invalid("lr must be positive and the send range a non-empty positive interval"));
        }
        self.sim.validate()
    }
}

/// Past-k probe observations and the bandwidth of the following slot.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSample {
    /// Row-major `[k, 3]`: normalized send rate, receive rate, and
    /// clamped delay gradient per slot, oldest first.
    pub input: Vec<f64>,
    /// Next-slot bandwidth, Mbps.
    pub target: f64,
    /// Receive rate of the most recent slot, Mbps (persistence forecast).
    pub last_recv: f64,
}

/// Drives the simulator over `trace` with random sending rates and
/// collects one sample per slot once `k` slots of history exist.
pub fn probe_samples(trace: &BandwidthTrace, cfg: &EstimatorConfig, seed: u64) -> Result<Vec<ProbeSample>> {
    let bws = trace.slot_bandwidths(cfg.sim.slot);
    let k = cfg.history;
    let mut rng = rng_from(seed);
    let mut sim_rng = rng_from(derive_seed(seed, "probe-sim"));
    let mut queue = QueueState::new();
    let mut rows: Vec<[f64; CHANNELS]> = Vec::with_capacity(bws.len());
    let mut recv = Vec::with_capacity(bws.len());
    for &bw in &bws {
        let send = rng.random_range(cfg.send_range.0..cfg.send_range.1);
        let rep = step_slot(&mut queue, send, bw, &cfg.sim, &mut sim_rng)?;
        rows.push([send / RATE_SCALE_MBPS, rep.recv_mbps / RATE_SCALE_MBPS, rep.delay_gradient_s.clamp(-1.0, 1.0)]);
        recv.push(rep.recv_mbps);
    }
    Ok((k..bws.len())
        .map(|t| ProbeSample {
            input: rows[t - k..t].iter().flatten().copied().collect(),
            target: bws[t],
            last_recv: recv[t - 1],
        })
        .collect())
}

/// 1-D conv regressor from past-k probe observations to next-slot
/// bandwidth.
#[derive(Debug, Clone)]
pub struct BandwidthEstimator {
    pub cfg: EstimatorConfig,
    pub store: ParamStore,
    conv: Conv1d,
    hidden: Dense,
    out: Dense,
}

impl BandwidthEstimator {
    pub fn new(cfg: EstimatorConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_from(derive_seed(cfg.seed, "estimator-init"));
        let mut store = ParamStore::new(AdamConfig::with_lr(cfg.lr));
        let kernel = 3.min(cfg.history);
        let conv = Conv1d::new(&mut store, "conv", kernel, CHANNELS, cfg.filters, 1, &mut rng)?;
        let flat = (cfg.history - kernel + 1) * cfg.filters;
        let hidden = Dense::new(&mut store, "hidden", flat, cfg.hidden, &mut rng)?;
        let out = Dense::new(&mut store, "out", cfg.hidden, 1, &mut rng)?;
        Ok(BandwidthEstimator {
            cfg,
            store,
            conv,
            hidden,
            out,
        })
    }

    /// Log of the normalized bandwidth estimate, on `tape`. Fitting in log
    /// space weights errors relatively, as SMAPE does.
    fn forward(&self, tape: &mut Tape, p: &Bound, input: &[f64]) -> Result<Var> {
        if input.len() != self.cfg.history * CHANNELS {
            return Err(Error::shape("estimator", format!("want {} inputs, got {}", self.cfg.history * CHANNELS, input.len())));
        }
        let x = tape.constant_vec(input.to_vec());
        let x = tape.reshape(x, vec![self.cfg.history, CHANNELS])?;
        let h = self.conv.forward(tape, p, x)?;
        let h = tape.relu(h);
        let h = self.hidden.forward(tape, p, h)?;
        let h = tape.relu(h);
        self.out.forward(tape, p, h)
    }

    /// Estimated next-slot bandwidth in Mbps.
    pub fn predict(&self, input: &[f64]) -> Result<f64> {
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let y = self.forward(&mut tape, &p, input)?;
        Ok(tape.scalar(y).exp() * RATE_SCALE_MBPS)
    }

    pub fn smape_on(&self, samples: &[ProbeSample]) -> Result<f64> {
        let preds = samples.iter().map(|s| self.predict(&s.input)).collect::<Result<Vec<_>>>()?;
        let actual: Vec<f64> = samples.iter().map(|s| s.target).collect();
        smape(&preds, &actual)
    }

    fn fit(&mut self, samples: &[ProbeSample]) -> Result<()> {
        let mut rng = rng_from(derive_seed(self.cfg.seed, "estimator-shuffle"));
        let mut order: Vec<usize> = (0..samples.len()).collect();
        for _ in 0..self.cfg.epochs {
            order.shuffle(&mut rng);
            for batch in order.chunks(self.cfg.batch_size) {
                self.store.zero_grad();
                for &i in batch {
                    let mut tape = Tape::new();
                    let p = self.store.bind(&mut tape);
                    let y = self.forward(&mut tape, &p, &samples[i].input)?;
                    let t = tape.constant_vec(vec![(samples[i].target / RATE_SCALE_MBPS).ln()]);
                    let loss = tape.mse(y, t)?;
                    let loss = tape.scale(loss, 1.0 / batch.len() as f64);
                    tape.backward(loss)?;
                    self.store.accumulate(&tape, &p);
                }
                self.store.step()?;
            }
        }
        Ok(())
    }
}

pub fn persistence_probe_smape(samples: &[ProbeSample]) -> Result<f64> {
    let last: Vec<f64> = samples.iter().map(|s| s.last_recv).collect();
    let actual: Vec<f64> = samples.iter().map(|s| s.target).collect();
    smape(&last, &actual)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorReport {
    pub train_smape: f64,
    /// On held-out traces of the training family.
    pub heldout_smape: f64,
    pub heldout_persistence_smape: f64,
    /// On traces of a different family, when supplied.
    pub cross_smape: Option<f64>,
    pub cross_persistence_smape: Option<f64>,
}

impl EstimatorReport {
    /// Cross-family minus held-out SMAPE, in percentage points.
    pub fn cross_gap(&self) -> Option<f64> {
        self.cross_smape.map(|c| c - self.heldout_smape)
    }
}

fn samples_of(traces: &[BandwidthTrace], cfg: &EstimatorConfig, label: &str) -> Result<Vec<ProbeSample>> {
    let mut out = Vec::new();
    for (i, t) in traces.iter().enumerate() {
        out.extend(probe_samples(t, cfg, derive_indexed(cfg.seed, label, i as u64))?);
    }
    Ok(out)
}

/// Trains on probes of `train` traces and reports SMAPE on held-out
/// traces of the same family and, if non-empty, on `cross` traces.
pub fn train_bandwidth_estimator(
    train: &[BandwidthTrace],
    held_out: &[BandwidthTrace],
    cross: &[BandwidthTrace],
    cfg: &EstimatorConfig,
) -> Result<(BandwidthEstimator, EstimatorReport)> {
    cfg.validate()?;
    let train_s = samples_of(train, cfg, "probe-train")?;
    let held_s = samples_of(held_out, cfg, "probe-heldout")?;
    if train_s.len() < cfg.batch_size || held_s.is_empty() {
        return Err(Error::invalid(format!(
            "insufficient probe data: {} training and {} held-out samples",
            train_s.len(),
            held_s.len()
        )));
    }
    let mut model = BandwidthEstimator::new(*cfg)?;
    model.fit(&train_s)?;
    let (cross_smape, cross_persistence_smape) = if cross.is_empty() {
        (None, None)
    } else {
        let cross_s = samples_of(cross, cfg, "probe-cross")?;
        if cross_s.is_empty() {
            return Err(Error::invalid("cross-family traces are too short for the history length"));
        }
        (Some(model.smape_on(&cross_s)?), Some(persistence_probe_smape(&cross_s)?))
    };
    let report = EstimatorReport {
        train_smape: model.smape_on(&train_s)?,
        heldout_smape: model.smape_on(&held_s)?,
        heldout_persistence_smape: persistence_probe_smape(&held_s)?,
        cross_smape,
        cross_persistence_smape,
    };
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constants(levels: &[f64], len: usize) -> Vec<BandwidthTrace> {
        levels.iter().map(|&m| BandwidthTrace::constant(format!("c{m}"), m, len).unwrap()).collect()
    }

    #[test]
    fn samples_window_the_probe_history() {
        let cfg = EstimatorConfig::default();
        let trace = BandwidthTrace::from_slots("t", 1.0, &[0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 1.1, 1.2]).unwrap();
        let s = probe_samples(&trace, &cfg, 3).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s[0].target, 1.0);
        assert_eq!(s[0].input.len(), 15);
        assert_eq!(&s[1].input[..12], &s[0].input[3..]);
        assert!(s.iter().flat_map(|x| &x.input).all(|v| v.is_finite()));
        assert_eq!(s, probe_samples(&trace, &cfg, 3).unwrap());
    }

    #[test]
    fn learns_constant_bandwidth_family() {
        let cfg = EstimatorConfig { epochs: 40, ..EstimatorConfig::default() };
        let mut rng = rng_from(11);
        let mut family = |n: usize| constants(&(0..n).map(|_| rng.random_range(0.3..1.5)).collect::<Vec<_>>(), 60);
        let (train, held) = (family(40), family(10));
        let (model, r) = train_bandwidth_estimator(&train, &held, &[], &cfg).unwrap();
        assert!(r.heldout_smape < 5.0, "{r:?}");
        assert!(r.heldout_persistence_smape > 0.0);
        assert!(r.cross_smape.is_none() && r.cross_gap().is_none());
        let probe = probe_samples(&held[0], &cfg, 9).unwrap();
        assert!(probe.iter().all(|s| model.predict(&s.input).unwrap().is_finite()));
    }

    #[test]
    fn insufficient_data_is_rejected() {
        let cfg = EstimatorConfig::default();
        let short = constants(&[1.0], 4);
        assert!(train_bandwidth_estimator(&short, &short, &[], &cfg).is_err());
        assert!(train_bandwidth_estimator(&constants(&[1.0], 60), &[], &[], &cfg).is_err());
        assert!(BandwidthEstimator::new(EstimatorConfig { history: 1, ..cfg }).is_err());
    }
}
