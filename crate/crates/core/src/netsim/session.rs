use std::io::Write;

use crate::error::{Error, Result};
use crate::qoe::{per_step_reward, QoeRecord, QoeWeights, SessionTrajectory};
use crate::seed::{rng_from, SimRng};
use crate::trace::{BandwidthTrace, QualityCurveSeries, QualityVector};
use crate::vqrl::{build_state, ActionSpace, AgentState, History, SlotObservation, DEFAULT_HISTORY};

use super::{step_slot, QueueState, SimConfig, SlotReport};

pub const TRAJECTORY_HEADER: [&str; 9] = [
    "slot",
    "send_kbps",
    "recv_kbps",
    "mean_qdelay_s",
    "p95_qdelay_s",
    "delay_grad_s",
    "loss",
    "quality",
    "reward",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SessionConfig {
    pub sim: SimConfig,
    pub weights: QoeWeights,
    /// History length `k` of the agent state.
    pub history_len: usize,
    /// Slots sent at the lowest bitrate before the controller takes over.
    pub warmup: usize,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            sim: SimConfig::default(),
            weights: QoeWeights::default(),
            history_len: DEFAULT_HISTORY,
            warmup: 5,
        }
    }
}

/// What a controller sees before choosing the next slot's bitrate.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    /// Index of the slot about to be sent.
    pub slot: usize,
    pub state: &'a AgentState,
    /// Report of the slot that just finished.
    pub last: &'a SlotReport,
    pub last_action: usize,
}

/// A bitrate controller: maps each observation to an action index.
pub trait Controller {
    fn name(&self) -> String;

    /// Called once at the start of every session.
    fn reset(&mut self) {}

    fn select(&mut self, obs: &Observation) -> usize;
}

/// One controlled slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub slot: usize,
    /// State observed before choosing `action`.
    pub state: AgentState,
    pub action: usize,
    pub report: SlotReport,
    pub quality: f64,
    pub reward: f64,
}

impl Step {
    pub fn qoe_record(&self) -> QoeRecord {
        QoeRecord {
            quality: self.quality,
            bitrate_mbps: self.report.send_mbps,
            delay_s: self.report.delay_gradient_s,
        }
    }
}

pub fn trajectory_of(steps: &[Step]) -> Result<SessionTrajectory> {
    SessionTrajectory::new(steps.iter().map(Step::qoe_record).collect())
}

/// A streaming session over one bandwidth trace and quality series:
/// the environment the agent and the baselines act in.
#[derive(Debug, Clone)]
pub struct Session {
    bandwidths: Vec<f64>,
    curves: Vec<QualityVector>,
    predictions: Vec<QualityVector>,
    cfg: SessionConfig,
    queue: QueueState,
    rng: SimRng,
    history: History,
    slot: usize,
    prev_quality: Option<f64>,
    last_report: SlotReport,
    last_action: usize,
}

impl Session {
    /// `predictions[n]` is the quality forecast the agent sees before slot
    /// `n`. Runs the warmup slots immediately.
    pub fn new(trace: &BandwidthTrace, quality: &QualityCurveSeries, predictions: Vec<QualityVector>, cfg: SessionConfig) -> Result<Self> {
        cfg.sim.validate()?;
        cfg.weights.validate()?;
        let mut bandwidths = trace.slot_bandwidths(cfg.sim.slot);
        let n = bandwidths.len().min(quality.len());
        if n < cfg.warmup.max(1) + 1 {
            return Err(Error::invalid(format!(
                "session needs at least {} slots, trace and quality cover {n}",
                cfg.warmup.max(1) + 1
            )));
        }
        if predictions.len() < n {
            return Err(Error::invalid(format!("{} predictions for {n} slots", predictions.len())));
        }
        bandwidths.truncate(n);
        let mut s = Session {
            bandwidths,
            curves: quality.slots()[..n].to_vec(),
            predictions,
            cfg,
            queue: QueueState::new(),
            rng: rng_from(cfg.sim.seed),
            history: History::new(cfg.history_len.max(1)),
            slot: 0,
            prev_quality: None,
            last_report: SlotReport::default(),
            last_action: 0,
        };
        for _ in 0..cfg.warmup.max(1) {
            s.simulate(0)?;
        }
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.bandwidths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bandwidths.is_empty()
    }

    pub fn slot(&self) -> usize {
        self.slot
    }

    pub fn done(&self) -> bool {
        self.slot >= self.bandwidths.len()
    }

    pub fn bandwidths(&self) -> &[f64] {
        &self.bandwidths
    }

    pub fn state(&self) -> Result<AgentState> {
        let slot = self.slot.min(self.bandwidths.len() - 1);
        build_state(&self.history, &self.predictions[slot], self.cfg.history_len)
    }

    pub fn observe<'a>(&'a self, state: &'a AgentState) -> Observation<'a> {
        Observation {
            slot: self.slot,
            state,
            last: &self.last_report,
            last_action: self.last_action,
        }
    }

    fn simulate(&mut self, action: usize) -> Result<(SlotReport, f64)> {
        let send = ActionSpace::mbps(action)?;
        let bw = self.bandwidths[self.slot];
        let report = step_slot(&mut self.queue, send, bw, &self.cfg.sim, &mut self.rng)?;
        let quality = self.curves[self.slot][action];
        self.history.push(SlotObservation {
            send_mbps: send,
            recv_mbps: report.recv_mbps,
            delay_gradient_s: report.delay_gradient_s,
            loss_ratio: report.loss_ratio,
            quality,
        });
        self.slot += 1;
        self.last_report = report;
        self.last_action = action;
        Ok((report, quality))
    }

    /// Sends the next slot at `action` and scores it.
    pub fn step(&mut self, state: AgentState, action: usize) -> Result<Step> {
        if self.done() {
            return Err(Error::invalid("session is over"));
        }
        ActionSpace::kbps(action)?;
        let slot = self.slot;
        let (report, quality) = self.simulate(action)?;
        let reward = per_step_reward(
            self.prev_quality.unwrap_or(quality),
            quality,
            report.send_mbps,
            report.delay_gradient_s,
            &self.cfg.weights,
        );
        self.prev_quality = Some(quality);
        Ok(Step {
            slot,
            state,
            action,
            report,
            quality,
            reward,
        })
    }
}

/// Runs `controller` over every slot after warmup.
pub fn run_session(
    controller: &mut dyn Controller,
    trace: &BandwidthTrace,
    quality: &QualityCurveSeries,
    predictions: Vec<QualityVector>,
    cfg: SessionConfig,
) -> Result<Vec<Step>> {
    let mut session = Session::new(trace, quality, predictions, cfg)?;
    controller.reset();
    let mut steps = Vec::with_capacity(session.len());
    while !session.done() {
        let state = session.state()?;
        let action = controller.select(&session.observe(&state));
        if action >= ActionSpace::SIZE {
            return Err(Error::invalid(format!(
                "controller {} chose action {action} outside [0, {})",
                controller.name(),
                ActionSpace::SIZE
            )));
        }
        steps.push(session.step(state, action)?);
    }
    Ok(steps)
}

pub fn write_trajectory_csv<W: Write>(w: W, steps: &[Step]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(TRAJECTORY_HEADER)?;
    for s in steps {
        let r = &s.report;
        wtr.write_record(&[
            s.slot.to_string(),
            (r.send_mbps * 1000.0).to_string(),
            (r.recv_mbps * 1000.0).to_string(),
            r.mean_qdelay_s.to_string(),
            r.p95_qdelay_s.to_string(),
            r.delay_gradient_s.to_string(),
            r.loss_ratio.to_string(),
            s.quality.to_string(),
            s.reward.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qoe::{qoe_eval, FixedBitrate};
    use crate::trace::{gen_quality_curves, QualityProfile};

    fn setup(mbps: f64, slots: usize) -> (BandwidthTrace, QualityCurveSeries, Vec<QualityVector>) {
        let trace = BandwidthTrace::constant("c", mbps, slots).unwrap();
        let q = gen_quality_curves(QualityProfile::Dynamic, slots, 1).unwrap();
        let preds = q.slots().to_vec();
        (trace, q, preds)
    }

    #[test]
    fn underloaded_link_has_no_loss_and_small_delay() {
        let (trace, q, preds) = setup(2.0, 60);
        let steps = run_session(&mut FixedBitrate::new(0).unwrap(), &trace, &q, preds, SessionConfig::default()).unwrap();
        assert_eq!(steps.len(), 55);
        // Packets arrive every 12 kbit / 0.3 Mbps = 40 ms on average.
        let gap = 1500.0 * 8.0 / 0.3e6;
        for s in &steps {
            assert_eq!(s.report.loss_ratio, 0.0);
            assert!(s.report.p95_qdelay_s < 2.0 * gap, "{}", s.report.p95_qdelay_s);
        }
    }

    #[test]
    fn overloaded_link_fills_then_drops() {
        let (trace, q, preds) = setup(0.5, 40);
        let cap = 200;
        let mut cfg = SessionConfig::default();
        cfg.sim.queue_capacity = Some(cap);
        let steps = run_session(&mut FixedBitrate::new(4).unwrap(), &trace, &q, preds, cfg).unwrap();
        let ends: Vec<usize> = steps.iter().map(|s| s.report.queue_len_end).collect();
        // 1.4 Mbps into 0.5 Mbps adds ~75 packets per slot.
        let filled = ends.iter().position(|&n| n + 5 >= cap).expect("queue reaches capacity");
        assert!(filled >= 2, "{ends:?}");
        assert!(ends[..=filled].windows(2).all(|w| w[1] > w[0]), "{ends:?}");
        assert!(steps[..filled].iter().all(|s| s.report.loss_ratio == 0.0));
        assert!(steps[filled + 1..].iter().all(|s| s.report.loss_ratio > 0.3));
    }

    #[test]
    fn same_seed_same_trajectory_and_rewards_sum_to_qoe() {
        let (trace, q, preds) = setup(1.0, 50);
        let cfg = SessionConfig::default();
        let a = run_session(&mut FixedBitrate::new(2).unwrap(), &trace, &q, preds.clone(), cfg).unwrap();
        let b = run_session(&mut FixedBitrate::new(2).unwrap(), &trace, &q, preds, cfg).unwrap();
        assert_eq!(a, b);
        let total: f64 = a.iter().map(|s| s.reward).sum();
        let qoe = qoe_eval(&trajectory_of(&a).unwrap(), &cfg.weights).unwrap();
        assert!((total - qoe).abs() < 1e-9);
        let mut csv = Vec::new();
        write_trajectory_csv(&mut csv, &a).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("slot,send_kbps,recv_kbps,mean_qdelay_s,p95_qdelay_s,delay_grad_s,loss,quality,reward\n"));
        assert_eq!(text.lines().count(), a.len() + 1);
    }

    struct Broken;
    impl Controller for Broken {
        fn name(&self) -> String {
            "broken".into()
        }
        fn select(&mut self, _: &Observation) -> usize {
            7
        }
    }

    #[test]
    fn rejects_out_of_range_actions_and_short_inputs() {
        let (trace, q, preds) = setup(1.0, 20);
        assert!(run_session(&mut Broken, &trace, &q, preds.clone(), SessionConfig::default()).is_err());
        let (short, qs, ps) = setup(1.0, 5);
        assert!(Session::new(&short, &qs, ps, SessionConfig::default()).is_err());
        assert!(Session::new(&trace, &q, preds[..10].to_vec(), SessionConfig::default()).is_err());
    }
}
