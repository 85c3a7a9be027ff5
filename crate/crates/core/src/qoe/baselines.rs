use std::io::Write;

use crate::error::{Error, Result};
use crate::netsim::{run_session, Controller, Observation, SessionConfig, Step};
use crate::trace::{BandwidthTrace, QualityCurveSeries, QualityVector};
use crate::vqrl::ActionSpace;
use crate::BITRATES_KBPS;

use super::{qoe_eval, QoeWeights};

const TOP: usize = ActionSpace::SIZE - 1;

/// Always sends the same bitrate.
#[derive(Debug, Clone, Copy)]
pub struct FixedBitrate {
    action: usize,
}

impl FixedBitrate {
    pub fn new(action: usize) -> Result<Self> {
        ActionSpace::kbps(action)?;
        Ok(FixedBitrate { action })
    }
}

impl Controller for FixedBitrate {
    fn name(&self) -> String {
        format!("fixed:{}", self.action)
    }

    fn select(&mut self, _: &Observation) -> usize {
        self.action
    }
}

/// Climbs one level while the last slot was (nearly) loss-free, backs off
/// one level on heavy loss, holds in between.
#[derive(Debug, Clone, Copy)]
pub struct LossBased {
    pub low: f64,
    pub high: f64,
}

impl Default for LossBased {
    fn default() -> Self {
        LossBased { low: 0.01, high: 0.1 }
    }
}

impl Controller for LossBased {
    fn name(&self) -> String {
        "loss".into()
    }

    fn select(&mut self, obs: &Observation) -> usize {
        let level = obs.last_action;
        let loss = obs.last.loss_ratio;
        if loss >= self.high {
            level.saturating_sub(1)
        } else if loss <= self.low {
            (level + 1).min(TOP)
        } else {
            level
        }
    }
}

/// Backs off while queuing delay grows by more than `epsilon` seconds per
/// slot, climbs when it shrinks or the queue is empty.
#[derive(Debug, Clone, Copy)]
pub struct DelayBased {
    pub epsilon: f64,
}

impl Default for DelayBased {
    fn default() -> Self {
        DelayBased { epsilon: 0.005 }
    }
}

impl Controller for DelayBased {
    fn name(&self) -> String {
        "delay".into()
    }

    fn select(&mut self, obs: &Observation) -> usize {
        let level = obs.last_action;
        let g = obs.last.delay_gradient_s;
        if g > self.epsilon {
            level.saturating_sub(1)
        } else if g < -self.epsilon || obs.last.queue_len_end == 0 {
            (level + 1).min(TOP)
        } else {
            level
        }
    }
}

/// Oracle that knows every slot's bandwidth and sends the largest
/// candidate bitrate that fits (the lowest one if none does).
#[derive(Debug, Clone)]
pub struct OfflineOptimal {
    bandwidths: Vec<f64>,
}

impl OfflineOptimal {
    pub fn new(trace: &BandwidthTrace, slot: f64) -> Self {
        OfflineOptimal {
            bandwidths: trace.slot_bandwidths(slot),
        }
    }

    pub fn action_for(bandwidth_mbps: f64) -> usize {
        BITRATES_KBPS
            .iter()
            .rposition(|kbps| kbps / 1000.0 <= bandwidth_mbps + 1e-12)
            .unwrap_or(0)
    }
}

impl Controller for OfflineOptimal {
    fn name(&self) -> String {
        "offline-optimal".into()
    }

    fn select(&mut self, obs: &Observation) -> usize {
        Self::action_for(self.bandwidths[obs.slot])
    }
}

pub fn offline_optimal_high_bitrate(
    trace: &BandwidthTrace,
    quality: &QualityCurveSeries,
    predictions: Vec<QualityVector>,
    cfg: SessionConfig,
) -> Result<Vec<Step>> {
    run_session(&mut OfflineOptimal::new(trace, cfg.sim.slot), trace, quality, predictions, cfg)
}

pub const COMPARISON_HEADER: [&str; 7] = ["policy", "trace_id", "avg_quality", "avg_send_mbps", "avg_p95_qdelay_s", "avg_loss", "qoe"];

/// Per-(policy, trace) summary row of an evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub policy: String,
    pub trace_id: String,
    pub avg_quality: f64,
    pub avg_send_mbps: f64,
    pub avg_p95_qdelay_s: f64,
    pub avg_loss: f64,
    pub qoe: f64,
}

impl ComparisonRow {
    pub fn from_steps(policy: &str, trace_id: &str, steps: &[Step], w: &QoeWeights) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::invalid("no steps to summarize"));
        }
        let n = steps.len() as f64;
        let avg = |f: &dyn Fn(&Step) -> f64| steps.iter().map(f).sum::<f64>() / n;
        Ok(ComparisonRow {
            policy: policy.to_string(),
            trace_id: trace_id.to_string(),
            avg_quality: avg(&|s| s.quality),
            avg_send_mbps: avg(&|s| s.report.send_mbps),
            avg_p95_qdelay_s: avg(&|s| s.report.p95_qdelay_s),
            avg_loss: avg(&|s| s.report.loss_ratio),
            qoe: qoe_eval(&crate::netsim::trajectory_of(steps)?, w)?,
        })
    }
}

pub fn write_comparison_csv<W: Write>(w: W, rows: &[ComparisonRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(COMPARISON_HEADER)?;
    for r in rows {
        wtr.write_record(&[
            r.policy.clone(),
            r.trace_id.clone(),
            r.avg_quality.to_string(),
            r.avg_send_mbps.to_string(),
            r.avg_p95_qdelay_s.to_string(),
            r.avg_loss.to_string(),
            r.qoe.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}
