//! Session quality-of-experience score and the comparison controllers.
//!
//! ```text
//! QoE = Σ_n (V_n − α·B_n − β·D_n) − γ·Σ_{n≥1} |V_n − V_{n−1}|
//! ```
//! with `V` quality in `[0, 1]`, `B` bitrate in Mbps and `D` the slot's mean
//! delay gradient in seconds.

mod baselines;

pub use baselines::{
    offline_optimal_high_bitrate, write_comparison_csv, ComparisonRow, DelayBased, FixedBitrate, LossBased, OfflineOptimal,
    COMPARISON_HEADER,
};

use crate::error::{Error, Result};
use crate::BITRATES_KBPS;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QoeWeights {
    /// Bitrate penalty per Mbps.
    pub alpha: f64,
    /// Delay-gradient penalty per second.
    pub beta: f64,
    /// Smoothness penalty per unit of quality change.
    pub gamma: f64,
}

impl Default for QoeWeights {
    fn default() -> Self {
        Self::BASELINE
    }
}

impl QoeWeights {
    pub const BASELINE: QoeWeights = QoeWeights {
        alpha: 0.2,
        beta: 1.0,
        gamma: 1.0,
    };
    /// Delay-averse variant.
    pub const BETA10: QoeWeights = QoeWeights {
        alpha: 0.2,
        beta: 10.0,
        gamma: 1.0,
    };

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "baseline-qoe" => Ok(Self::BASELINE),
            "beta10-qoe" => Ok(Self::BETA10),
            _ => Err(Error::invalid(format!("unknown QoE preset {name:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.alpha, self.beta, self.gamma].iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::invalid("QoE weights must be finite and non-negative"));
        }
        Ok(())
    }
}

/// One slot of a session as the QoE score sees it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QoeRecord {
    pub quality: f64,
    pub bitrate_mbps: f64,
    pub delay_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SessionTrajectory {
    records: Vec<QoeRecord>,
}

impl SessionTrajectory {
    pub fn new(records: Vec<QoeRecord>) -> Result<Self> {
        for (i, r) in records.iter().enumerate() {
            if !(0.0..=1.0).contains(&r.quality) {
                return Err(Error::invalid(format!("slot {i}: quality {} outside [0, 1]", r.quality)));
            }
            if !BITRATES_KBPS.iter().any(|b| (b / 1000.0 - r.bitrate_mbps).abs() < 1e-12) {
                return Err(Error::invalid(format!("slot {i}: {} Mbps is not a candidate bitrate", r.bitrate_mbps)));
            }
            if !r.delay_s.is_finite() {
                return Err(Error::NonFinite { op: "session_trajectory" });
            }
        }
        Ok(SessionTrajectory { records })
    }

    pub fn records(&self) -> &[QoeRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

pub fn qoe_eval(traj: &SessionTrajectory, w: &QoeWeights) -> Result<f64> {
    let r = traj.records();
    if r.is_empty() {
        return Err(Error::invalid("empty trajectory"));
    }
    let per_slot: f64 = r.iter().map(|x| x.quality - w.alpha * x.bitrate_mbps - w.beta * x.delay_s).sum();
    let smoothness: f64 = r.windows(2).map(|p| (p[1].quality - p[0].quality).abs()).sum();
    Ok(per_slot - w.gamma * smoothness)
}

/// Slot `n`'s share of the session QoE; pass `prev_quality = quality` for the first slot.
pub fn per_step_reward(prev_quality: f64, quality: f64, bitrate_mbps: f64, delay_s: f64, w: &QoeWeights) -> f64 {
    quality - w.alpha * bitrate_mbps - w.beta * delay_s - w.gamma * (quality - prev_quality).abs()
}
