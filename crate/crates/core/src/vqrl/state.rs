use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::netsim::fft_magnitudes;
use crate::trace::QualityVector;
use crate::BITRATES_KBPS;

/// Sending-rate ceiling used to normalize rates.
pub const RATE_SCALE_MBPS: f64 = 1.8;
pub const DEFAULT_HISTORY: usize = 10;

/// Candidate bitrates the agent chooses between.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionSpace;

impl ActionSpace {
    pub const SIZE: usize = BITRATES_KBPS.len();

    pub fn kbps(action: usize) -> Result<f64> {
        BITRATES_KBPS
            .get(action)
            .copied()
            .ok_or_else(|| Error::invalid(format!("action {action} outside [0, {})", Self::SIZE)))
    }

    pub fn mbps(action: usize) -> Result<f64> {
        Self::kbps(action).map(|k| k / 1000.0)
    }
}

/// Observed outcome of one slot.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SlotObservation {
    pub send_mbps: f64,
    pub recv_mbps: f64,
    pub delay_gradient_s: f64,
    pub loss_ratio: f64,
    /// Realized quality of the bitrate that was sent.
    pub quality: f64,
}

/// Rolling per-slot observations, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct History {
    slots: VecDeque<SlotObservation>,
    capacity: usize,
}

impl History {
    pub fn new(capacity: usize) -> Self {
        History {
            slots: VecDeque::with_capacity(capacity + 1),
            capacity,
        }
    }

    pub fn push(&mut self, obs: SlotObservation) {
        self.slots.push_back(obs);
        while self.slots.len() > self.capacity {
            self.slots.pop_front();
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &SlotObservation> {
        self.slots.iter()
    }

    pub fn last(&self) -> Option<&SlotObservation> {
        self.slots.back()
    }
}

/// Normalized observation fed to the policy and value networks. Every
/// history row has exactly `k` entries, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    /// Past sending quality.
    pub p: Vec<f64>,
    /// Predicted next-slot quality per candidate bitrate.
    pub v: Vec<f64>,
    /// Past send rates / 1.8 Mbps.
    pub s: Vec<f64>,
    /// Past receive rates / 1.8 Mbps.
    pub r: Vec<f64>,
    /// Past delay gradients, clamped to [-1, 1] s.
    pub d: Vec<f64>,
    /// Past loss ratios.
    pub l: Vec<f64>,
    /// DFT magnitudes of `r`.
    pub f: Vec<f64>,
}

impl AgentState {
    pub fn k(&self) -> usize {
        self.s.len()
    }

    /// History rows in network order: s, r, d, l, p.
    pub fn rows(&self) -> [&[f64]; 5] {
        [&self.s, &self.r, &self.d, &self.l, &self.p]
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        let rows_ok = self.rows().iter().all(|r| r.len() == k);
        if !rows_ok || self.v.len() != ActionSpace::SIZE || self.f.len() != k / 2 + 1 {
            return Err(Error::shape("agent_state", format!("inconsistent row lengths for k = {k}")));
        }
        let all = self.rows().into_iter().flatten().chain(&self.v).chain(&self.f);
        if all.into_iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: "agent_state" });
        }
        let unit = |xs: &[f64]| xs.iter().all(|x| (0.0..=1.0).contains(x));
        if !unit(&self.p) || !unit(&self.v) || !unit(&self.l) {
            return Err(Error::invalid("p, v and l must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Assembles the most recent `k` slots of `history` (zero-padded at the
/// old end) and the quality prediction into a normalized state.
pub fn build_state(history: &History, prediction: &QualityVector, k: usize) -> Result<AgentState> {
    if k < 2 {
        return Err(Error::invalid("history length must be at least 2"));
    }
    let recent: Vec<&SlotObservation> = history.iter().collect();
    let recent = &recent[recent.len().saturating_sub(k)..];
    let pad = k - recent.len();
    let row = |f: &dyn Fn(&SlotObservation) -> f64| -> Vec<f64> {
        std::iter::repeat_n(0.0, pad).chain(recent.iter().map(|o| f(o))).collect()
    };
    let s = row(&|o| o.send_mbps / RATE_SCALE_MBPS);
    let r = row(&|o| o.recv_mbps / RATE_SCALE_MBPS);
    let d = row(&|o| o.delay_gradient_s.clamp(-1.0, 1.0));
    let l = row(&|o| o.loss_ratio);
    let p = row(&|o| o.quality);
    if s.iter().chain(&r).chain(&l).chain(&p).chain(prediction).any(|x| !x.is_finite())
        || recent.iter().any(|o| !o.delay_gradient_s.is_finite())
    {
        return Err(Error::NonFinite { op: "build_state" });
    }
    let f = fft_magnitudes(&r)?;
    let state = AgentState {
        p,
        v: prediction.to_vec(),
        s,
        r,
        d,
        l,
        f,
    };
    state.validate()?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(i: usize) -> SlotObservation {
        SlotObservation {
            send_mbps: 0.1 * i as f64,
            recv_mbps: 0.9,
            delay_gradient_s: if i % 2 == 0 { 3.0 } else { -0.01 },
            loss_ratio: 0.0,
            quality: 0.5,
        }
    }

    #[test]
    fn empty_history_is_zero_except_prediction() {
        let v = [0.1, 0.2, 0.3, 0.4, 0.5];
        let st = build_state(&History::new(10), &v, 10).unwrap();
        assert_eq!(st.v, v.to_vec());
        for row in st.rows() {
            assert_eq!(row, &[0.0; 10]);
        }
        assert!(st.f.iter().all(|x| *x == 0.0));
        assert_eq!(st.f.len(), 6);
    }

    #[test]
    fn constant_receive_rate_is_dc_only() {
        let mut h = History::new(10);
        for i in 0..10 {
            h.push(obs(i));
        }
        let st = build_state(&h, &[0.5; 5], 10).unwrap();
        assert!((st.f[0] - 0.5).abs() < 1e-12);
        assert!(st.f[1..].iter().all(|x| x.abs() < 1e-9));
    }

    #[test]
    fn uses_most_recent_k_slots() {
        let mut h = History::new(100);
        for i in 0..13 {
            h.push(obs(i));
        }
        let st = build_state(&h, &[0.5; 5], 10).unwrap();
        let want: Vec<f64> = (3..13).map(|i| 0.1 * i as f64 / RATE_SCALE_MBPS).collect();
        assert_eq!(st.s, want);
        assert_eq!(st.d[0], -0.01);
        assert_eq!(st.d[1], 1.0);
    }

    #[test]
    fn short_history_is_padded_at_the_old_end() {
        let mut h = History::new(10);
        h.push(obs(4));
        let st = build_state(&h, &[0.5; 5], 4).unwrap();
        assert_eq!(st.s, vec![0.0, 0.0, 0.0, 0.4 / RATE_SCALE_MBPS]);
    }

    #[test]
    fn rejects_non_finite() {
        let mut h = History::new(10);
        h.push(SlotObservation {
            recv_mbps: f64::NAN,
            ..obs(1)
        });
        assert!(build_state(&h, &[0.5; 5], 10).is_err());
        assert!(build_state(&History::new(3), &[f64::INFINITY; 5], 10).is_err());
    }

    #[test]
    fn action_space() {
        assert_eq!(ActionSpace::SIZE, 5);
        assert_eq!(ActionSpace::mbps(4).unwrap(), 1.4);
        assert!(ActionSpace::kbps(5).is_err());
        assert!(BITRATES_KBPS.windows(2).all(|w| w[0] < w[1]));
    }
}
