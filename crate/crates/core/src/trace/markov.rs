use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::seed::rng_from;

use super::BandwidthTrace;

/// Floor applied to noisy per-slot samples.
const MIN_MBPS: f64 = 0.05;

/// Hidden-state throughput model: each state has a mean throughput and the
/// chain moves between states once per slot.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovTraceConfig {
    pub states: Vec<f64>,
    /// Row-stochastic, `states.len()` square.
    pub transition: Vec<Vec<f64>>,
    pub noise_std: f64,
    pub slot: f64,
    pub length: usize,
    pub seed: u64,
}

impl MarkovTraceConfig {
    /// Chain that stays put with probability `1 - switch_prob` and otherwise
    /// jumps uniformly to one of the other states.
    pub fn uniform_switching(states: Vec<f64>, switch_prob: f64, noise_std: f64, length: usize, seed: u64) -> Self {
        let n = states.len();
        let transition = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| match (n, i == j) {
                        (1, _) => 1.0,
                        (_, true) => 1.0 - switch_prob,
                        (_, false) => switch_prob / (n - 1) as f64,
                    })
                    .collect()
            })
            .collect();
        MarkovTraceConfig {
            states,
            transition,
            noise_std,
            slot: 1.0,
            length,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.states.len();
        if n == 0 {
            return Err(Error::invalid("at least one state is required"));
        }
        if let Some(s) = self.states.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid(format!("state mean must be positive, got {s}")));
        }
        if self.transition.len() != n {
            return Err(Error::invalid(format!(
                "transition matrix has {} rows for {n} states",
                self.transition.len()
            )));
        }
        for (i, row) in self.transition.iter().enumerate() {
            if row.len() != n {
                return Err(Error::invalid(format!("transition row {i} has {} entries, want {n}", row.len())));
            }
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::invalid(format!("transition row {i} has an entry outside [0, 1]")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!("transition row {i} sums to {sum}")));
            }
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::invalid("noise_std must be non-negative"));
        }
        if !(self.slot > 0.0) {
            return Err(Error::invalid("slot must be positive"));
        }
        Ok(())
    }
}

pub fn gen_markov_trace(id: &str, cfg: &MarkovTraceConfig) -> Result<BandwidthTrace> {
    gen_markov_trace_with_states(id, cfg).map(|(t, _)| t)
}

/// Like [`gen_markov_trace`] but also returns the hidden state index of every slot.
pub fn gen_markov_trace_with_states(id: &str, cfg: &MarkovTraceConfig) -> Result<(BandwidthTrace, Vec<usize>)> {
    cfg.validate()?;
    let mut rng = rng_from(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::invalid(e.to_string()))?;
    let n = cfg.states.len();
    let mut state = rng.random_range(0..n);
    let mut states = Vec::with_capacity(cfg.length);
    let mut mbps = Vec::with_capacity(cfg.length);
    for slot in 0..cfg.length {
        if slot > 0 {
            state = next_state(&cfg.transition[state], rng.random());
        }
        states.push(state);
        mbps.push((cfg.states[state] + noise.sample(&mut rng)).max(MIN_MBPS));
    }
    Ok((BandwidthTrace::from_slots(id, cfg.slot, &mbps)?, states))
}

fn next_state(row: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (j, p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return j;
        }
    }
    // Rounding left `u` past the cumulative sum; take the last reachable state.
    row.iter().rposition(|p| *p > 0.0).unwrap_or(row.len() - 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_state_without_noise_is_constant() {
        let cfg = MarkovTraceConfig::uniform_switching(vec![1.0], 0.0, 0.0, 50, 3);
        let t = gen_markov_trace("m", &cfg).unwrap();
        assert_eq!(t.len(), 50);
        assert!(t.entries().iter().all(|e| e.mbps == 1.0));
    }

    #[test]
    fn same_seed_same_trace() {
        let cfg = MarkovTraceConfig::uniform_switching(vec![0.5, 1.5, 2.5], 0.2, 0.3, 200, 11);
        assert_eq!(gen_markov_trace("m", &cfg).unwrap(), gen_markov_trace("m", &cfg).unwrap());
        let other = MarkovTraceConfig { seed: 12, ..cfg.clone() };
        assert_ne!(gen_markov_trace("m", &cfg).unwrap(), gen_markov_trace("m", &other).unwrap());
    }

    #[test]
    fn switch_frequency_matches_transition_probability() {
        let cfg = MarkovTraceConfig::uniform_switching(vec![1.0, 2.0], 0.1, 0.1, 10_000, 5);
        let (_, states) = gen_markov_trace_with_states("m", &cfg).unwrap();
        let switches = states.windows(2).filter(|w| w[0] != w[1]).count();
        let freq = switches as f64 / (states.len() - 1) as f64;
        assert!((freq - 0.1).abs() <= 0.02, "switch frequency {freq}");
    }

    #[test]
    fn noise_is_floored() {
        let cfg = MarkovTraceConfig::uniform_switching(vec![0.06], 0.0, 1.0, 500, 8);
        let t = gen_markov_trace("m", &cfg).unwrap();
        assert!(t.entries().iter().all(|e| e.mbps >= MIN_MBPS));
        assert!(t.entries().iter().any(|e| e.mbps == MIN_MBPS));
    }

    #[test]
    fn invalid_configs_rejected() {
        let good = MarkovTraceConfig::uniform_switching(vec![1.0, 2.0], 0.1, 0.1, 10, 0);
        let mut bad = good.clone();
        bad.transition[0] = vec![0.5, 0.6];
        assert!(gen_markov_trace("m", &bad).is_err());
        let mut bad = good.clone();
        bad.states[1] = 0.0;
        assert!(gen_markov_trace("m", &bad).is_err());
        let mut bad = good.clone();
        bad.transition.pop();
        assert!(gen_markov_trace("m", &bad).is_err());
        let mut bad = good;
        bad.noise_std = -1.0;
        assert!(gen_markov_trace("m", &bad).is_err());
    }
}
