use rand::Rng;

use crate::error::{Error, Result};
use crate::netsim::Session;
use crate::tensor::{entropy, Tape};

use super::{ActionSpace, AgentState, PolicyNet, ValueNet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SelectMode {
    /// Draw from the policy distribution (training).
    Sample,
    /// Most probable action, lowest index on ties (evaluation).
    Greedy,
}

/// Picks an action from a probability vector.
pub fn choose_action<R: Rng>(probs: &[f64], mode: SelectMode, rng: &mut R) -> usize {
    match mode {
        SelectMode::Greedy => {
            let mut best = 0;
            for (i, p) in probs.iter().enumerate() {
                if *p > probs[best] {
                    best = i;
                }
            }
            best
        }
        SelectMode::Sample => {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    return i;
                }
            }
            // Rounding left `acc` a hair below 1: fall back to the last
            // action with non-zero mass.
            probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
        }
    }
}

pub fn select_action<R: Rng>(policy: &PolicyNet, state: &AgentState, mode: SelectMode, rng: &mut R) -> Result<usize> {
    Ok(choose_action(&policy.probabilities(state)?, mode, rng))
}

/// Discounted n-step returns: `target_t = r_t + γ·target_{t+1}`, seeded
/// with `bootstrap` past the last reward (pass 0 for a terminal state).
pub fn n_step_targets(rewards: &[f64], bootstrap: f64, gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = bootstrap;
    for (o, r) in out.iter_mut().zip(rewards).rev() {
        acc = r + gamma * acc;
        *o = acc;
    }
    out
}

/// `A = Q - V`.
pub fn advantage(q_target: f64, value_estimate: f64) -> f64 {
    q_target - value_estimate
}

/// One transition gathered by a worker.
#[derive(Debug, Clone, PartialEq)]
pub struct Experience {
    pub state: AgentState,
    pub action: usize,
    pub reward: f64,
    /// Critic's estimate of `state` when the transition was gathered.
    pub value_estimate: f64,
    /// Critic's estimate of the following state (0 when terminal).
    pub next_value_estimate: f64,
    pub terminal: bool,
}

/// n-step targets for a contiguous rollout, bootstrapped from the critic
/// estimate after its last transition.
pub fn batch_targets(batch: &[Experience], gamma: f64) -> Vec<f64> {
    let Some(last) = batch.last() else {
        return Vec::new();
    };
    let bootstrap = if last.terminal { 0.0 } else { last.next_value_estimate };
    let rewards: Vec<f64> = batch.iter().map(|e| e.reward).collect();
    n_step_targets(&rewards, bootstrap, gamma)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PolicyReport {
    /// `-Σ (A·log π(a|s) + β·H)` before the step.
    pub loss: f64,
    pub mean_entropy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ValueReport {
    /// `Σ (target - V(s))²` before the step.
    pub loss: f64,
}

fn check_batch(n: usize, m: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::invalid("empty batch"));
    }
    if n != m {
        return Err(Error::shape("batch", format!("{n} experiences, {m} advantages/targets")));
    }
    Ok(())
}

/// Gradient of `-Σ_i (A_i·log π(a_i|s_i) + β·H(π(·|s_i)))`, with the
/// advantages held constant. Returns one vector per parameter.
pub fn policy_gradients(policy: &PolicyNet, batch: &[Experience], advantages: &[f64], beta: f64) -> Result<(Vec<Vec<f64>>, PolicyReport)> {
    check_batch(batch.len(), advantages.len())?;
    let mut grads: Vec<Vec<f64>> = policy.store.iter().map(|p| vec![0.0; p.tensor.len()]).collect();
    let mut report = PolicyReport::default();
    for (e, &a) in batch.iter().zip(advantages) {
        ActionSpace::kbps(e.action)?;
        let mut tape = Tape::new();
        let p = policy.store.bind(&mut tape);
        let logits = policy.logits(&mut tape, &p, &e.state)?;
        let logp = tape.log_softmax(logits)?;
        let chosen = tape.pick(logp, e.action)?;
        let probs = tape.softmax(logits)?;
        let h = tape.entropy(probs)?;
        let gain = tape.scale(chosen, a);
        let bonus = tape.scale(h, beta);
        let objective = tape.add(gain, bonus)?;
        let loss = tape.scale(objective, -1.0);
        report.loss += tape.scalar(loss);
        report.mean_entropy += tape.scalar(h);
        tape.backward(loss)?;
        for (g, v) in grads.iter_mut().zip(p.vars()) {
            for (gi, d) in g.iter_mut().zip(tape.grad(*v)) {
                *gi += d;
            }
        }
    }
    report.mean_entropy /= batch.len() as f64;
    Ok((grads, report))
}

/// Gradient of `Σ_i (target_i - V(s_i))²`.
pub fn value_gradients(value: &ValueNet, batch: &[Experience], targets: &[f64]) -> Result<(Vec<Vec<f64>>, ValueReport)> {
    check_batch(batch.len(), targets.len())?;
    let mut grads: Vec<Vec<f64>> = value.store.iter().map(|p| vec![0.0; p.tensor.len()]).collect();
    let mut report = ValueReport::default();
    for (e, &t) in batch.iter().zip(targets) {
        let mut tape = Tape::new();
        let p = value.store.bind(&mut tape);
        let v = value.estimate(&mut tape, &p, &e.state)?;
        let target = tape.constant_vec(vec![t]);
        let err = tape.sub(v, target)?;
        let loss = tape.sum_squares(err);
        report.loss += tape.scalar(loss);
        tape.backward(loss)?;
        for (g, var) in grads.iter_mut().zip(p.vars()) {
            for (gi, d) in g.iter_mut().zip(tape.grad(*var)) {
                *gi += d;
            }
        }
    }
    Ok((grads, report))
}

/// One actor Adam step on the batch.
pub fn policy_update(policy: &mut PolicyNet, batch: &[Experience], advantages: &[f64], beta: f64) -> Result<PolicyReport> {
    let (grads, report) = policy_gradients(policy, batch, advantages, beta)?;
    policy.store.apply_grads(&grads)?;
    Ok(report)
}

/// One critic Adam step on the batch.
pub fn value_update(value: &mut ValueNet, batch: &[Experience], targets: &[f64]) -> Result<ValueReport> {
    let (grads, report) = value_gradients(value, batch, targets)?;
    value.store.apply_grads(&grads)?;
    Ok(report)
}

/// Runs up to `len` slots of `session` under the given networks. Stops
/// early, marking the last transition terminal, when the session ends.
/// Also returns the mean policy entropy over the visited states.
pub fn worker_rollout<R: Rng>(
    session: &mut Session,
    policy: &PolicyNet,
    value: &ValueNet,
    len: usize,
    mode: SelectMode,
    rng: &mut R,
) -> Result<(Vec<Experience>, f64)> {
    if session.done() {
        return Err(Error::invalid("rollout on a finished session"));
    }
    let mut batch: Vec<Experience> = Vec::with_capacity(len);
    let mut state = session.state()?;
    let mut v_state = value.value(&state)?;
    let mut total_entropy = 0.0;
    for _ in 0..len {
        let probs = policy.probabilities(&state)?;
        total_entropy += entropy(&probs)?;
        let action = choose_action(&probs, mode, rng);
        let step = session.step(state.clone(), action)?;
        let terminal = session.done();
        let (next_state, v_next) = if terminal {
            (None, 0.0)
        } else {
            let s = session.state()?;
            let v = value.value(&s)?;
            (Some(s), v)
        };
        batch.push(Experience {
            state,
            action,
            reward: step.reward,
            value_estimate: v_state,
            next_value_estimate: v_next,
            terminal,
        });
        match next_state {
            Some(s) => {
                state = s;
                v_state = v_next;
            }
            None => break,
        }
    }
    let mean_entropy = total_entropy / batch.len() as f64;
    Ok((batch, mean_entropy))
}
