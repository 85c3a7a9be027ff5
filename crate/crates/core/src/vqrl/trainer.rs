use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use rand::Rng;

use crate::error::{Error, Result};
use crate::netsim::{run_session, Controller, Observation, Session, SessionConfig, Step};
use crate::seed::{derive_indexed, derive_seed, rng_from, SimRng};
use crate::tensor::{load_checkpoint, save_checkpoint};
use crate::trace::{BandwidthTrace, QualityCurveSeries, QualityVector};

use super::{
    advantage, batch_targets, central_apply, policy_gradients, value_gradients, worker_rollout, CentralStore, GradientMessage, NetConfig,
    PolicyNet, SelectMode, ValueNet,
};

/// One training or evaluation session's inputs.
#[derive(Debug, Clone)]
pub struct Episode {
    pub trace: BandwidthTrace,
    pub quality: QualityCurveSeries,
    /// Quality forecast per slot, as the agent will see it.
    pub predictions: Vec<QualityVector>,
}

impl Episode {
    pub fn session(&self, cfg: SessionConfig) -> Result<Session> {
        Session::new(&self.trace, &self.quality, self.predictions.clone(), cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainerConfig {
    pub gamma: f64,
    /// Entropy weight at the first iteration.
    pub beta_start: f64,
    /// Entropy weight reached at the last iteration.
    pub beta_end: f64,
    /// Rollout length; also the n of the n-step targets.
    pub n_step: usize,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub workers: usize,
    pub iterations: usize,
    pub seed: u64,
    pub net: NetConfig,
    pub session: SessionConfig,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            // Action effects on reward are nearly immediate; a long horizon
            // only adds content-driven variance to the advantages.
            gamma: 0.5,
            beta_start: 0.5,
            beta_end: 0.1,
            n_step: 20,
            lr_actor: 1e-4,
            lr_critic: 1e-3,
            workers: 8,
            iterations: 10_000,
            seed: 0,
            net: NetConfig::default(),
            session: SessionConfig::default(),
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::invalid("gamma must be in (0, 1]"));
        }
        if !(self.beta_start >= 0.0 && self.beta_end >= 0.0) {
            return Err(Error::invalid("entropy weights must be non-negative"));
        }
        if !(self.lr_actor > 0.0 && self.lr_critic > 0.0) {
            return Err(Error::invalid("learning rates must be positive"));
        }
        if self.n_step == 0 || self.workers == 0 {
            return Err(Error::invalid("n_step and workers must be positive"));
        }
        if self.net.history != self.session.history_len {
            return Err(Error::invalid(format!(
                "network history {} differs from session history {}",
                self.net.history, self.session.history_len
            )));
        }
        self.net.validate()
    }

    /// Effective number of rewards in a discounted return, 1/(1−γ), capped
    /// at 100 for γ near 1.
    pub fn return_horizon(&self) -> f64 {
        1.0 / (1.0 - self.gamma).max(0.01)
    }

    /// Entropy weight for iteration `iter`, decaying linearly.
    pub fn beta_at(&self, iter: usize) -> f64 {
        let span = self.iterations.saturating_sub(1).max(1) as f64;
        let frac = (iter as f64 / span).min(1.0);
        self.beta_start + (self.beta_end - self.beta_start) * frac
    }
}

pub const TRAIN_LOG_HEADER: [&str; 6] = ["iter", "mean_reward", "entropy", "value_loss", "policy_loss", "version"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub mean_reward: f64,
    pub entropy: f64,
    pub value_loss: f64,
    pub policy_loss: f64,
    /// Central version after this iteration's update.
    pub version: u64,
}

pub fn write_train_log<W: Write>(w: W, rows: &[LogRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(TRAIN_LOG_HEADER)?;
    for r in rows {
        wtr.write_record(&[
            r.iter.to_string(),
            r.mean_reward.to_string(),
            r.entropy.to_string(),
            r.value_loss.to_string(),
            r.policy_loss.to_string(),
            r.version.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Debug)]
struct Worker {
    id: u64,
    rng: SimRng,
    session: Option<Session>,
    sessions_started: u64,
    policy: PolicyNet,
    value: ValueNet,
}

impl Worker {
    fn iterate(&mut self, iter: usize, cfg: &TrainerConfig, episodes: &[Episode], central: &CentralStore) -> Result<LogRow> {
        let snap = central.snapshot();
        self.policy.store.set_values(&snap.policy)?;
        self.value.store.set_values(&snap.value)?;
        if self.session.as_ref().is_none_or(Session::done) {
            let ep = &episodes[self.rng.random_range(0..episodes.len())];
            let mut session_cfg = cfg.session;
            session_cfg.sim.seed = derive_indexed(derive_indexed(cfg.seed, "worker-session", self.id), "session", self.sessions_started);
            self.sessions_started += 1;
            self.session = Some(ep.session(session_cfg)?);
        }
        let session = self.session.as_mut().expect("session set above");
        let (batch, entropy) = worker_rollout(session, &self.policy, &self.value, cfg.n_step, SelectMode::Sample, &mut self.rng)?;
        let targets = batch_targets(&batch, cfg.gamma);
        let advantages: Vec<f64> = batch.iter().zip(&targets).map(|(e, q)| advantage(*q, e.value_estimate)).collect();
        let (pg, prep) = policy_gradients(&self.policy, &batch, &advantages, cfg.beta_at(iter))?;
        let (vg, vrep) = value_gradients(&self.value, &batch, &targets)?;
        let version = central_apply(
            central,
            &GradientMessage {
                policy: pg,
                value: vg,
                based_on: snap.version,
            },
        )?;
        Ok(LogRow {
            iter,
            mean_reward: batch.iter().map(|e| e.reward).sum::<f64>() / batch.len() as f64,
            entropy,
            value_loss: vrep.loss,
            policy_loss: prep.loss,
            version,
        })
    }
}

/// Asynchronous advantage actor-critic trainer: `workers` threads each run
/// their own sessions against snapshots of a central store and push
/// gradients back to it. One worker gives a bit-reproducible run.
#[derive(Debug)]
pub struct Trainer {
    pub cfg: TrainerConfig,
    episodes: Arc<Vec<Episode>>,
    central: Arc<CentralStore>,
    workers: Vec<Worker>,
    completed: usize,
    log: Vec<LogRow>,
}

impl Trainer {
    pub fn new(cfg: TrainerConfig, episodes: Vec<Episode>) -> Result<Self> {
        cfg.validate()?;
        if episodes.is_empty() {
            return Err(Error::invalid("no training episodes"));
        }
        for ep in &episodes {
            ep.session(cfg.session)?;
        }
        let policy = PolicyNet::new(cfg.net, cfg.lr_actor, derive_seed(cfg.seed, "policy-init"))?;
        let value = ValueNet::new(cfg.net, cfg.lr_critic, derive_seed(cfg.seed, "value-init"))?.with_output_scale(cfg.return_horizon())?;
        let central = Arc::new(CentralStore::new(policy.store.clone(), value.store.clone()));
        let workers = (0..cfg.workers as u64)
            .map(|id| Worker {
                id,
                rng: rng_from(derive_indexed(cfg.seed, "worker", id)),
                session: None,
                sessions_started: 0,
                policy: policy.clone(),
                value: value.clone(),
            })
            .collect();
        Ok(Trainer {
            cfg,
            episodes: Arc::new(episodes),
            central,
            workers,
            completed: 0,
            log: Vec::new(),
        })
    }

    pub fn central(&self) -> &Arc<CentralStore> {
        &self.central
    }

    pub fn completed(&self) -> usize {
        self.completed
    }

    /// Every log row so far, ordered by iteration.
    pub fn log(&self) -> &[LogRow] {
        &self.log
    }

    /// Runs `n` more iterations; returns their log rows.
    pub fn run(&mut self, n: usize) -> Result<&[LogRow]> {
        let start = self.completed;
        let end = start + n;
        if self.workers.len() == 1 {
            let w = &mut self.workers[0];
            for iter in start..end {
                self.log.push(w.iterate(iter, &self.cfg, &self.episodes, &self.central)?);
            }
        } else {
            let next = AtomicUsize::new(start);
            let rows = Mutex::new(Vec::with_capacity(n));
            let failure: Mutex<Option<Error>> = Mutex::new(None);
            let (cfg, episodes, central) = (&self.cfg, &self.episodes, &self.central);
            std::thread::scope(|scope| {
                for w in &mut self.workers {
                    let (next, rows, failure) = (&next, &rows, &failure);
                    scope.spawn(move || loop {
                        let iter = next.fetch_add(1, Ordering::SeqCst);
                        if iter >= end || failure.lock().expect("failure lock").is_some() {
                            break;
                        }
                        match w.iterate(iter, cfg, episodes, central) {
                            Ok(row) => rows.lock().expect("log lock").push(row),
                            Err(e) => {
                                failure.lock().expect("failure lock").get_or_insert(e);
                                break;
                            }
                        }
                    });
                }
            });
            if let Some(e) = failure.into_inner().expect("failure lock") {
                return Err(e);
            }
            let mut rows = rows.into_inner().expect("log lock");
            rows.sort_by_key(|r| r.iter);
            self.log.extend(rows);
        }
        self.completed = end;
        Ok(&self.log[self.log.len() - n..])
    }

    /// Runs the remaining iterations up to `cfg.iterations`.
    pub fn train(&mut self) -> Result<&[LogRow]> {
        let n = self.cfg.iterations.saturating_sub(self.completed);
        self.run(n)
    }

    /// Actor with the current central parameters.
    pub fn policy(&self) -> Result<PolicyNet> {
        let mut p = self.workers[0].policy.clone();
        p.store = self.central.stores().0;
        Ok(p)
    }

    pub fn value(&self) -> Result<ValueNet> {
        let mut v = self.workers[0].value.clone();
        v.store = self.central.stores().1;
        Ok(v)
    }

    /// Writes `policy.qarc` and `value.qarc` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let (p, v) = self.central.stores();
        save_checkpoint(&p, &dir.join("policy.qarc"))?;
        save_checkpoint(&v, &dir.join("value.qarc"))
    }
}

/// The trained bitrate controller: the actor run in greedy mode on the
/// session state, whose `v` row carries the quality forecast.
#[derive(Debug, Clone)]
pub struct QarcAgent {
    pub policy: PolicyNet,
    pub mode: SelectMode,
    rng: SimRng,
}

impl QarcAgent {
    pub fn new(policy: PolicyNet) -> Self {
        QarcAgent {
            policy,
            mode: SelectMode::Greedy,
            rng: rng_from(0),
        }
    }

    pub fn load(cfg: NetConfig, path: &Path) -> Result<Self> {
        let mut policy = PolicyNet::new(cfg, 1e-4, 0)?;
        load_checkpoint(&mut policy.store, path)?;
        Ok(Self::new(policy))
    }
}

impl Controller for QarcAgent {
    fn name(&self) -> String {
        "qarc".into()
    }

    fn select(&mut self, obs: &Observation) -> usize {
        // States built by the session always match the network; a failure
        // here is a configuration bug, so fall back to the lowest bitrate.
        self.policy
            .probabilities(obs.state)
            .map(|p| super::choose_action(&p, self.mode, &mut self.rng))
            .unwrap_or(0)
    }
}

/// Runs `controller` over every episode.
pub fn evaluate(controller: &mut dyn Controller, episodes: &[Episode], cfg: SessionConfig) -> Result<Vec<Vec<Step>>> {
    episodes
        .iter()
        .map(|ep| run_session(controller, &ep.trace, &ep.quality, ep.predictions.clone(), cfg))
        .collect()
}
