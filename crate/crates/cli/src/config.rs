use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use qarc_core::netsim::{SessionConfig, SimConfig};
use qarc_core::qoe::QoeWeights;
use qarc_core::vqpn::{TrainConfig, VqpnConfig, VqpnMode};
use qarc_core::vqrl::{Backbone, NetConfig, TrainerConfig};

/// Every knob of every command. Missing keys take the defaults below;
/// command-line flags override the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Threads for asynchronous training.
    pub workers: usize,
    /// QoE weight preset; `[qoe]` entries override single weights.
    pub preset: String,
    /// Comma-separated controllers for `eval`: qarc, fixed:<idx>, loss,
    /// delay, offline-optimal, or `all`.
    pub policy: String,
    pub paths: PathsSection,
    pub qoe: QoeSection,
    pub sim: SimSection,
    pub data: DataSection,
    pub vqpn: VqpnSection,
    pub vqrl: VqrlSection,
    pub sweep: SweepSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            out: PathBuf::from("out"),
            workers: 8,
            preset: "baseline-qoe".into(),
            policy: "all".into(),
            paths: PathsSection::default(),
            qoe: QoeSection::default(),
            sim: SimSection::default(),
            data: DataSection::default(),
            vqpn: VqpnSection::default(),
            vqrl: VqrlSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

/// Input locations; unset entries resolve under `out`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    /// Root of the generated corpora (`traces/`, `quality/`, `content/`, `frames/`).
    pub data: Option<PathBuf>,
    /// Quality-predictor checkpoint, written by `train-vqpn` and read by
    /// `train-vqrl`, `eval` and `sweep`.
    pub vqpn: Option<PathBuf>,
    /// Actor checkpoint, written by `train-vqrl` and read by `eval`.
    pub policy: Option<PathBuf>,
    /// Checkpoint `train-vqpn` starts from instead of a fresh model.
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QoeSection {
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    pub slot: f64,
    pub packet_size: usize,
    /// Fixed queue size in packets; unset sizes it to half a second.
    pub queue_capacity: Option<usize>,
    pub history: usize,
    pub warmup: usize,
}

impl Default for SimSection {
    fn default() -> Self {
        let s = SessionConfig::default();
        SimSection {
            slot: s.sim.slot,
            packet_size: s.sim.packet_size,
            queue_capacity: s.sim.queue_capacity,
            history: s.history_len,
            warmup: s.warmup,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub train_traces: usize,
    pub eval_traces: usize,
    pub trace_slots: usize,
    /// Markov state means in Mbps.
    pub states: Vec<f64>,
    pub switch_prob: f64,
    pub noise_std: f64,
    /// Quality series per content profile for the predictor corpus.
    pub series_per_profile: usize,
    pub series_slots: usize,
    /// Also write frame clips (needed by frame-mode prediction).
    pub frames: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            train_traces: 40,
            eval_traces: 20,
            trace_slots: 100,
            states: vec![0.4, 0.75, 1.1, 1.5],
            switch_prob: 0.1,
            noise_std: 0.05,
            series_per_profile: 50,
            series_slots: 100,
            frames: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VqpnSection {
    pub mode: Mode,
    pub filters: usize,
    pub hidden: usize,
    pub lr: f64,
    pub lambda: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Fractions of each profile's series used for training and validation;
    /// the rest is the test set.
    pub train_fraction: f64,
    pub val_fraction: f64,
}

impl Default for VqpnSection {
    fn default() -> Self {
        let (m, t) = (VqpnConfig::default(), TrainConfig::default());
        VqpnSection {
            mode: Mode::Curves,
            filters: m.filters,
            hidden: m.hidden,
            lr: t.lr,
            lambda: t.lambda,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            train_fraction: 0.8,
            val_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Curves,
    Frames,
}

impl From<Mode> for VqpnMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Curves => VqpnMode::Curves,
            Mode::Frames => VqpnMode::Frames,
        }
    }
}

/// Training environment of `train-vqrl`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Env {
    /// Generated traces paired with generated content.
    Corpus,
    /// One constant 2 Mbps trace whose content makes the top bitrate the
    /// unique best action.
    Sanity,
}

/// Quality forecast the agent sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Forecast {
    /// The trained quality predictor.
    Vqpn,
    /// The previous slot's true curve.
    Persistence,
    /// The true curve of the slot itself.
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VqrlSection {
    pub env: Env,
    pub forecast: Forecast,
    pub backbone: BackboneName,
    pub filters: usize,
    pub merge: usize,
    pub gamma: f64,
    pub beta_start: f64,
    pub beta_end: f64,
    pub n_step: usize,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub iterations: usize,
}

impl Default for VqrlSection {
    fn default() -> Self {
        let t = TrainerConfig::default();
        VqrlSection {
            env: Env::Corpus,
            forecast: Forecast::Vqpn,
            backbone: BackboneName::Conv1d,
            filters: t.net.filters,
            merge: t.net.merge,
            gamma: t.gamma,
            beta_start: t.beta_start,
            beta_end: t.beta_end,
            n_step: t.n_step,
            lr_actor: t.lr_actor,
            lr_critic: t.lr_critic,
            iterations: t.iterations,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneName {
    Conv1d,
    Dense,
    Gru,
}

impl From<BackboneName> for Backbone {
    fn from(b: BackboneName) -> Self {
        match b {
            BackboneName::Conv1d => Backbone::Conv1d,
            BackboneName::Dense => Backbone::Dense,
            BackboneName::Gru => Backbone::Gru,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// (filters, hidden) rows of the predictor grid.
    pub vqpn_rows: Vec<[usize; 2]>,
    /// Learning-rate columns of the predictor grid.
    pub vqpn_lrs: Vec<f64>,
    /// (history length, filters) pairs of the agent sweep.
    pub vqrl_pairs: Vec<[usize; 2]>,
    pub vqrl_backbones: Vec<BackboneName>,
    /// Training iterations per agent-sweep cell.
    pub vqrl_iterations: usize,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            vqpn_rows: vec![[32, 32], [32, 128], [64, 64], [64, 128], [128, 64], [128, 128]],
            vqpn_lrs: vec![1e-3, 1e-4, 1e-5, 6e-6],
            vqrl_pairs: vec![[5, 64], [10, 64], [10, 128], [20, 128]],
            vqrl_backbones: vec![BackboneName::Conv1d],
            vqrl_iterations: 1000,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            bail!("workers must be positive");
        }
        self.weights()?;
        self.session(0)?.sim.validate()?;
        self.trainer()?.validate()?;
        self.vqpn_train().validate()?;
        let d = &self.data;
        if d.trace_slots == 0 || d.series_slots == 0 {
            bail!("trace_slots and series_slots must be positive");
        }
        let v = &self.vqpn;
        if !(v.train_fraction > 0.0 && v.val_fraction > 0.0 && v.train_fraction + v.val_fraction < 1.0) {
            bail!("train_fraction and val_fraction must be positive and leave room for a test set");
        }
        Ok(())
    }

    pub fn weights(&self) -> Result<QoeWeights> {
        let mut w = QoeWeights::preset(&self.preset)?;
        w.alpha = self.qoe.alpha.unwrap_or(w.alpha);
        w.beta = self.qoe.beta.unwrap_or(w.beta);
        w.gamma = self.qoe.gamma.unwrap_or(w.gamma);
        w.validate()?;
        Ok(w)
    }

    /// Session settings with the simulator seeded by `sim_seed`.
    pub fn session(&self, sim_seed: u64) -> Result<SessionConfig> {
        Ok(SessionConfig {
            sim: SimConfig {
                slot: self.sim.slot,
                packet_size: self.sim.packet_size,
                queue_capacity: self.sim.queue_capacity,
                seed: sim_seed,
            },
            weights: self.weights()?,
            history_len: self.sim.history,
            warmup: self.sim.warmup,
        })
    }

    pub fn net(&self) -> NetConfig {
        NetConfig {
            backbone: self.vqrl.backbone.into(),
            history: self.sim.history,
            filters: self.vqrl.filters,
            merge: self.vqrl.merge,
        }
    }

    pub fn trainer(&self) -> Result<TrainerConfig> {
        let v = &self.vqrl;
        Ok(TrainerConfig {
            gamma: v.gamma,
            beta_start: v.beta_start,
            beta_end: v.beta_end,
            n_step: v.n_step,
            lr_actor: v.lr_actor,
            lr_critic: v.lr_critic,
            workers: self.workers,
            iterations: v.iterations,
            seed: self.seed,
            net: self.net(),
            session: self.session(0)?,
        })
    }

    pub fn vqpn_model(&self) -> VqpnConfig {
        VqpnConfig {
            mode: self.vqpn.mode.into(),
            filters: self.vqpn.filters,
            hidden: self.vqpn.hidden,
            seed: qarc_core::seed::derive_seed(self.seed, "vqpn-init"),
        }
    }

    pub fn vqpn_train(&self) -> TrainConfig {
        let v = &self.vqpn;
        TrainConfig {
            lambda: v.lambda,
            lr: v.lr,
            patience: v.patience,
            batch_size: v.batch_size,
            max_epochs: v.max_epochs,
            seed: qarc_core::seed::derive_seed(self.seed, "vqpn-train"),
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.paths.data.clone().unwrap_or_else(|| self.out.clone())
    }

    pub fn vqpn_path(&self) -> PathBuf {
        self.paths.vqpn.clone().unwrap_or_else(|| self.out.join("vqpn.qarc"))
    }

    pub fn policy_path(&self) -> PathBuf {
        self.paths.policy.clone().unwrap_or_else(|| self.out.join("policy.qarc"))
    }
}
