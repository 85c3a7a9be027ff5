use rand::Rng;

use crate::error::{Error, Result};
use crate::seed::rng_from;
use crate::tensor::{softmax, AdamConfig, Bound, Conv1d, Dense, Gru, ParamStore, Tape, Var};

use super::{ActionSpace, AgentState, DEFAULT_HISTORY};

/// How the k-slot history rows are encoded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Backbone {
    /// One 1-D conv bank per history row.
    Conv1d,
    /// One dense layer per history row.
    Dense,
    /// A GRU over time with the five row values as each step's input.
    Gru,
}

impl Backbone {
    pub const ALL: [Backbone; 3] = [Backbone::Conv1d, Backbone::Dense, Backbone::Gru];

    pub fn name(self) -> &'static str {
        match self {
            Backbone::Conv1d => "conv1d",
            Backbone::Dense => "dense",
            Backbone::Gru => "gru",
        }
    }
}

impl std::str::FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv1d" | "cnn" => Ok(Backbone::Conv1d),
            "dense" | "fnn" => Ok(Backbone::Dense),
            "gru" => Ok(Backbone::Gru),
            _ => Err(Error::invalid(format!("unknown backbone {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetConfig {
    pub backbone: Backbone,
    /// History length `k`.
    pub history: usize,
    /// Channels per history-row encoder.
    pub filters: usize,
    /// Width of the merge layer.
    pub merge: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            backbone: Backbone::Conv1d,
            history: DEFAULT_HISTORY,
            filters: 64,
            merge: 128,
        }
    }
}

const KERNEL: usize = 4;

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.history == 0 || self.filters == 0 || self.merge == 0 {
            return Err(Error::invalid("history, filters and merge width must be positive"));
        }
        Ok(())
    }

    fn kernel(&self) -> usize {
        KERNEL.min(self.history)
    }
}

#[derive(Debug, Clone)]
enum RowEncoder {
    Conv(Vec<Conv1d>),
    Dense(Vec<Dense>),
    Gru(Gru),
}

/// Shared trunk of the policy and value networks: per-row history
/// encoders, dense embeddings of the prediction `v` and FFT features `f`,
/// a merge layer, then an output head.
#[derive(Debug, Clone)]
struct Trunk {
    cfg: NetConfig,
    rows: RowEncoder,
    v_embed: Dense,
    f_embed: Dense,
    merge: Dense,
    head: Dense,
}

impl Trunk {
    fn new<R: Rng>(cfg: NetConfig, outputs: usize, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (k, c) = (cfg.history, cfg.filters);
        let (rows, row_width) = match cfg.backbone {
            Backbone::Conv1d => {
                let layers = (0..5)
                    .map(|i| Conv1d::new(store, &format!("row{i}.conv"), cfg.kernel(), 1, c, 1, rng))
                    .collect::<Result<Vec<_>>>()?;
                (RowEncoder::Conv(layers), 5 * (k - cfg.kernel() + 1) * c)
            }
            Backbone::Dense => {
                let layers = (0..5)
                    .map(|i| Dense::new(store, &format!("row{i}.dense"), k, c, rng))
                    .collect::<Result<Vec<_>>>()?;
                (RowEncoder::Dense(layers), 5 * c)
            }
            Backbone::Gru => (RowEncoder::Gru(Gru::new(store, "rows.gru", 5, c, rng)?), c),
        };
        let v_embed = Dense::new(store, "v.dense", ActionSpace::SIZE, c, rng)?;
        let f_embed = Dense::new(store, "f.dense", k / 2 + 1, c, rng)?;
        let merge = Dense::new(store, "merge", row_width + 2 * c, cfg.merge, rng)?;
        let head = Dense::new(store, "head", cfg.merge, outputs, rng)?;
        Ok(Trunk {
            cfg,
            rows,
            v_embed,
            f_embed,
            merge,
            head,
        })
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, state: &AgentState) -> Result<Var> {
        state.validate()?;
        let k = self.cfg.history;
        if state.k() != k {
            return Err(Error::shape("agent_net", format!("state has k = {}, network expects {k}", state.k())));
        }
        let mut parts = Vec::with_capacity(7);
        match &self.rows {
            RowEncoder::Conv(layers) => {
                for (layer, row) in layers.iter().zip(state.rows()) {
                    let x = tape.constant_vec(row.to_vec());
                    let x = tape.reshape(x, vec![k, 1])?;
                    let h = layer.forward(tape, p, x)?;
                    let h = tape.relu(h);
                    parts.push(tape.flatten(h));
                }
            }
            RowEncoder::Dense(layers) => {
                for (layer, row) in layers.iter().zip(state.rows()) {
                    let x = tape.constant_vec(row.to_vec());
                    let h = layer.forward(tape, p, x)?;
                    parts.push(tape.relu(h));
                }
            }
            RowEncoder::Gru(gru) => {
                let rows = state.rows();
                let mut h = gru.zero_state(tape);
                for t in 0..k {
                    let x = tape.constant_vec(rows.iter().map(|r| r[t]).collect());
                    h = gru.step(tape, p, x, h)?;
                }
                parts.push(h);
            }
        }
        let v = tape.constant_vec(state.v.clone());
        let v = self.v_embed.forward(tape, p, v)?;
        parts.push(tape.relu(v));
        let f = tape.constant_vec(state.f.clone());
        let f = self.f_embed.forward(tape, p, f)?;
        parts.push(tape.relu(f));
        let x = tape.concat(&parts)?;
        let h = self.merge.forward(tape, p, x)?;
        let h = tape.relu(h);
        self.head.forward(tape, p, h)
    }
}

/// Actor: maps a state to logits over the five bitrates.
#[derive(Debug, Clone)]
pub struct PolicyNet {
    trunk: Trunk,
    pub store: ParamStore,
}

/// Critic: maps a state to a scalar value estimate.
#[derive(Debug, Clone)]
pub struct ValueNet {
    trunk: Trunk,
    pub store: ParamStore,
    output_scale: f64,
}

impl PolicyNet {
    pub fn new(cfg: NetConfig, lr: f64, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new(AdamConfig::with_lr(lr));
        let trunk = Trunk::new(cfg, ActionSpace::SIZE, &mut store, &mut rng_from(seed))?;
        Ok(PolicyNet { trunk, store })
    }

    pub fn config(&self) -> NetConfig {
        self.trunk.cfg
    }

    /// Logits (pre-softmax) on `tape`.
    pub fn logits(&self, tape: &mut Tape, p: &Bound, state: &AgentState) -> Result<Var> {
        self.trunk.forward(tape, p, state)
    }

    pub fn probabilities(&self, state: &AgentState) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let logits = self.logits(&mut tape, &p, state)?;
        softmax(tape.value(logits))
    }
}

impl ValueNet {
    pub fn new(cfg: NetConfig, lr: f64, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new(AdamConfig::with_lr(lr));
        let trunk = Trunk::new(cfg, 1, &mut store, &mut rng_from(seed))?;
        Ok(ValueNet {
            trunk,
            store,
            output_scale: 1.0,
        })
    }

    /// Multiplies the head output by `scale`. Returns are sums over a
    /// horizon of about 1/(1−γ) rewards; scaling by that horizon lets the
    /// weights work in per-step reward units, which Adam's step size
    /// reaches quickly.
    pub fn with_output_scale(mut self, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::invalid("value output scale must be positive and finite"));
        }
        self.output_scale = scale;
        Ok(self)
    }

    pub fn output_scale(&self) -> f64 {
        self.output_scale
    }

    pub fn config(&self) -> NetConfig {
        self.trunk.cfg
    }

    /// Scalar value estimate on `tape`.
    pub fn estimate(&self, tape: &mut Tape, p: &Bound, state: &AgentState) -> Result<Var> {
        let v = self.trunk.forward(tape, p, state)?;
        Ok(tape.scale(v, self.output_scale))
    }

    pub fn value(&self, state: &AgentState) -> Result<f64> {
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let v = self.estimate(&mut tape, &p, state)?;
        Ok(tape.scalar(v))
    }
}
