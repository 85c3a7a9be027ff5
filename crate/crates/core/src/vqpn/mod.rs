//! Next-slot quality prediction for every candidate bitrate.
//!
//! Frame mode runs each of the 25 most recent frames (5 slots × 5 frames)
//! through a small conv feature extractor and feeds the per-frame features
//! to a two-layer GRU. Curve mode skips the pixels and feeds the past five
//! per-slot quality vectors instead.

mod train;

pub use train::{
    dataset_from_series, mean_mse, model_smape, persistence_smape, predict_series, smape, sweep_hyperparams, train, write_sweep_csv,
    QualitySample, SweepCell, SweepRow, TrainConfig, TrainReport, ValidationRecord, SWEEP_HEADER, TRAIN_LOG_HEADER,
};

use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::seed::rng_from;
use crate::tensor::{load_checkpoint, save_checkpoint, AdamConfig, Bound, Conv2d, Dense, Gru, ParamStore, Tape, Var};
use crate::trace::{FrameClip, QualityVector, FRAMES_PER_SLOT, FRAME_CHANNELS, FRAME_HEIGHT, FRAME_WIDTH};

/// Past slots the predictor looks at.
pub const PAST_SLOTS: usize = 5;
/// Frames in one frame-mode window.
pub const WINDOW_FRAMES: usize = PAST_SLOTS * FRAMES_PER_SLOT;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VqpnMode {
    Frames,
    Curves,
}

impl std::str::FromStr for VqpnMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "frames" => Ok(VqpnMode::Frames),
            "curves" => Ok(VqpnMode::Curves),
            _ => Err(Error::invalid(format!("unknown VQPN mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VqpnConfig {
    pub mode: VqpnMode,
    /// Conv filters (frame mode) or input embedding width (curve mode).
    pub filters: usize,
    /// GRU hidden units.
    pub hidden: usize,
    pub seed: u64,
}

impl Default for VqpnConfig {
    fn default() -> Self {
        VqpnConfig {
            mode: VqpnMode::Curves,
            filters: 64,
            hidden: 64,
            seed: 0,
        }
    }
}

/// One prediction window.
#[derive(Debug, Clone, PartialEq)]
pub enum QualityInput {
    /// The 25 frames of `clip` starting at frame `first`.
    Frames { clip: Arc<FrameClip>, first: usize },
    /// The past five per-slot quality vectors, oldest first.
    Curves(Vec<QualityVector>),
}

impl QualityInput {
    /// Window over 25 explicit frames, each row-major `[64, 36, 3]` in `[0, 1]`.
    pub fn from_frames(frames: &[Vec<f64>]) -> Result<Self> {
        Ok(QualityInput::Frames {
            clip: Arc::new(FrameClip::from_frames(frames)?),
            first: 0,
        })
    }
}

#[derive(Debug, Clone)]
enum Extractor {
    Frames { conv1: Conv2d, conv2: Conv2d, fc1: Dense, fc2: Dense },
    Curves { embed: Dense },
}

#[derive(Debug, Clone)]
pub struct VqpnModel {
    pub cfg: VqpnConfig,
    pub store: ParamStore,
    extractor: Extractor,
    gru1: Gru,
    gru2: Gru,
    head: Dense,
}

const FEATURE_DIM: usize = 128;
const FRAME_HIDDEN: usize = 64;

impl VqpnModel {
    pub fn new(cfg: VqpnConfig) -> Result<Self> {
        if cfg.filters == 0 || cfg.hidden == 0 {
            return Err(Error::invalid("filters and hidden units must be positive"));
        }
        let mut rng = rng_from(cfg.seed);
        let mut store = ParamStore::new(AdamConfig::with_lr(1e-4));
        let f = cfg.filters;
        let (extractor, step_dim) = match cfg.mode {
            VqpnMode::Frames => {
                let conv1 = Conv2d::new(&mut store, "conv1", (5, 5), FRAME_CHANNELS, f, 1, &mut rng)?;
                let conv2 = Conv2d::new(&mut store, "conv2", (3, 3), f, f, 1, &mut rng)?;
                let fc1 = Dense::new(&mut store, "fc1", flat_features(f), FEATURE_DIM, &mut rng)?;
                let fc2 = Dense::new(&mut store, "fc2", FEATURE_DIM, FRAME_HIDDEN, &mut rng)?;
                (Extractor::Frames { conv1, conv2, fc1, fc2 }, FRAME_HIDDEN)
            }
            VqpnMode::Curves => (
                Extractor::Curves {
                    embed: Dense::new(&mut store, "embed", 5, f, &mut rng)?,
                },
                f,
            ),
        };
        let gru1 = Gru::new(&mut store, "gru1", step_dim, cfg.hidden, &mut rng)?;
        let gru2 = Gru::new(&mut store, "gru2", cfg.hidden, cfg.hidden, &mut rng)?;
        let head = Dense::new(&mut store, "head", cfg.hidden, 5, &mut rng)?;
        Ok(VqpnModel {
            cfg,
            store,
            extractor,
            gru1,
            gru2,
            head,
        })
    }

    pub fn check_input(&self, input: &QualityInput) -> Result<()> {
        match (self.cfg.mode, input) {
            (VqpnMode::Frames, QualityInput::Frames { clip, first }) => {
                if first + WINDOW_FRAMES > clip.len() {
                    return Err(Error::shape(
                        "vqpn",
                        format!("want {WINDOW_FRAMES} frames from {first}, clip has {}", clip.len()),
                    ));
                }
            }
            (VqpnMode::Curves, QualityInput::Curves(curves)) => {
                if curves.len() != PAST_SLOTS {
                    return Err(Error::shape("vqpn", format!("want {PAST_SLOTS} quality vectors, got {}", curves.len())));
                }
            }
            (mode, _) => return Err(Error::shape("vqpn", format!("input does not match {mode:?} mode"))),
        }
        Ok(())
    }

    /// Forward pass on `tape`; returns the sigmoid output.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, input: &QualityInput) -> Result<Var> {
        self.check_input(input)?;
        let steps: Vec<Var> = match (&self.extractor, input) {
            (Extractor::Frames { conv1, conv2, fc1, fc2 }, QualityInput::Frames { clip, first }) => (*first..first + WINDOW_FRAMES)
                .map(|i| {
                    let x = tape.constant_vec(clip.frame(i));
                    let x = tape.reshape(x, vec![FRAME_HEIGHT, FRAME_WIDTH, FRAME_CHANNELS])?;
                    let h = conv1.forward(tape, p, x)?;
                    let h = tape.relu(h);
                    let h = tape.avg_pool2d(h, (3, 3), (3, 3))?;
                    let h = conv2.forward(tape, p, h)?;
                    let h = tape.relu(h);
                    let h = tape.max_pool2d(h, (2, 2), (2, 2))?;
                    let h = fc1.forward(tape, p, h)?;
                    let h = tape.relu(h);
                    let h = fc2.forward(tape, p, h)?;
                    Ok(tape.relu(h))
                })
                .collect::<Result<_>>()?,
            (Extractor::Curves { embed }, QualityInput::Curves(curves)) => curves
                .iter()
                .map(|v| {
                    let x = tape.constant_vec(v.to_vec());
                    let h = embed.forward(tape, p, x)?;
                    Ok(tape.relu(h))
                })
                .collect::<Result<_>>()?,
            _ => unreachable!("checked above"),
        };
        let mut h1 = self.gru1.zero_state(tape);
        let mut h2 = self.gru2.zero_state(tape);
        for x in steps {
            h1 = self.gru1.step(tape, p, x, h1)?;
            h2 = self.gru2.step(tape, p, h1, h2)?;
        }
        let out = self.head.forward(tape, p, h2)?;
        Ok(tape.sigmoid(out))
    }

    /// Predicted quality of the next slot for each candidate bitrate.
    pub fn predict(&self, input: &QualityInput) -> Result<QualityVector> {
        let mut tape = Tape::new();
        let p = self.store.bind_frozen(&mut tape);
        let y = self.forward(&mut tape, &p, input)?;
        let v = tape.value(y);
        Ok([v[0], v[1], v[2], v[3], v[4]])
    }

    pub fn head_ids(&self) -> (crate::tensor::ParamId, crate::tensor::ParamId) {
        (self.head.w, self.head.b)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(&self.store, path)
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        load_checkpoint(&mut self.store, path)
    }
}

fn flat_features(filters: usize) -> usize {
    // 64x36 → conv5 → 60x32 → avg3/3 → 20x10 → conv3 → 18x8 → max2/2 → 9x4
    let (h, w) = (FRAME_HEIGHT - 4, FRAME_WIDTH - 4);
    let (h, w) = ((h - 3) / 3 + 1, (w - 3) / 3 + 1);
    let (h, w) = (h - 2, w - 2);
    let (h, w) = ((h - 2) / 2 + 1, (w - 2) / 2 + 1);
    h * w * filters
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Tensor};

    fn curves_input(seed: u64) -> QualityInput {
        QualityInput::Curves(
            (0..PAST_SLOTS)
                .map(|i| {
                    let a = 0.2 + 0.1 * ((seed + i as u64) % 5) as f64;
                    [a, a + 0.2, a + 0.35, a + 0.45, a + 0.5]
                })
                .collect(),
        )
    }

    #[test]
    fn zeroed_head_outputs_one_half() {
        for mode in [VqpnMode::Curves, VqpnMode::Frames] {
            let mut m = VqpnModel::new(VqpnConfig { mode, filters: 4, hidden: 8, seed: 1 }).unwrap();
            let (w, b) = m.head_ids();
            m.store.get_mut(w).tensor.values_mut().fill(0.0);
            m.store.get_mut(b).tensor.values_mut().fill(0.0);
            let input = match mode {
                VqpnMode::Curves => curves_input(0),
                VqpnMode::Frames => QualityInput::from_frames(&vec![vec![0.3; FRAME_HEIGHT * FRAME_WIDTH * FRAME_CHANNELS]; WINDOW_FRAMES]).unwrap(),
            };
            assert_eq!(m.predict(&input).unwrap(), [0.5; 5]);
        }
    }

    #[test]
    fn frame_feature_size() {
        assert_eq!(flat_features(64), 9 * 4 * 64);
    }

    #[test]
    fn deterministic_and_bounded() {
        let m = VqpnModel::new(VqpnConfig::default()).unwrap();
        let a = m.predict(&curves_input(3)).unwrap();
        assert_eq!(a, m.predict(&curves_input(3)).unwrap());
        assert!(a.iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn rejects_wrong_shapes_and_modes() {
        let m = VqpnModel::new(VqpnConfig::default()).unwrap();
        assert!(m.predict(&QualityInput::Curves(vec![[0.5; 5]; 4])).is_err());
        assert!(QualityInput::from_frames(&vec![vec![0.0; 10]; 25]).is_err());
        let f = VqpnModel::new(VqpnConfig { mode: VqpnMode::Frames, filters: 2, hidden: 4, seed: 0 }).unwrap();
        assert!(f.predict(&curves_input(0)).is_err());
        let short = QualityInput::from_frames(&vec![vec![0.0; FRAME_HEIGHT * FRAME_WIDTH * FRAME_CHANNELS]; 24]).unwrap();
        assert!(f.predict(&short).is_err());
        assert!(m.predict(&short).is_err());
    }

    #[test]
    fn loss_gradient_wrt_head_matches_finite_differences() {
        let m = VqpnModel::new(VqpnConfig { filters: 6, hidden: 5, ..VqpnConfig::default() }).unwrap();
        let (w, b) = m.head_ids();
        let leaves = [m.store.get(w).tensor.clone(), m.store.get(b).tensor.clone()];
        let input = curves_input(1);
        let target = [0.3, 0.5, 0.7, 0.8, 0.85];
        let lambda = 1e-2;
        let err = grad_check(
            &leaves,
            |t, v| {
                let mut vars = m.store.bind_frozen(t).vars().to_vec();
                vars[w.0] = v[0];
                vars[b.0] = v[1];
                let p = Bound::from_vars(vars);
                let y = m.forward(t, &p, &input)?;
                let tgt = t.constant(&Tensor::from_vec(target.to_vec()));
                let mse = t.mse(y, tgt)?;
                let r0 = t.sum_squares(v[0]);
                let r1 = t.sum_squares(v[1]);
                let r = t.add(r0, r1)?;
                let r = t.scale(r, lambda);
                t.add(mse, r)
            },
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
