use std::io::Write;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::seed::{derive_indexed, rng_from};
use crate::tensor::{Tape, Tensor, Var};
use crate::trace::{FrameClip, QualityCurveSeries, QualityVector, FRAMES_PER_SLOT};

use super::{QualityInput, VqpnConfig, VqpnMode, VqpnModel, PAST_SLOTS};

/// One supervised example: the past five slots of evidence and the next
/// slot's quality vector.
#[derive(Debug, Clone, PartialEq)]
pub struct QualitySample {
    pub input: QualityInput,
    pub target: QualityVector,
    /// Quality of the most recent input slot, for the persistence baseline.
    pub last: QualityVector,
}

/// Builds one sample per slot `t >= 5`: evidence from slots `t-5..t`,
/// target the quality of slot `t`.
pub fn dataset_from_series(series: &QualityCurveSeries, clip: Option<&Arc<FrameClip>>, mode: VqpnMode) -> Result<Vec<QualitySample>> {
    let slots = series.slots();
    if mode == VqpnMode::Frames {
        let clip = clip.ok_or_else(|| Error::invalid("frame mode needs a frame clip"))?;
        if clip.slots() < slots.len() {
            return Err(Error::invalid(format!("clip covers {} slots, series has {}", clip.slots(), slots.len())));
        }
    }
    (PAST_SLOTS..slots.len())
        .map(|t| {
            let input = match mode {
                VqpnMode::Curves => QualityInput::Curves(slots[t - PAST_SLOTS..t].to_vec()),
                VqpnMode::Frames => QualityInput::Frames {
                    clip: Arc::clone(clip.expect("checked above")),
                    first: (t - PAST_SLOTS) * FRAMES_PER_SLOT,
                },
            };
            let target = slots[t];
            if target.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::invalid(format!("slot {t} target outside [0, 1]")));
            }
            Ok(QualitySample {
                input,
                target,
                last: slots[t - 1],
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    /// Weight of the `Σθ²` penalty.
    pub lambda: f64,
    pub lr: f64,
    /// Evaluations without validation improvement before stopping.
    pub patience: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Shuffling seed.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 1e-6,
            lr: 1e-4,
            patience: 5,
            batch_size: 8,
            max_epochs: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) || !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lambda must be >= 0 and lr > 0"));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::invalid("batch_size and max_epochs must be positive"));
        }
        Ok(())
    }
}

/// One evaluation round, after an epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationRecord {
    pub epoch: usize,
    /// Full training objective: mean MSE plus the weight penalty.
    pub train_loss: f64,
    /// Mean validation MSE.
    pub val_loss: f64,
    pub param_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub initial_train_loss: f64,
    pub initial_val_loss: f64,
    pub records: Vec<ValidationRecord>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

pub const TRAIN_LOG_HEADER: [&str; 4] = ["epoch", "train_loss", "val_loss", "param_norm"];

impl TrainReport {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(TRAIN_LOG_HEADER)?;
        for r in &self.records {
            wtr.write_record(&[r.epoch.to_string(), r.train_loss.to_string(), r.val_loss.to_string(), r.param_norm.to_string()])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

fn sample_loss(model: &VqpnModel, tape: &mut Tape, p: &crate::tensor::Bound, s: &QualitySample) -> Result<Var> {
    let y = model.forward(tape, p, &s.input)?;
    let t = tape.constant(&Tensor::from_vec(s.target.to_vec()));
    tape.mse(y, t)
}

/// Mean per-sample MSE under the current parameters.
pub fn mean_mse(model: &VqpnModel, samples: &[QualitySample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("no samples"));
    }
    let mut total = 0.0;
    for s in samples {
        let mut tape = Tape::new();
        let p = model.store.bind_frozen(&mut tape);
        let l = sample_loss(model, &mut tape, &p, s)?;
        total += tape.scalar(l);
    }
    Ok(total / samples.len() as f64)
}

fn objective(model: &VqpnModel, samples: &[QualitySample], lambda: f64) -> Result<f64> {
    Ok(mean_mse(model, samples)? + lambda * model.store.sum_squares())
}

/// Minibatch Adam on mean MSE + `λ·Σθ²` with early stopping on validation
/// MSE. Leaves the model at its best-validation parameters.
pub fn train(model: &mut VqpnModel, train: &[QualitySample], val: &[QualitySample], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("train and validation sets must be non-empty"));
    }
    for s in train.iter().chain(val) {
        model.check_input(&s.input)?;
    }
    model.store.set_lr(cfg.lr);
    let mut rng = rng_from(cfg.seed);
    let initial_train_loss = objective(model, train, cfg.lambda)?;
    let initial_val_loss = mean_mse(model, val)?;
    let mut best = (initial_val_loss, 0usize, model.store.values());
    let mut since_best = 0;
    let mut records = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            model.store.zero_grad();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let mut tape = Tape::new();
                let p = model.store.bind(&mut tape);
                let l = sample_loss(model, &mut tape, &p, &train[i])?;
                let l = tape.scale(l, scale);
                tape.backward(l)?;
                model.store.accumulate(&tape, &p);
            }
            let mut grads = model.store.grads();
            for (g, v) in grads.iter_mut().zip(model.store.values()) {
                for (gi, vi) in g.iter_mut().zip(v) {
                    *gi += 2.0 * cfg.lambda * vi;
                }
            }
            model.store.apply_grads(&grads)?;
        }
        let record = ValidationRecord {
            epoch,
            train_loss: objective(model, train, cfg.lambda)?,
            val_loss: mean_mse(model, val)?,
            param_norm: model.store.sum_squares().sqrt(),
        };
        if !record.val_loss.is_finite() {
            return Err(Error::NonFinite { op: "vqpn validation loss" });
        }
        records.push(record);
        if record.val_loss < best.0 {
            best = (record.val_loss, epoch, model.store.values());
            since_best = 0;
        } else {
            since_best += 1;
        }
        if since_best >= cfg.patience {
            break;
        }
    }
    model.store.set_values(&best.2)?;
    Ok(TrainReport {
        initial_train_loss,
        initial_val_loss,
        records,
        best_epoch: best.1,
        best_val_loss: best.0,
    })
}

/// Symmetric mean absolute percentage error, in percent. A term with
/// forecast and actual both zero counts as zero error.
pub fn smape(forecast: &[f64], actual: &[f64]) -> Result<f64> {
    if forecast.len() != actual.len() {
        return Err(Error::shape("smape", format!("{} forecasts for {} actuals", forecast.len(), actual.len())));
    }
    if forecast.is_empty() {
        return Err(Error::invalid("smape of an empty sequence"));
    }
    let mut total = 0.0;
    for (&f, &a) in forecast.iter().zip(actual) {
        if !f.is_finite() || !a.is_finite() {
            return Err(Error::NonFinite { op: "smape" });
        }
        let denom = (a.abs() + f.abs()) / 2.0;
        if denom == 0.0 {
            continue;
        }
        total += (f - a).abs() / denom;
    }
    Ok(100.0 * total / forecast.len() as f64)
}

fn flatten(v: &[QualityVector]) -> Vec<f64> {
    v.iter().flatten().copied().collect()
}

/// SMAPE of the model's forecasts over `samples`.
pub fn model_smape(model: &VqpnModel, samples: &[QualitySample]) -> Result<f64> {
    let preds = samples.iter().map(|s| model.predict(&s.input)).collect::<Result<Vec<_>>>()?;
    let actual: Vec<QualityVector> = samples.iter().map(|s| s.target).collect();
    smape(&flatten(&preds), &flatten(&actual))
}

/// SMAPE of predicting each slot's quality with the previous slot's.
pub fn persistence_smape(samples: &[QualitySample]) -> Result<f64> {
    let last: Vec<QualityVector> = samples.iter().map(|s| s.last).collect();
    let actual: Vec<QualityVector> = samples.iter().map(|s| s.target).collect();
    smape(&flatten(&last), &flatten(&actual))
}

/// Forecast for every slot of `series`: the model once five slots of
/// evidence exist, the previous slot's quality before that.
pub fn predict_series(model: &VqpnModel, series: &QualityCurveSeries, clip: Option<&Arc<FrameClip>>) -> Result<Vec<QualityVector>> {
    let slots = series.slots();
    let mut out: Vec<QualityVector> = slots.iter().take(PAST_SLOTS).enumerate().map(|(n, _)| slots[n.saturating_sub(1)]).collect();
    if slots.len() > PAST_SLOTS {
        let samples = dataset_from_series(series, clip, model.cfg.mode)?;
        let preds = samples.par_iter().map(|s| model.predict(&s.input)).collect::<Result<Vec<_>>>()?;
        out.extend(preds);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepCell {
    pub filters: usize,
    pub hidden: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub filters: usize,
    pub hidden: usize,
    pub lr: f64,
    pub smape_pct: f64,
    pub seed: u64,
}

pub const SWEEP_HEADER: [&str; 5] = ["filters", "hidden", "lr", "smape_pct", "seed"];

/// Trains one model per grid cell (cells in parallel, each with its own
/// derived seed) and reports held-out SMAPE on `test`.
pub fn sweep_hyperparams(
    cells: &[SweepCell],
    base: VqpnConfig,
    train_cfg: &TrainConfig,
    train_set: &[QualitySample],
    val: &[QualitySample],
    test: &[QualitySample],
) -> Result<Vec<SweepRow>> {
    cells
        .par_iter()
        .enumerate()
        .map(|(i, cell)| {
            let seed = derive_indexed(base.seed, "vqpn-sweep", i as u64);
            let mut model = VqpnModel::new(VqpnConfig {
                filters: cell.filters,
                hidden: cell.hidden,
                seed,
                ..base
            })?;
            let cfg = TrainConfig { lr: cell.lr, seed, ..*train_cfg };
            train(&mut model, train_set, val, &cfg)?;
            Ok(SweepRow {
                filters: cell.filters,
                hidden: cell.hidden,
                lr: cell.lr,
                smape_pct: model_smape(&model, test)?,
                seed,
            })
        })
        .collect()
}

pub fn write_sweep_csv<W: Write>(w: W, rows: &[SweepRow]) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(SWEEP_HEADER)?;
    for r in rows {
        wtr.write_record(&[r.filters.to_string(), r.hidden.to_string(), r.lr.to_string(), r.smape_pct.to_string(), r.seed.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}
