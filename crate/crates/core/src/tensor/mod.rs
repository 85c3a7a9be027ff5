//! A small reverse-mode differentiation engine.
//!
//! Values live on a [`Tape`]; every op records itself so that
//! [`Tape::backward`] can push gradients back to the leaves. Trainable
//! weights are kept in a [`ParamStore`] and bound onto a tape for each
//! forward pass. Only the shapes the quality predictor, the bitrate agent
//! and the bandwidth probe need are supported: there is no broadcasting.

mod checkpoint;
mod gradcheck;
mod layers;
mod params;
mod tape;

pub use checkpoint::{load_checkpoint, read_tensors, save_checkpoint, write_tensors, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, relative_error};
pub use layers::{Conv1d, Conv2d, Dense, Gru};
pub use params::{AdamConfig, AdamState, Bound, ParamId, ParamStore, Parameter};
pub use tape::{Tape, Var};

use crate::error::{Error, Result};

/// Dense row-major array with a gradient buffer of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", format!("zero dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", values.len()),
            ));
        }
        Ok(Tensor {
            grad: vec![0.0; n],
            shape,
            values,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            values: vec![0.0; n],
            grad: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.values.fill(value);
        t
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        let n = values.len().max(1);
        let values = if values.is_empty() { vec![0.0] } else { values };
        Tensor {
            shape: vec![n],
            grad: vec![0.0; n],
            values,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut [f64] {
        &mut self.grad
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn sum_squares(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }
}

/// Numerically stable softmax of a logit vector.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::invalid("softmax of empty vector"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "softmax" });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(probs: &[f64]) -> Result<f64> {
    if let Some(p) = probs.iter().find(|p| !(**p >= 0.0) || !p.is_finite()) {
        return Err(Error::invalid(format!("entropy: invalid probability {p}")));
    }
    Ok(-probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>())
}
