use std::ops::Index;

use rand::Rng;

use crate::error::{Error, Result};

use super::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Default::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moment estimates for one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(len: usize, cfg: AdamConfig) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step_count: 0,
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
        }
    }

    /// One bias-corrected Adam update of `values` given `grad`.
    pub fn update(&mut self, values: &mut [f64], grad: &[f64]) -> Result<()> {
        if grad.len() != values.len() || self.m.len() != values.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} values, {} grads", values.len(), grad.len()),
            ));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for i in 0..values.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            values[i] -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub adam: AdamState,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor, cfg: AdamConfig) -> Self {
        let adam = AdamState::new(tensor.len(), cfg);
        Parameter {
            name: name.into(),
            tensor,
            adam,
        }
    }

    /// Applies one Adam step with an explicit gradient.
    pub fn adam_step(&mut self, grad: &[f64]) -> Result<()> {
        let Parameter { tensor, adam, .. } = self;
        adam.update(tensor.values_mut(), grad)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Parameters bound to a particular tape, indexable by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Bound(pub(crate) Vec<Var>);

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

impl Bound {
    /// Wraps tape variables laid out in the same order as a store's parameters.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// The named parameters of one model, in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    adam: AdamConfig,
}

impl ParamStore {
    pub fn new(adam: AdamConfig) -> Self {
        ParamStore {
            params: Vec::new(),
            adam,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::invalid(format!("duplicate parameter name {name:?}")));
        }
        self.params.push(Parameter::new(name, tensor, self.adam));
        Ok(ParamId(self.params.len() - 1))
    }

    /// Glorot-uniform initialised weight: `±sqrt(6 / (fan_in + fan_out))`.
    pub fn add_glorot<R: Rng>(&mut self, name: impl Into<String>, shape: Vec<usize>, fan_in: usize, fan_out: usize, rng: &mut R) -> Result<ParamId> {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.add_uniform(name, shape, limit, rng)
    }

    pub fn add_uniform<R: Rng>(&mut self, name: impl Into<String>, shape: Vec<usize>, limit: f64, rng: &mut R) -> Result<ParamId> {
        let n = shape.iter().product();
        let values = (0..n).map(|_| rng.random_range(-limit..=limit)).collect();
        self.add(name, Tensor::new(shape, values)?)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: Vec<usize>) -> Result<ParamId> {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.adam.lr = lr;
        for p in &mut self.params {
            p.adam.lr = lr;
        }
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Copies every parameter onto `tape` as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(
            self.params
                .iter()
                .map(|p| tape.leaf_raw(p.tensor.shape(), p.tensor.values(), true))
                .collect(),
        )
    }

    /// Like [`ParamStore::bind`] but without gradient tracking.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        Bound(
            self.params
                .iter()
                .map(|p| tape.leaf_raw(p.tensor.shape(), p.tensor.values(), false))
                .collect(),
        )
    }

    /// Adds the tape's gradients for `bound` into each parameter's grad buffer.
    pub fn accumulate(&mut self, tape: &Tape, bound: &Bound) {
        for (p, v) in self.params.iter_mut().zip(bound.vars()) {
            for (d, g) in p.tensor.grad_mut().iter_mut().zip(tape.grad(*v)) {
                *d += g;
            }
        }
    }

    /// Current gradient buffers, one vector per parameter.
    pub fn grads(&self) -> Vec<Vec<f64>> {
        self.params.iter().map(|p| p.tensor.grad().to_vec()).collect()
    }

    /// Adam step on every parameter using its accumulated gradient.
    pub fn step(&mut self) -> Result<()> {
        for p in &mut self.params {
            let Parameter { tensor, adam, .. } = p;
            let grad = tensor.grad().to_vec();
            adam.update(tensor.values_mut(), &grad)?;
        }
        Ok(())
    }

    /// Adam step with externally supplied gradients (one vector per parameter).
    pub fn apply_grads(&mut self, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::shape(
                "apply_grads",
                format!("{} gradients for {} parameters", grads.len(), self.params.len()),
            ));
        }
        for (p, g) in self.params.iter().zip(grads) {
            if g.len() != p.tensor.len() {
                return Err(Error::shape(
                    "apply_grads",
                    format!("{}: {} values, gradient has {}", p.name, p.tensor.len(), g.len()),
                ));
            }
        }
        for (p, g) in self.params.iter_mut().zip(grads) {
            p.adam_step(g)?;
        }
        Ok(())
    }

    /// `Σ ‖θ‖²` over every parameter.
    pub fn sum_squares(&self) -> f64 {
        self.params.iter().map(|p| p.tensor.sum_squares()).sum()
    }

    pub fn values(&self) -> Vec<Vec<f64>> {
        self.params.iter().map(|p| p.tensor.values().to_vec()).collect()
    }

    /// Overwrites parameter values (not optimizer state).
    pub fn set_values(&mut self, values: &[Vec<f64>]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::shape("set_values", "parameter count differs"));
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            if v.len() != p.tensor.len() {
                return Err(Error::shape("set_values", format!("{}: length differs", p.name)));
            }
            p.tensor.values_mut().copy_from_slice(v);
        }
        Ok(())
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.params.iter().map(|p| (p.name.clone(), p.tensor.clone())).collect()
    }

    /// Loads values by name; every parameter must be present with a matching shape.
    pub fn load_named(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        for p in &mut self.params {
            let (_, t) = tensors
                .iter()
                .find(|(n, _)| *n == p.name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter {:?}", p.name)))?;
            if t.shape() != p.tensor.shape() {
                return Err(Error::shape(
                    "load",
                    format!("{}: checkpoint {:?}, model {:?}", p.name, t.shape(), p.tensor.shape()),
                ));
            }
            p.tensor.values_mut().copy_from_slice(t.values());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let mut p = Parameter::new("w", Tensor::from_vec(vec![0.3, -1.2]), AdamConfig::default());
        p.adam_step(&[0.0, 0.0]).unwrap();
        assert_eq!(p.tensor.values(), &[0.3, -1.2]);
        assert_eq!(p.adam.step_count, 1);
    }

    #[test]
    fn single_step_matches_closed_form() {
        let cfg = AdamConfig::with_lr(0.01);
        let mut p = Parameter::new("w", Tensor::from_vec(vec![0.5]), cfg);
        let g = 0.3;
        p.adam_step(&[g]).unwrap();
        // First step: m_hat = g, v_hat = g^2.
        let m = (1.0 - cfg.beta1) * g;
        let v = (1.0 - cfg.beta2) * g * g;
        let m_hat = m / (1.0 - cfg.beta1);
        let v_hat = v / (1.0 - cfg.beta2);
        let want = 0.5 - cfg.lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
        assert_eq!(p.tensor.values()[0], want);
    }

    #[test]
    fn constant_gradient_moves_against_its_sign() {
        for g in [0.7, -0.2] {
            let mut p = Parameter::new("w", Tensor::from_vec(vec![1.0]), AdamConfig::with_lr(1e-3));
            for step in 1..=100u64 {
                let before = p.tensor.values()[0];
                p.adam_step(&[g]).unwrap();
                let after = p.tensor.values()[0];
                assert!((after - before) * g < 0.0);
                assert_eq!(p.adam.step_count, step);
            }
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = Parameter::new("w", Tensor::from_vec(vec![1.0, 2.0]), AdamConfig::default());
        assert!(p.adam_step(&[1.0]).is_err());
        let mut s = ParamStore::default();
        s.add("a", Tensor::from_vec(vec![1.0])).unwrap();
        assert!(s.add("a", Tensor::from_vec(vec![1.0])).is_err());
        assert!(s.apply_grads(&[vec![1.0, 2.0]]).is_err());
    }
}
