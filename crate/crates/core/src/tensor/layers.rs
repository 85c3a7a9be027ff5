use rand::Rng;

use crate::error::{Error, Result};

use super::{Bound, ParamId, ParamStore, Tape, Var};

/// Fully connected layer `y = x W + b`.
#[derive(Debug, Clone, Copy)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub n_in: usize,
    pub n_out: usize,
}

impl Dense {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, n_in: usize, n_out: usize, rng: &mut R) -> Result<Self> {
        Ok(Dense {
            w: store.add_glorot(format!("{name}.w"), vec![n_in, n_out], n_in, n_out, rng)?,
            b: store.add_zeros(format!("{name}.b"), vec![n_out])?,
            n_in,
            n_out,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.dense(x, p[self.w], Some(p[self.b]))
    }
}

/// Valid 2-D convolution with a per-filter bias.
#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub kernels: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl Conv2d {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, kernel: (usize, usize), channels: usize, filters: usize, stride: usize, rng: &mut R) -> Result<Self> {
        let area = kernel.0 * kernel.1;
        Ok(Conv2d {
            kernels: store.add_glorot(
                format!("{name}.k"),
                vec![kernel.0, kernel.1, channels, filters],
                area * channels,
                area * filters,
                rng,
            )?,
            bias: store.add_zeros(format!("{name}.b"), vec![filters])?,
            stride,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.conv2d(x, p[self.kernels], self.stride)?;
        tape.add_bias(y, p[self.bias])
    }
}

/// Valid 1-D convolution with a per-filter bias.
#[derive(Debug, Clone, Copy)]
pub struct Conv1d {
    pub kernels: ParamId,
    pub bias: ParamId,
    pub stride: usize,
}

impl Conv1d {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, kernel: usize, channels: usize, filters: usize, stride: usize, rng: &mut R) -> Result<Self> {
        Ok(Conv1d {
            kernels: store.add_glorot(
                format!("{name}.k"),
                vec![kernel, channels, filters],
                kernel * channels,
                kernel * filters,
                rng,
            )?,
            bias: store.add_zeros(format!("{name}.b"), vec![filters])?,
            stride,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.conv1d(x, p[self.kernels], self.stride)?;
        tape.add_bias(y, p[self.bias])
    }
}

/// Gated recurrent unit.
///
/// ```text
/// z  = σ(x W_z + h U_z + b_z)
/// r  = σ(x W_r + h U_r + b_r)
/// n  = tanh(x W_n + b_n + r ⊙ (h U_n))
/// h' = (1 - z) ⊙ n + z ⊙ h
/// ```
#[derive(Debug, Clone, Copy)]
pub struct Gru {
    pub w_z: ParamId,
    pub u_z: ParamId,
    pub b_z: ParamId,
    pub w_r: ParamId,
    pub u_r: ParamId,
    pub b_r: ParamId,
    pub w_n: ParamId,
    pub u_n: ParamId,
    pub b_n: ParamId,
    pub n_in: usize,
    pub hidden: usize,
}

impl Gru {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, n_in: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        let lim = 1.0 / (hidden as f64).sqrt();
        let mut w = |s: &mut ParamStore, g: &str, rows: usize| s.add_uniform(format!("{name}.{g}"), vec![rows, hidden], lim, rng);
        let w_z = w(store, "w_z", n_in)?;
        let u_z = w(store, "u_z", hidden)?;
        let w_r = w(store, "w_r", n_in)?;
        let u_r = w(store, "u_r", hidden)?;
        let w_n = w(store, "w_n", n_in)?;
        let u_n = w(store, "u_n", hidden)?;
        Ok(Gru {
            w_z,
            u_z,
            b_z: store.add_zeros(format!("{name}.b_z"), vec![hidden])?,
            w_r,
            u_r,
            b_r: store.add_zeros(format!("{name}.b_r"), vec![hidden])?,
            w_n,
            u_n,
            b_n: store.add_zeros(format!("{name}.b_n"), vec![hidden])?,
            n_in,
            hidden,
        })
    }

    pub fn step(&self, tape: &mut Tape, p: &Bound, x: Var, h: Var) -> Result<Var> {
        if tape.value(x).len() != self.n_in || tape.value(h).len() != self.hidden {
            return Err(Error::shape(
                "gru_step",
                format!(
                    "input {} (want {}), hidden {} (want {})",
                    tape.value(x).len(),
                    self.n_in,
                    tape.value(h).len(),
                    self.hidden
                ),
            ));
        }
        if tape.value(x).iter().chain(tape.value(h)).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "gru_step" });
        }
        let gate = |tape: &mut Tape, w: ParamId, u: ParamId, b: ParamId| -> Result<Var> {
            let xw = tape.dense(x, p[w], Some(p[b]))?;
            let hu = tape.dense(h, p[u], None)?;
            let s = tape.add(xw, hu)?;
            Ok(tape.sigmoid(s))
        };
        let z = gate(tape, self.w_z, self.u_z, self.b_z)?;
        let r = gate(tape, self.w_r, self.u_r, self.b_r)?;
        let xw = tape.dense(x, p[self.w_n], Some(p[self.b_n]))?;
        let hu = tape.dense(h, p[self.u_n], None)?;
        let rhu = tape.mul(r, hu)?;
        let pre = tape.add(xw, rhu)?;
        let n = tape.tanh(pre);
        // h' = n + z ⊙ (h - n)
        let diff = tape.sub(h, n)?;
        let zd = tape.mul(z, diff)?;
        tape.add(n, zd)
    }

    pub fn zero_state(&self, tape: &mut Tape) -> Var {
        tape.constant_vec(vec![0.0; self.hidden])
    }
}
