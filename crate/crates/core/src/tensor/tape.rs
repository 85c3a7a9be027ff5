use crate::error::{Error, Result};

use super::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    OneMinus(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    Sum(Var),
    SumSquares(Var),
    Mse(Var, Var),
    Pick(Var, usize),
    Softmax(Var),
    LogSoftmax(Var),
    Entropy(Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    Dense {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        k: Var,
        stride: usize,
    },
    Conv1d {
        x: Var,
        k: Var,
        stride: usize,
    },
    AvgPool2d {
        x: Var,
        window: (usize, usize),
        stride: (usize, usize),
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
}

/// Records a forward computation so it can be differentiated in reverse.
///
/// A tape is single-threaded and short-lived: build one per forward/backward
/// pass (or per batch), bind parameters with [`super::ParamStore::bind`], and
/// drop it afterwards.
#[derive(Debug, Default)]
pub struct Tape {
    shapes: Vec<Vec<usize>>,
    values: Vec<Vec<f64>>,
    grads: Vec<Vec<f64>>,
    requires_grad: Vec<bool>,
    ops: Vec<Op>,
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Drops every node recorded after `len`, e.g. to discard an
    /// inference-only forward pass while keeping bound parameters.
    pub fn truncate(&mut self, len: usize) {
        self.shapes.truncate(len);
        self.values.truncate(len);
        self.grads.truncate(len);
        self.requires_grad.truncate(len);
        self.ops.truncate(len);
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.shapes.push(shape);
        self.values.push(values);
        self.grads.push(Vec::new());
        self.requires_grad.push(requires_grad);
        self.ops.push(op);
        Var(self.ops.len() - 1)
    }

    /// Trainable leaf; gradients are collected for it.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), Op::Leaf, true)
    }

    pub(crate) fn leaf_raw(&mut self, shape: &[usize], values: &[f64], requires_grad: bool) -> Var {
        self.push(shape.to_vec(), values.to_vec(), Op::Leaf, requires_grad)
    }

    /// Constant input; no gradient is tracked.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), Op::Leaf, false)
    }

    pub fn constant_vec(&mut self, values: Vec<f64>) -> Var {
        let n = values.len();
        self.push(vec![n], values, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.shapes[v.0]
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.values[v.0][0]
    }

    /// Gradient accumulated by the last [`Tape::backward`]; zeros if none.
    pub fn grad(&self, v: Var) -> Vec<f64> {
        let g = &self.grads[v.0];
        if g.is_empty() {
            vec![0.0; self.values[v.0].len()]
        } else {
            g.clone()
        }
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let mut t = Tensor::new(self.shapes[v.0].clone(), self.values[v.0].clone())
            .expect("tape nodes are shape-consistent");
        let g = &self.grads[v.0];
        if !g.is_empty() {
            t.grad_mut().copy_from_slice(g);
        }
        t
    }

    fn rg(&self, v: Var) -> bool {
        self.requires_grad[v.0]
    }

    fn check_finite(&self, op: &'static str, v: Var) -> Result<()> {
        if self.values[v.0].iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    fn same_len(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shapes[a.0] != self.shapes[b.0] {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shapes[a.0], self.shapes[b.0]),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, rec: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_len(op, a, b)?;
        let vals = self.values[a.0]
            .iter()
            .zip(&self.values[b.0])
            .map(|(x, y)| f(*x, *y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shapes[a.0].clone(), vals, rec, rg))
    }

    fn map(&mut self, a: Var, rec: Op, f: impl Fn(f64) -> f64) -> Var {
        let vals = self.values[a.0].iter().map(|x| f(*x)).collect();
        let rg = self.rg(a);
        self.push(self.shapes[a.0].clone(), vals, rec, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::Scale(a, c), |x| c * x)
    }

    /// `1 - a`, element-wise.
    pub fn one_minus(&mut self, a: Var) -> Var {
        self.map(a, Op::OneMinus(a), |x| 1.0 - x)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.values[a.0].len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shapes[a.0]),
            ));
        }
        let vals = self.values[a.0].clone();
        let rg = self.rg(a);
        Ok(self.push(shape, vals, Op::Reshape(a), rg))
    }

    pub fn flatten(&mut self, a: Var) -> Var {
        let n = self.values[a.0].len();
        self.reshape(a, vec![n]).expect("flatten preserves length")
    }

    /// Concatenates the flattened inputs into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat of nothing"));
        }
        let mut vals = Vec::new();
        for p in parts {
            vals.extend_from_slice(&self.values[p.0]);
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        let n = vals.len();
        Ok(self.push(vec![n], vals, Op::Concat(parts.to_vec()), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.values[a.0].iter().sum();
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Sum(a), rg)
    }

    /// Squared L2 norm.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s = self.values[a.0].iter().map(|v| v * v).sum();
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::SumSquares(a), rg)
    }

    /// Mean squared error `(1/N) Σ (pred - target)^2`.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.values[pred.0].len() != self.values[target.0].len() {
            return Err(Error::shape(
                "mse",
                format!(
                    "pred has {} values, target {}",
                    self.values[pred.0].len(),
                    self.values[target.0].len()
                ),
            ));
        }
        let n = self.values[pred.0].len() as f64;
        let s: f64 = self.values[pred.0]
            .iter()
            .zip(&self.values[target.0])
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(vec![1], vec![s / n], Op::Mse(pred, target), rg))
    }

    /// Selects one element as a scalar.
    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var> {
        let v = *self.values[a.0]
            .get(index)
            .ok_or_else(|| Error::invalid(format!("pick index {index} out of range")))?;
        let rg = self.rg(a);
        Ok(self.push(vec![1], vec![v], Op::Pick(a, index), rg))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let p = super::softmax(&self.values[a.0])?;
        let rg = self.rg(a);
        Ok(self.push(self.shapes[a.0].clone(), p, Op::Softmax(a), rg))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        self.check_finite("log_softmax", a)?;
        let x = &self.values[a.0];
        let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let vals = x.iter().map(|v| v - lse).collect();
        let rg = self.rg(a);
        Ok(self.push(self.shapes[a.0].clone(), vals, Op::LogSoftmax(a), rg))
    }

    /// Entropy `-Σ p ln p` of a probability vector.
    pub fn entropy(&mut self, p: Var) -> Result<Var> {
        let h = super::entropy(&self.values[p.0])?;
        let rg = self.rg(p);
        Ok(self.push(vec![1], vec![h], Op::Entropy(p), rg))
    }

    /// Adds a per-channel bias along the last dimension.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = *self.shapes[x.0].last().unwrap_or(&0);
        if self.values[bias.0].len() != c {
            return Err(Error::shape(
                "add_bias",
                format!("input {:?}, bias {:?}", self.shapes[x.0], self.shapes[bias.0]),
            ));
        }
        let b = &self.values[bias.0];
        let vals = self.values[x.0]
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % c])
            .collect();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(self.shapes[x.0].clone(), vals, Op::AddBias { x, bias }, rg))
    }

    /// Affine map `y = x W + b` with `W` of shape `[N, M]`; `x` is flattened.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let ws = &self.shapes[w.0];
        if ws.len() != 2 || ws[0] != self.values[x.0].len() {
            return Err(Error::shape(
                "dense",
                format!("input {:?}, weights {ws:?}", self.shapes[x.0]),
            ));
        }
        let (n, m) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.values[b.0].len() != m {
                return Err(Error::shape(
                    "dense",
                    format!("bias {:?} for {m} outputs", self.shapes[b.0]),
                ));
            }
        }
        let mut out = match b {
            Some(b) => self.values[b.0].clone(),
            None => vec![0.0; m],
        };
        let xv = &self.values[x.0];
        let wv = &self.values[w.0];
        for i in 0..n {
            let xi = xv[i];
            if xi == 0.0 {
                continue;
            }
            let row = &wv[i * m..(i + 1) * m];
            for (o, wij) in out.iter_mut().zip(row) {
                *o += xi * wij;
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(vec![m], out, Op::Dense { x, w, b }, rg))
    }

    /// Valid 2-D convolution: input `[H, W, C]`, kernels `[Kh, Kw, C, F]`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize) -> Result<Var> {
        let xs = self.shapes[x.0].clone();
        let ks = self.shapes[k.0].clone();
        if stride == 0 {
            return Err(Error::invalid("conv2d: stride must be positive"));
        }
        if xs.len() != 3 || ks.len() != 4 || ks[2] != xs[2] || ks[0] > xs[0] || ks[1] > xs[1] {
            return Err(Error::shape("conv2d", format!("input {xs:?}, kernels {ks:?}")));
        }
        let (h, w, c) = (xs[0], xs[1], xs[2]);
        let (kh, kw, f) = (ks[0], ks[1], ks[3]);
        let oh = (h - kh) / stride + 1;
        let ow = (w - kw) / stride + 1;
        let xv = &self.values[x.0];
        let kv = &self.values[k.0];
        let mut out = vec![0.0; oh * ow * f];
        for oy in 0..oh {
            for ox in 0..ow {
                let o = &mut out[(oy * ow + ox) * f..(oy * ow + ox + 1) * f];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let ib = ((oy * stride + ky) * w + ox * stride + kx) * c;
                        let kb = (ky * kw + kx) * c * f;
                        for ch in 0..c {
                            let xval = xv[ib + ch];
                            let krow = &kv[kb + ch * f..kb + (ch + 1) * f];
                            for (ov, kval) in o.iter_mut().zip(krow) {
                                *ov += xval * kval;
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(k);
        Ok(self.push(vec![oh, ow, f], out, Op::Conv2d { x, k, stride }, rg))
    }

    /// Valid 1-D convolution: input `[L, C]`, kernels `[K, C, F]`.
    pub fn conv1d(&mut self, x: Var, k: Var, stride: usize) -> Result<Var> {
        let xs = self.shapes[x.0].clone();
        let ks = self.shapes[k.0].clone();
        if stride == 0 {
            return Err(Error::invalid("conv1d: stride must be positive"));
        }
        if xs.len() != 2 || ks.len() != 3 || ks[1] != xs[1] || ks[0] > xs[0] {
            return Err(Error::shape("conv1d", format!("input {xs:?}, kernels {ks:?}")));
        }
        let (l, c) = (xs[0], xs[1]);
        let (kl, f) = (ks[0], ks[2]);
        let ol = (l - kl) / stride + 1;
        let xv = &self.values[x.0];
        let kv = &self.values[k.0];
        let mut out = vec![0.0; ol * f];
        for op in 0..ol {
            let o = &mut out[op * f..(op + 1) * f];
            for kp in 0..kl {
                let ib = (op * stride + kp) * c;
                let kb = kp * c * f;
                for ch in 0..c {
                    let xval = xv[ib + ch];
                    let krow = &kv[kb + ch * f..kb + (ch + 1) * f];
                    for (ov, kval) in o.iter_mut().zip(krow) {
                        *ov += xval * kval;
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(k);
        Ok(self.push(vec![ol, f], out, Op::Conv1d { x, k, stride }, rg))
    }

    fn pool_dims(&self, op: &'static str, x: Var, window: (usize, usize), stride: (usize, usize)) -> Result<(usize, usize, usize, usize, usize)> {
        let xs = &self.shapes[x.0];
        if xs.len() != 3 {
            return Err(Error::shape(op, format!("input {xs:?} is not [H, W, C]")));
        }
        if window.0 == 0 || window.1 == 0 || stride.0 == 0 || stride.1 == 0 {
            return Err(Error::invalid(format!("{op}: window and stride must be positive")));
        }
        if window.0 > xs[0] || window.1 > xs[1] {
            return Err(Error::shape(op, format!("window {window:?} larger than input {xs:?}")));
        }
        let oh = (xs[0] - window.0) / stride.0 + 1;
        let ow = (xs[1] - window.1) / stride.1 + 1;
        Ok((xs[1], xs[2], oh, ow, 0))
    }

    /// Average pooling over `[H, W, C]` with the given window and stride.
    pub fn avg_pool2d(&mut self, x: Var, window: (usize, usize), stride: (usize, usize)) -> Result<Var> {
        let (w, c, oh, ow, _) = self.pool_dims("avg_pool2d", x, window, stride)?;
        let xv = &self.values[x.0];
        let norm = 1.0 / (window.0 * window.1) as f64;
        let mut out = vec![0.0; oh * ow * c];
        for oy in 0..oh {
            for ox in 0..ow {
                let o = &mut out[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
                for dy in 0..window.0 {
                    for dx in 0..window.1 {
                        let ib = ((oy * stride.0 + dy) * w + ox * stride.1 + dx) * c;
                        for (ov, xval) in o.iter_mut().zip(&xv[ib..ib + c]) {
                            *ov += xval;
                        }
                    }
                }
                o.iter_mut().for_each(|v| *v *= norm);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![oh, ow, c], out, Op::AvgPool2d { x, window, stride }, rg))
    }

    /// Max pooling over `[H, W, C]`. Ties go to the first cell in row-major order.
    pub fn max_pool2d(&mut self, x: Var, window: (usize, usize), stride: (usize, usize)) -> Result<Var> {
        let (w, c, oh, ow, _) = self.pool_dims("max_pool2d", x, window, stride)?;
        let xv = &self.values[x.0];
        let mut out = vec![f64::NEG_INFINITY; oh * ow * c];
        let mut argmax = vec![0usize; oh * ow * c];
        for oy in 0..oh {
            for ox in 0..ow {
                let ob = (oy * ow + ox) * c;
                for dy in 0..window.0 {
                    for dx in 0..window.1 {
                        let ib = ((oy * stride.0 + dy) * w + ox * stride.1 + dx) * c;
                        for ch in 0..c {
                            if xv[ib + ch] > out[ob + ch] {
                                out[ob + ch] = xv[ib + ch];
                                argmax[ob + ch] = ib + ch;
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![oh, ow, c], out, Op::MaxPool2d { x, argmax }, rg))
    }

    /// Reverse pass from a scalar root. Gradients from earlier calls are discarded.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.values[root.0].len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be scalar, got {:?}", self.shapes[root.0]),
            ));
        }
        let Tape {
            shapes,
            values,
            grads,
            requires_grad,
            ops,
        } = self;
        for (i, g) in grads.iter_mut().enumerate() {
            g.clear();
            if i <= root.0 && requires_grad[i] {
                g.resize(values[i].len(), 0.0);
            }
        }
        if !requires_grad[root.0] {
            return Ok(());
        }
        grads[root.0][0] = 1.0;

        for i in (0..=root.0).rev() {
            if !requires_grad[i] || matches!(ops[i], Op::Leaf) {
                continue;
            }
            let g = std::mem::take(&mut grads[i]);
            let out = &values[i];
            // Each arm adds into the grads of the op's inputs, all of which precede `i`.
            macro_rules! with_grad {
                ($v:expr, |$dst:ident| $body:block) => {
                    if requires_grad[$v.0] {
                        let $dst: &mut Vec<f64> = &mut grads[$v.0];
                        $body
                    }
                };
            }
            match &ops[i] {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    with_grad!(*a, |d| {
                        d.iter_mut().zip(&g).for_each(|(d, g)| *d += g);
                    });
                    with_grad!(*b, |d| {
                        d.iter_mut().zip(&g).for_each(|(d, g)| *d += g);
                    });
                }
                Op::Sub(a, b) => {
                    with_grad!(*a, |d| {
                        d.iter_mut().zip(&g).for_each(|(d, g)| *d += g);
                    });
                    with_grad!(*b, |d| {
                        d.iter_mut().zip(&g).for_each(|(d, g)| *d -= g);
                    });
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&values[a.0], &values[b.0]);
                    with_grad!(*a, |d| {
                        for j in 0..g.len() {
                            d[j] += g[j] * bv[j];
                        }
                    });
                    with_grad!(*b, |d| {
                        for j in 0..g.len() {
                            d[j] += g[j] * av[j];
                        }
                    });
                }
                Op::Scale(a, c) => with_grad!(*a, |d| {
                    d.iter_mut().zip(&g).for_each(|(d, g)| *d += c * g);
                }),
                Op::OneMinus(a) => with_grad!(*a, |d| {
                    d.iter_mut().zip(&g).for_each(|(d, g)| *d -= g);
                }),
                Op::Sigmoid(a) => with_grad!(*a, |d| {
                    for j in 0..g.len() {
                        d[j] += g[j] * out[j] * (1.0 - out[j]);
                    }
                }),
                Op::Tanh(a) => with_grad!(*a, |d| {
                    for j in 0..g.len() {
                        d[j] += g[j] * (1.0 - out[j] * out[j]);
                    }
                }),
                Op::Relu(a) => {
                    let av = &values[a.0];
                    with_grad!(*a, |d| {
                        for j in 0..g.len() {
                            if av[j] > 0.0 {
                                d[j] += g[j];
                            }
                        }
                    });
                }
                Op::Reshape(a) => with_grad!(*a, |d| {
                    d.iter_mut().zip(&g).for_each(|(d, g)| *d += g);
                }),
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = values[p.0].len();
                        with_grad!(*p, |d| {
                            d.iter_mut().zip(&g[off..off + n]).for_each(|(d, g)| *d += g);
                        });
                        off += n;
                    }
                }
                Op::Sum(a) => with_grad!(*a, |d| {
                    d.iter_mut().for_each(|d| *d += g[0]);
                }),
                Op::SumSquares(a) => {
                    let av = &values[a.0];
                    with_grad!(*a, |d| {
                        for j in 0..d.len() {
                            d[j] += 2.0 * av[j] * g[0];
                        }
                    });
                }
                Op::Mse(p, t) => {
                    let (pv, tv) = (&values[p.0], &values[t.0]);
                    let n = pv.len() as f64;
                    with_grad!(*p, |d| {
                        for j in 0..d.len() {
                            d[j] += 2.0 * (pv[j] - tv[j]) / n * g[0];
                        }
                    });
                    with_grad!(*t, |d| {
                        for j in 0..d.len() {
                            d[j] -= 2.0 * (pv[j] - tv[j]) / n * g[0];
                        }
                    });
                }
                Op::Pick(a, idx) => with_grad!(*a, |d| {
                    d[*idx] += g[0];
                }),
                Op::Softmax(a) => with_grad!(*a, |d| {
                    let dot: f64 = g.iter().zip(out).map(|(g, y)| g * y).sum();
                    for j in 0..d.len() {
                        d[j] += out[j] * (g[j] - dot);
                    }
                }),
                Op::LogSoftmax(a) => with_grad!(*a, |d| {
                    let gs: f64 = g.iter().sum();
                    for j in 0..d.len() {
                        d[j] += g[j] - out[j].exp() * gs;
                    }
                }),
                Op::Entropy(p) => {
                    let pv = &values[p.0];
                    with_grad!(*p, |d| {
                        for j in 0..d.len() {
                            if pv[j] > 0.0 {
                                d[j] -= (pv[j].ln() + 1.0) * g[0];
                            }
                        }
                    });
                }
                Op::AddBias { x, bias } => {
                    let c = values[bias.0].len();
                    with_grad!(*x, |d| {
                        d.iter_mut().zip(&g).for_each(|(d, g)| *d += g);
                    });
                    with_grad!(*bias, |d| {
                        for (j, gj) in g.iter().enumerate() {
                            d[j % c] += gj;
                        }
                    });
                }
                Op::Dense { x, w, b } => {
                    let (n, m) = (shapes[w.0][0], shapes[w.0][1]);
                    let (xv, wv) = (&values[x.0], &values[w.0]);
                    with_grad!(*w, |d| {
                        for r in 0..n {
                            let xr = xv[r];
                            if xr == 0.0 {
                                continue;
                            }
                            let row = &mut d[r * m..(r + 1) * m];
                            for (dv, gj) in row.iter_mut().zip(&g) {
                                *dv += xr * gj;
                            }
                        }
                    });
                    with_grad!(*x, |d| {
                        for r in 0..n {
                            let row = &wv[r * m..(r + 1) * m];
                            d[r] += row.iter().zip(&g).map(|(w, g)| w * g).sum::<f64>();
                        }
                    });
                    if let Some(b) = b {
                        with_grad!(*b, |d| {
                            d.iter_mut().zip(&g).for_each(|(d, g)| *d += g);
                        });
                    }
                }
                Op::Conv2d { x, k, stride } => {
                    let (xs, ks) = (&shapes[x.0], &shapes[k.0]);
                    let (w, c) = (xs[1], xs[2]);
                    let (kh, kw, f) = (ks[0], ks[1], ks[3]);
                    let (oh, ow) = (shapes[i][0], shapes[i][1]);
                    let (xv, kv) = (&values[x.0], &values[k.0]);
                    let s = *stride;
                    with_grad!(*k, |d| {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let go = &g[(oy * ow + ox) * f..(oy * ow + ox + 1) * f];
                                for ky in 0..kh {
                                    for kx in 0..kw {
                                        let ib = ((oy * s + ky) * w + ox * s + kx) * c;
                                        let kb = (ky * kw + kx) * c * f;
                                        for ch in 0..c {
                                            let xval = xv[ib + ch];
                                            let drow = &mut d[kb + ch * f..kb + (ch + 1) * f];
                                            for (dv, gv) in drow.iter_mut().zip(go) {
                                                *dv += xval * gv;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    });
                    with_grad!(*x, |d| {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let go = &g[(oy * ow + ox) * f..(oy * ow + ox + 1) * f];
                                for ky in 0..kh {
                                    for kx in 0..kw {
                                        let ib = ((oy * s + ky) * w + ox * s + kx) * c;
                                        let kb = (ky * kw + kx) * c * f;
                                        for ch in 0..c {
                                            let krow = &kv[kb + ch * f..kb + (ch + 1) * f];
                                            d[ib + ch] += krow.iter().zip(go).map(|(a, b)| a * b).sum::<f64>();
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
                Op::Conv1d { x, k, stride } => {
                    let c = shapes[x.0][1];
                    let (kl, f) = (shapes[k.0][0], shapes[k.0][2]);
                    let ol = shapes[i][0];
                    let (xv, kv) = (&values[x.0], &values[k.0]);
                    let s = *stride;
                    with_grad!(*k, |d| {
                        for op in 0..ol {
                            let go = &g[op * f..(op + 1) * f];
                            for kp in 0..kl {
                                let ib = (op * s + kp) * c;
                                let kb = kp * c * f;
                                for ch in 0..c {
                                    let xval = xv[ib + ch];
                                    let drow = &mut d[kb + ch * f..kb + (ch + 1) * f];
                                    for (dv, gv) in drow.iter_mut().zip(go) {
                                        *dv += xval * gv;
                                    }
                                }
                            }
                        }
                    });
                    with_grad!(*x, |d| {
                        for op in 0..ol {
                            let go = &g[op * f..(op + 1) * f];
                            for kp in 0..kl {
                                let ib = (op * s + kp) * c;
                                let kb = kp * c * f;
                                for ch in 0..c {
                                    let krow = &kv[kb + ch * f..kb + (ch + 1) * f];
                                    d[ib + ch] += krow.iter().zip(go).map(|(a, b)| a * b).sum::<f64>();
                                }
                            }
                        }
                    });
                }
                Op::AvgPool2d { x, window, stride } => {
                    let (w, c) = (shapes[x.0][1], shapes[x.0][2]);
                    let (oh, ow) = (shapes[i][0], shapes[i][1]);
                    let norm = 1.0 / (window.0 * window.1) as f64;
                    with_grad!(*x, |d| {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let go = &g[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
                                for dy in 0..window.0 {
                                    for dx in 0..window.1 {
                                        let ib = ((oy * stride.0 + dy) * w + ox * stride.1 + dx) * c;
                                        for (dv, gv) in d[ib..ib + c].iter_mut().zip(go) {
                                            *dv += gv * norm;
                                        }
                                    }
                                }
                            }
                        }
                    });
                }
                Op::MaxPool2d { x, argmax } => with_grad!(*x, |d| {
                    for (src, gv) in argmax.iter().zip(&g) {
                        d[*src] += gv;
                    }
                }),
            }
            grads[i] = g;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn conv2d_identity_and_zero() {
        let mut t = Tape::new();
        let x = t.constant(&Tensor::filled(vec![3, 3, 1], 1.0));
        let k = t.constant(&Tensor::filled(vec![1, 1, 1, 1], 1.0));
        let y = t.conv2d(x, k, 1).unwrap();
        assert_eq!(t.shape(y), &[3, 3, 1]);
        assert!(t.value(y).iter().all(|v| *v == 1.0));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = t.constant(&rand_tensor(&mut rng, vec![6, 5, 2]));
        let k = t.constant(&Tensor::zeros(vec![3, 2, 2, 4]));
        let y = t.conv2d(x, k, 2).unwrap();
        assert_eq!(t.shape(y), &[2, 2, 4]);
        assert!(t.value(y).iter().all(|v| *v == 0.0));
    }

    /// Direct nested-loop convolution, independent of the tape's loop order.
    fn conv2d_oracle(x: &Tensor, k: &Tensor, s: usize) -> Vec<f64> {
        let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (kh, kw, f) = (k.shape()[0], k.shape()[1], k.shape()[3]);
        let (oh, ow) = ((h - kh) / s + 1, (w - kw) / s + 1);
        let mut out = Vec::new();
        for oy in 0..oh {
            for ox in 0..ow {
                for fi in 0..f {
                    let mut acc = 0.0;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            for ch in 0..c {
                                let xi = x.values()[((oy * s + ky) * w + (ox * s + kx)) * c + ch];
                                let ki = k.values()[((ky * kw + kx) * c + ch) * f + fi];
                                acc += xi * ki;
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_tensor(&mut rng, vec![8, 8, 3]);
        let k = rand_tensor(&mut rng, vec![3, 3, 3, 4]);
        for stride in [1, 2] {
            let mut t = Tape::new();
            let (xv, kv) = (t.constant(&x), t.constant(&k));
            let y = t.conv2d(xv, kv, stride).unwrap();
            let want = conv2d_oracle(&x, &k, stride);
            assert_eq!(t.value(y).len(), want.len());
            for (a, b) in t.value(y).iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv2d_rejects_bad_shapes() {
        let mut t = Tape::new();
        let x = t.constant(&Tensor::zeros(vec![2, 2, 1]));
        let k = t.constant(&Tensor::zeros(vec![3, 3, 1, 1]));
        assert!(matches!(t.conv2d(x, k, 1), Err(Error::Shape { .. })));
        let k = t.constant(&Tensor::zeros(vec![1, 1, 2, 1]));
        assert!(matches!(t.conv2d(x, k, 1), Err(Error::Shape { .. })));
        assert!(t.conv2d(x, k, 0).is_err());
    }

    #[test]
    fn conv1d_examples() {
        let mut t = Tape::new();
        let seq = Tensor::new(vec![5, 1], vec![1.0, -2.0, 3.0, 0.5, 4.0]).unwrap();
        let x = t.constant(&seq);
        let k = t.constant(&Tensor::filled(vec![1, 1, 1], 1.0));
        let y = t.conv1d(x, k, 1).unwrap();
        assert_eq!(t.value(y), seq.values());
        let z = t.constant(&Tensor::zeros(vec![2, 1, 3]));
        let y = t.conv1d(x, z, 1).unwrap();
        assert!(t.value(y).iter().all(|v| *v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, vec![10, 3]);
        let k = rand_tensor(&mut rng, vec![4, 3, 5]);
        let (xv, kv) = (t.constant(&x), t.constant(&k));
        let y = t.conv1d(xv, kv, 2).unwrap();
        let ol = (10 - 4) / 2 + 1;
        assert_eq!(t.shape(y), &[ol, 5]);
        for p in 0..ol {
            for f in 0..5 {
                let mut acc = 0.0;
                for kp in 0..4 {
                    for c in 0..3 {
                        acc += x.values()[(p * 2 + kp) * 3 + c] * k.values()[(kp * 3 + c) * 5 + f];
                    }
                }
                assert!((t.value(y)[p * 5 + f] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pooling_examples() {
        let mut t = Tape::new();
        let c = t.constant(&Tensor::filled(vec![6, 6, 2], 0.7));
        let a = t.avg_pool2d(c, (3, 3), (3, 3)).unwrap();
        let m = t.max_pool2d(c, (2, 2), (2, 2)).unwrap();
        assert!(t.value(a).iter().all(|v| (v - 0.7).abs() < 1e-15));
        assert!(t.value(m).iter().all(|v| *v == 0.7));

        let x = t.constant(&Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let m = t.max_pool2d(x, (2, 2), (2, 2)).unwrap();
        assert_eq!(t.value(m), &[4.0]);

        let x = t.constant(&Tensor::new(vec![3, 3, 1], (1..=9).map(f64::from).collect()).unwrap());
        let a = t.avg_pool2d(x, (3, 3), (3, 3)).unwrap();
        assert_eq!(t.value(a), &[5.0]);

        let small = t.constant(&Tensor::zeros(vec![2, 2, 1]));
        assert!(t.avg_pool2d(small, (3, 3), (3, 3)).is_err());
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax_first_tie() {
        let mut t = Tape::new();
        let x = t.leaf(&Tensor::new(vec![2, 2, 1], vec![5.0, 5.0, 1.0, 5.0]).unwrap());
        let m = t.max_pool2d(x, (2, 2), (2, 2)).unwrap();
        let s = t.sum(m);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x), vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn dense_examples() {
        let mut t = Tape::new();
        let x = t.constant_vec(vec![1.0, -2.0, 3.0]);
        let mut eye = Tensor::zeros(vec![3, 3]);
        for i in 0..3 {
            eye.values_mut()[i * 3 + i] = 1.0;
        }
        let w = t.constant(&eye);
        let b = t.constant_vec(vec![0.0; 3]);
        let y = t.dense(x, w, Some(b)).unwrap();
        assert_eq!(t.value(y), &[1.0, -2.0, 3.0]);

        let zero = t.constant_vec(vec![0.0; 3]);
        let b = t.constant_vec(vec![0.5, 0.25]);
        let w = t.constant(&Tensor::filled(vec![3, 2], 9.0));
        let y = t.dense(zero, w, Some(b)).unwrap();
        assert_eq!(t.value(y), &[0.5, 0.25]);

        let bad = t.constant(&Tensor::zeros(vec![4, 2]));
        assert!(t.dense(x, bad, None).is_err());
    }

    #[test]
    fn dense_matches_dot_product_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_tensor(&mut rng, vec![7]);
        let w = rand_tensor(&mut rng, vec![7, 4]);
        let b = rand_tensor(&mut rng, vec![4]);
        let mut t = Tape::new();
        let (xv, wv, bv) = (t.constant(&x), t.constant(&w), t.constant(&b));
        let y = t.dense(xv, wv, Some(bv)).unwrap();
        for j in 0..4 {
            let mut acc = b.values()[j];
            for i in 0..7 {
                acc += x.values()[i] * w.values()[i * 4 + j];
            }
            assert!((t.value(y)[j] - acc).abs() < 1e-13);
        }
    }

    #[test]
    fn mse_examples() {
        let mut t = Tape::new();
        let p = t.constant_vec(vec![1.0, 1.0]);
        let z = t.constant_vec(vec![0.0, 0.0]);
        let l = t.mse(p, z).unwrap();
        assert_eq!(t.scalar(l), 1.0);
        let l = t.mse(p, p).unwrap();
        assert_eq!(t.scalar(l), 0.0);
        let three = t.constant_vec(vec![0.0; 3]);
        assert!(t.mse(p, three).is_err());
    }

    #[test]
    fn elementwise_and_softmax_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand_tensor(&mut rng, vec![6]);
        let b = rand_tensor(&mut rng, vec![6]);
        let coef: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let err = grad_check(
            &[a, b],
            |t, v| {
                let s = t.mul(v[0], v[1])?;
                let u = t.sigmoid(s);
                let th = t.tanh(v[1]);
                let d = t.sub(u, th)?;
                let om = t.one_minus(d);
                let sc = t.scale(om, 1.7);
                let r = t.relu(v[0]);
                let cat = t.concat(&[sc, r])?;
                let c = t.constant_vec(coef.iter().chain(&coef).copied().collect());
                let wsum = t.mul(cat, c)?;
                let ls = t.log_softmax(wsum)?;
                let p0 = t.pick(ls, 2)?;
                let sm = t.softmax(v[1])?;
                let h = t.entropy(sm)?;
                let sq = t.sum_squares(v[0]);
                let a = t.add(p0, h)?;
                t.add(a, sq)
            },
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut t = Tape::new();
        let x = t.leaf(&Tensor::zeros(vec![2]));
        assert!(t.backward(x).is_err());
    }
}
