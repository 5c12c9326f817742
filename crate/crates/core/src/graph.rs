//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every op appends a node to the tape, so creation order is a topological
//! order and `backward` is a single reverse sweep. Leaves created from
//! tensors with `requires_grad` collect gradients; repeated `backward` calls
//! accumulate into those buffers until [`Graph::zero_grad`].

use crate::error::{invalid, shape_err, Error, Result};
use crate::kernels::{self, conv_out_size, ConvGeom};
use crate::real::{matmul, MatRef, Real};
use crate::tensor::{numel, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch-norm statistics source.
pub enum BnMode<'a, T> {
    /// Normalize with batch statistics and update the running averages.
    Train { running_mean: &'a mut [T], running_var: &'a mut [T] },
    /// Normalize with stored running statistics.
    Infer { running_mean: &'a [T], running_var: &'a [T] },
}

enum Op<T> {
    Leaf,
    /// Result of an op whose inputs need no gradient; nothing saved.
    Detached,
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    Relu { x: Var },
    Linear { x: Var, w: Var, b: Option<Var> },
    Add { a: Var, b: Var },
    /// Any elementwise map, with its local derivative saved.
    Elementwise { x: Var, deriv: Vec<T> },
    Sum { x: Var },
    Mean { x: Var },
    L2Normalize { x: Var, norms: Vec<T> },
    Reshape { x: Var },
    Mse { a: Var, b: Var },
    SoftmaxCe { logits: Var, labels: Vec<usize>, probs: Vec<T> },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    requires_grad: bool,
    op: Op<T>,
    grad: Option<Vec<T>>,
}

/// Recording context for one forward/backward pass.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool, op: Op<T>, what: &str) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(what.to_string()));
        }
        let op = if requires_grad || matches!(op, Op::Leaf) { op } else { Op::Detached };
        self.nodes.push(Node { shape, value, requires_grad, op, grad: None });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records a copy of `t`; gradients are collected iff `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Result<Var> {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad, Op::Leaf, "leaf")
    }

    /// Records a copy of `t`, overriding its `requires_grad` flag.
    pub fn param(&mut self, t: &Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push(t.shape().to_vec(), t.data().to_vec(), requires_grad, Op::Leaf, "leaf")
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), false, Op::Leaf, "constant")
    }

    /// A gradient-free copy of `v`.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let n = &self.nodes[v.0];
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, false, Op::Leaf, "detach")
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("node shapes are valid")
    }

    /// Accumulated gradient of a leaf.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.grad = None);
    }

    fn rg(&self, vars: &[Option<Var>]) -> bool {
        vars.iter().flatten().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 4 || ws.len() != 4 {
            return Err(shape_err!("conv2d expects rank-4 input and weight, got {:?} and {:?}", xs, ws));
        }
        if ws[1] != xs[1] || ws[2] != ws[3] {
            return Err(shape_err!("conv2d weight {:?} incompatible with input {:?}", ws, xs));
        }
        if !(1..=2).contains(&stride) {
            return Err(invalid!("conv2d stride {stride} not in {{1, 2}}"));
        }
        let k = ws[2];
        let ho = conv_out_size(xs[2], k, stride, padding);
        let wo = conv_out_size(xs[3], k, stride, padding);
        let (Some(ho), Some(wo)) = (ho, wo) else {
            return Err(shape_err!("conv2d output size non-positive for input {:?}, kernel {k}", xs));
        };
        let geom = ConvGeom { n: xs[0], cin: xs[1], h: xs[2], w: xs[3], cout: ws[0], k, stride, pad: padding, ho, wo };
        if let Some(b) = b {
            if self.shape(b) != [geom.cout] {
                return Err(shape_err!("conv2d bias {:?} for {} output channels", self.shape(b), geom.cout));
            }
        }
        let y = kernels::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), &geom);
        let rg = self.rg(&[Some(x), Some(w), b]);
        self.push(vec![geom.n, geom.cout, ho, wo], y, rg, Op::Conv2d { x, w, b, geom }, "conv2d")
    }

    /// Batch normalization over axis 1 of an `N x C [x H x W]` input.
    pub fn batchnorm(&mut self, x: Var, gamma: Var, beta: Var, mode: BnMode<'_, T>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(shape_err!("batchnorm input {:?} has no channel axis", xs));
        }
        let (n, c) = (xs[0], xs[1]);
        let s = xs[2..].iter().product::<usize>();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err!("batchnorm params {:?} for {c} channels", self.shape(gamma)));
        }
        let eps = T::of(BN_EPS);
        let (mean, inv_std, train) = match mode {
            BnMode::Train { running_mean, running_var } => {
                if n < 2 {
                    return Err(invalid!("batchnorm in train mode needs a batch of at least 2"));
                }
                if running_mean.len() != c || running_var.len() != c {
                    return Err(shape_err!("running statistics sized for {} channels, input has {c}", running_mean.len()));
                }
                let (mean, var) = kernels::channel_moments(self.value(x), n, c, s);
                let m = (n * s) as f64;
                let mom = T::of(BN_MOMENTUM);
                let unbias = T::of(m / (m - 1.0).max(1.0));
                for ch in 0..c {
                    running_mean[ch] = mom * running_mean[ch] + (T::one() - mom) * mean[ch];
                    running_var[ch] = mom * running_var[ch] + (T::one() - mom) * var[ch] * unbias;
                }
                let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                (mean, inv_std, true)
            }
            BnMode::Infer { running_mean, running_var } => {
                if running_mean.len() != c || running_var.len() != c {
                    return Err(shape_err!("running statistics sized for {} channels, input has {c}", running_mean.len()));
                }
                let inv_std = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                (running_mean.to_vec(), inv_std, false)
            }
        };
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let mut xhat = vec![T::zero(); xv.len()];
        let mut y = vec![T::zero(); xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * s;
                for j in off..off + s {
                    let h = (xv[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = h;
                    y[j] = gv[ch] * h + bv[ch];
                }
            }
        }
        let rg = self.rg(&[Some(x), Some(gamma), Some(beta)]);
        self.push(xs, y, rg, Op::BatchNorm { x, gamma, beta, xhat, inv_std, train }, "batchnorm")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).iter().map(|&v| v.max(T::zero())).collect();
        let rg = self.rg(&[Some(x)]);
        self.push(self.shape(x).to_vec(), y, rg, Op::Relu { x }, "relu")
    }

    /// `x W^T + b` for `x: N x In`, `W: Out x In`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(shape_err!("linear input {:?} incompatible with weight {:?}", xs, ws));
        }
        let (n, fin, fout) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            if self.shape(b) != [fout] {
                return Err(shape_err!("linear bias {:?} for {fout} outputs", self.shape(b)));
            }
        }
        let mut y = vec![T::zero(); n * fout];
        if let Some(b) = b {
            let bv = self.value(b);
            y.chunks_mut(fout).for_each(|row| row.copy_from_slice(bv));
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        matmul(MatRef::new(self.value(x), n, fin), MatRef::new(self.value(w), fout, fin).t(), &mut y, T::one(), beta);
        let rg = self.rg(&[Some(x), Some(w), b]);
        self.push(vec![n, fout], y, rg, Op::Linear { x, w, b }, "linear")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("add of {:?} and {:?}", self.shape(a), self.shape(b)));
        }
        let y = self.value(a).iter().zip(self.value(b)).map(|(&p, &q)| p + q).collect();
        let rg = self.rg(&[Some(a), Some(b)]);
        self.push(self.shape(a).to_vec(), y, rg, Op::Add { a, b }, "add")
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let y: Vec<T> = self.value(x).iter().map(|&v| v * c).collect();
        let deriv = vec![c; y.len()];
        self.elementwise(x, y, deriv, "scale")
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where clamping applied.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        let xv = self.value(x);
        let y: Vec<T> = xv.iter().map(|&v| v.max(lo).min(hi)).collect();
        let deriv = xv.iter().map(|&v| if v < lo || v > hi { T::zero() } else { T::one() }).collect();
        self.elementwise(x, y, deriv, "clamp")
    }

    /// Records an elementwise map whose output and local derivative were
    /// computed by the caller.
    pub fn elementwise(&mut self, x: Var, y: Vec<T>, deriv: Vec<T>, what: &str) -> Result<Var> {
        let n = self.value(x).len();
        if y.len() != n || deriv.len() != n {
            return Err(shape_err!("{what}: elementwise output of {} values for {n} inputs", y.len()));
        }
        let rg = self.rg(&[Some(x)]);
        self.push(self.shape(x).to_vec(), y, rg, Op::Elementwise { x, deriv }, what)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().copied().sum();
        let rg = self.rg(&[Some(x)]);
        self.push(vec![], vec![s], rg, Op::Sum { x }, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(invalid!("mean of an empty tensor"));
        }
        let s = v.iter().copied().sum::<T>() / T::of(v.len() as f64);
        let rg = self.rg(&[Some(x)]);
        self.push(vec![], vec![s], rg, Op::Mean { x }, "mean")
    }

    /// Normalizes each sample (axis 0 slice) to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let rows = *xs.first().ok_or_else(|| invalid!("l2_normalize of a scalar"))?;
        let d = numel(&xs).checked_div(rows).unwrap_or(0);
        let xv = self.value(x);
        let mut norms = Vec::with_capacity(rows);
        let mut y = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if norm <= T::zero() {
                return Err(invalid!("l2_normalize of a zero-norm row ({r})"));
            }
            for (o, &v) in y[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = v / norm;
            }
            norms.push(norm);
        }
        let rg = self.rg(&[Some(x)]);
        self.push(xs, y, rg, Op::L2Normalize { x, norms }, "l2_normalize")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() {
            return Err(shape_err!("cannot reshape {:?} to {:?}", self.shape(x), shape));
        }
        let y = self.value(x).to_vec();
        let rg = self.rg(&[Some(x)]);
        self.push(shape.to_vec(), y, rg, Op::Reshape { x }, "reshape")
    }

    /// Collapses every axis after the first.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        let n = *xs.first().ok_or_else(|| invalid!("flatten of a scalar"))?;
        let rest = xs[1..].iter().product();
        self.reshape(x, &[n, rest])
    }

    /// Mean of squared differences over every element.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("mse of {:?} and {:?}", self.shape(a), self.shape(b)));
        }
        let (av, bv) = (self.value(a), self.value(b));
        if av.is_empty() {
            return Err(invalid!("mse of empty tensors"));
        }
        let s = av.iter().zip(bv).map(|(&p, &q)| (p - q) * (p - q)).sum::<T>() / T::of(av.len() as f64);
        let rg = self.rg(&[Some(a), Some(b)]);
        self.push(vec![], vec![s], rg, Op::Mse { a, b }, "mse")
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let ls = self.shape(logits);
        if ls.len() != 2 || ls[0] != labels.len() || ls[0] == 0 {
            return Err(shape_err!("logits {:?} for {} labels", ls, labels.len()));
        }
        let (n, k) = (ls[0], ls[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(invalid!("label {bad} out of range for {k} classes"));
        }
        let lv = self.value(logits);
        let mut probs = vec![T::zero(); n * k];
        let mut loss = T::zero();
        for i in 0..n {
            let row = &lv[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - max).exp()).sum();
            for j in 0..k {
                probs[i * k + j] = (row[j] - max).exp() / z;
            }
            loss += z.ln() + max - row[labels[i]];
        }
        loss = loss / T::of(n as f64);
        let rg = self.rg(&[Some(logits)]);
        let op = Op::SoftmaxCe { logits, labels: labels.to_vec(), probs };
        self.push(vec![], vec![loss], rg, op, "softmax_cross_entropy")
    }

    /// Back-propagates from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.shape(loss).is_empty() && self.value(loss).len() != 1 {
            return Err(shape_err!("backward needs a scalar loss, got shape {:?}", self.shape(loss)));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, g, &mut grads)?;
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize, g: Vec<T>, grads: &mut [Option<Vec<T>>]) -> Result<()> {
        if matches!(self.nodes[i].op, Op::Leaf) {
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(buf) => add_into(buf, &g),
                None => node.grad = Some(g),
            }
            return Ok(());
        }
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].requires_grad;
        let mut out: Vec<(Var, Vec<T>)> = Vec::new();
        match &nodes[i].op {
            Op::Leaf | Op::Detached => {}
            Op::Conv2d { x, w, b, geom } => {
                let need = (needs(*x), needs(*w), b.is_some_and(needs));
                let cg = kernels::conv2d_backward(&nodes[x.0].value, &nodes[w.0].value, &g, geom, need);
                if let Some(dx) = cg.dx {
                    out.push((*x, dx));
                }
                if let Some(dw) = cg.dw {
                    out.push((*w, dw));
                }
                if let (Some(b), Some(db)) = (b, cg.db) {
                    out.push((*b, db));
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let xs = &nodes[x.0].shape;
                let (n, c) = (xs[0], xs[1]);
                let s = xs[2..].iter().product::<usize>();
                let gv = &nodes[gamma.0].value;
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * s;
                        for j in off..off + s {
                            dgamma[ch] += g[j] * xhat[j];
                            dbeta[ch] += g[j];
                        }
                    }
                }
                if needs(*x) {
                    let mut dx = vec![T::zero(); g.len()];
                    let m = T::of((n * s) as f64);
                    for ch in 0..c {
                        let scale = gv[ch] * inv_std[ch];
                        for b in 0..n {
                            let off = (b * c + ch) * s;
                            for j in off..off + s {
                                dx[j] = if *train {
                                    scale * (g[j] - dbeta[ch] / m - xhat[j] * dgamma[ch] / m)
                                } else {
                                    scale * g[j]
                                };
                            }
                        }
                    }
                    out.push((*x, dx));
                }
                if needs(*gamma) {
                    out.push((*gamma, dgamma));
                }
                if needs(*beta) {
                    out.push((*beta, dbeta));
                }
            }
            Op::Relu { x } => {
                let y = &nodes[i].value;
                let dx = g.iter().zip(y).map(|(&gi, &yi)| if yi > T::zero() { gi } else { T::zero() }).collect();
                out.push((*x, dx));
            }
            Op::Linear { x, w, b } => {
                let (n, fin) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
                let fout = nodes[w.0].shape[0];
                if needs(*x) {
                    let mut dx = vec![T::zero(); n * fin];
                    matmul(MatRef::new(&g, n, fout), MatRef::new(&nodes[w.0].value, fout, fin), &mut dx, T::one(), T::zero());
                    out.push((*x, dx));
                }
                if needs(*w) {
                    let mut dw = vec![T::zero(); fout * fin];
                    matmul(MatRef::new(&g, n, fout).t(), MatRef::new(&nodes[x.0].value, n, fin), &mut dw, T::one(), T::zero());
                    out.push((*w, dw));
                }
                if let Some(b) = b.filter(|b| needs(*b)) {
                    let mut db = vec![T::zero(); fout];
                    g.chunks(fout).for_each(|row| add_into(&mut db, row));
                    out.push((b, db));
                }
            }
            Op::Add { a, b } => {
                if needs(*a) {
                    out.push((*a, g.clone()));
                }
                if needs(*b) {
                    out.push((*b, g));
                }
            }
            Op::Elementwise { x, deriv } => {
                let dx = g.iter().zip(deriv).map(|(&gi, &d)| gi * d).collect();
                out.push((*x, dx));
            }
            Op::Sum { x } => {
                out.push((*x, vec![g[0]; nodes[x.0].value.len()]));
            }
            Op::Mean { x } => {
                let len = nodes[x.0].value.len();
                out.push((*x, vec![g[0] / T::of(len as f64); len]));
            }
            Op::L2Normalize { x, norms } => {
                let y = &nodes[i].value;
                let rows = norms.len();
                let d = y.len() / rows.max(1);
                let mut dx = vec![T::zero(); y.len()];
                for r in 0..rows {
                    let (yr, gr) = (&y[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for j in 0..d {
                        dx[r * d + j] = (gr[j] - yr[j] * dot) / norms[r];
                    }
                }
                out.push((*x, dx));
            }
            Op::Reshape { x } => out.push((*x, g)),
            Op::Mse { a, b } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let c = T::of(2.0) * g[0] / T::of(av.len() as f64);
                let da: Vec<T> = av.iter().zip(bv).map(|(&p, &q)| c * (p - q)).collect();
                if needs(*b) {
                    out.push((*b, da.iter().map(|&v| -v).collect()));
                }
                if needs(*a) {
                    out.push((*a, da));
                }
            }
            Op::SoftmaxCe { logits, labels, probs } => {
                let n = labels.len();
                let k = probs.len() / n;
                let c = g[0] / T::of(n as f64);
                let mut dl: Vec<T> = probs.iter().map(|&p| p * c).collect();
                for (r, &l) in labels.iter().enumerate() {
                    dl[r * k + l] -= c;
                }
                out.push((*logits, dl));
            }
        }
        for (v, gv) in out {
            if !self.nodes[v.0].requires_grad {
                continue;
            }
            match &mut grads[v.0] {
                Some(buf) => add_into(buf, &gv),
                slot @ None => *slot = Some(gv),
            }
        }
        Ok(())
    }
}
