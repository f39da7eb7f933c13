//! Reverse-mode automatic differentiation over batched tensor operations.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s in execution order.
//! [`Tape::backward`] walks the record in reverse, propagating adjoints only through
//! nodes that depend on a tracked leaf.

use crate::error::{Error, Result};
use crate::nn::gemm::{gemm, Op as G};
use crate::nn::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c * self.k * self.k
    }
    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Dense { x: Var, w: Var, b: Var },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, cols: Vec<f64> },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Square(Var),
    Dropout { x: Var, mask: Vec<f64> },
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    SliceCols { x: Var, start: usize },
    Sum(Var),
    Mean(Var),
    Mse { pred: Var, target: Vec<f64> },
    Bce { pred: Var, target: Vec<f64> },
    BceLogits { logits: Var, target: Vec<f64> },
    KlGaussian { mu: Var, logvar: Var, batch: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Gradient tape.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<Var>,
    frozen_params: bool,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape on which parameters never receive gradients; used for input-gradient queries.
    pub fn frozen() -> Self {
        Self {
            frozen_params: true,
            ..Self::default()
        }
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn check_finite(value: &Tensor, what: &str) -> Result<()> {
        if value.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    /// Records an input tensor; it is tracked iff `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let mut value = t.clone();
        value.grad = None;
        let tracked = t.requires_grad;
        self.push(value, Op::Leaf, tracked)
    }

    /// Records an owned input tensor; it is tracked iff `t.requires_grad`.
    pub fn input(&mut self, mut t: Tensor) -> Var {
        t.grad = None;
        let tracked = t.requires_grad;
        self.push(t, Op::Leaf, tracked)
    }

    /// Records a model parameter. Registration order defines [`Tape::param_grads`] order.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let mut value = t.clone();
        value.grad = None;
        let tracked = t.requires_grad && !self.frozen_params;
        let v = self.push(value, Op::Leaf, tracked);
        self.params.push(v);
        v
    }

    /// Records a constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn params(&self) -> &[Var] {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ---- layers -------------------------------------------------------------

    /// `y = x · wᵀ + b` for `x: [n, in]`, `w: [out, in]`, `b: [out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || self.shape(b) != [ws[0]] {
            return Err(Error::shape("dense", "weight [out, in] with bias [out]", &ws));
        }
        let (out, inp) = (ws[0], ws[1]);
        if xs.len() != 2 || xs[1] != inp {
            return Err(Error::shape("dense", format!("[batch, {inp}]"), &xs));
        }
        let n = xs[0];
        let mut y = vec![0.0; n * out];
        let bias = self.value(b).data();
        for row in y.chunks_exact_mut(out) {
            row.copy_from_slice(bias);
        }
        gemm(n, inp, out, 1.0, self.value(x).data(), G::N, self.value(w).data(), G::T, 1.0, &mut y);
        let value = Tensor::new(vec![n, out], y)?;
        Self::check_finite(&value, "dense")?;
        let tracked = self.tracked(x) || self.tracked(w) || self.tracked(b);
        Ok(self.push(value, Op::Dense { x, w, b }, tracked))
    }

    /// 2-D cross-correlation for `x: [n, c, h, w]`, `w: [out_c, c, k, k]`, `b: [out_c]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[2] != ws[3] || self.shape(b) != [ws[0]] {
            return Err(Error::shape("conv2d", "weight [out_c, in_c, k, k] with bias [out_c]", &ws));
        }
        if xs.len() != 4 || xs[1] != ws[1] {
            return Err(Error::shape("conv2d", format!("[batch, {}, h, w]", ws[1]), &xs));
        }
        let k = ws[2];
        if stride == 0 || xs[2] + 2 * pad < k || xs[3] + 2 * pad < k {
            return Err(Error::shape("conv2d", format!("spatial dims >= kernel {k}"), &xs));
        }
        let geom = ConvGeom {
            n: xs[0],
            c: xs[1],
            h: xs[2],
            w: xs[3],
            out_c: ws[0],
            k,
            stride,
            pad,
            oh: (xs[2] + 2 * pad - k) / stride + 1,
            ow: (xs[3] + 2 * pad - k) / stride + 1,
        };
        let (patch, pos, oc) = (geom.patch(), geom.positions(), geom.out_c);
        let keep_cols = self.tracked(w);
        let mut cols = vec![0.0; if keep_cols { geom.n * patch * pos } else { patch * pos }];
        let mut y = vec![0.0; geom.n * oc * pos];
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let sample_in = geom.c * geom.h * geom.w;
        for s in 0..geom.n {
            let cs = if keep_cols { &mut cols[s * patch * pos..(s + 1) * patch * pos] } else { &mut cols[..] };
            im2col(&xd[s * sample_in..(s + 1) * sample_in], &geom, cs);
            let ys = &mut y[s * oc * pos..(s + 1) * oc * pos];
            for (row, &bias) in ys.chunks_exact_mut(pos).zip(bd) {
                row.fill(bias);
            }
            gemm(oc, patch, pos, 1.0, wd, G::N, cs, G::N, 1.0, ys);
        }
        let value = Tensor::new(vec![geom.n, geom.out_c, geom.oh, geom.ow], y)?;
        Self::check_finite(&value, "conv2d")?;
        let tracked = self.tracked(x) || self.tracked(w) || self.tracked(b);
        let cols = if keep_cols { cols } else { Vec::new() };
        Ok(self.push(value, Op::Conv2d { x, w, b, geom, cols }, tracked))
    }

    /// Max pooling over `[n, c, h, w]`; ties route to the first maximal element.
    pub fn maxpool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || kernel == 0 || stride == 0 || xs[2] < kernel || xs[3] < kernel {
            return Err(Error::shape("maxpool2d", format!("[batch, c, h>={kernel}, w>={kernel}]"), &xs));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let oh = (h - kernel) / stride + 1;
        let ow = (w - kernel) / stride + 1;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for di in 0..kernel {
                        for dj in 0..kernel {
                            let idx = base + (i * stride + di) * w + (j * stride + dj);
                            if src[idx] > best {
                                best = src[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx);
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        let tracked = self.tracked(x);
        Ok(self.push(value, Op::MaxPool2d { x, argmax }, tracked))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op, name: &str) -> Result<Var> {
        let value = self.value(x).map(f);
        Self::check_finite(&value, name)?;
        let tracked = self.tracked(x);
        Ok(self.push(value, op, tracked))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.max(0.0), Op::Relu(x), "relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, sigmoid, Op::Sigmoid(x), "sigmoid")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::tanh, Op::Tanh(x), "tanh")
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, f64::exp, Op::Exp(x), "exp")
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v * v, Op::Square(x), "square")
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary(x, |v| v * s, Op::Scale(x, s), "scale")
    }

    pub fn offset(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, |v| v + c, Op::Offset(x), "offset")
    }

    /// Applies a precomputed multiplicative mask (already scaled by the keep-probability).
    pub fn dropout_mask(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(Error::shape("dropout", format!("mask of {} values", mask.len()), self.shape(x)));
        }
        let data = self.value(x).data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let tracked = self.tracked(x);
        Ok(self.push(value, Op::Dropout { x, mask }, tracked))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self
            .value(x)
            .reshape(shape)
            .map_err(|_| Error::shape("reshape", format!("{shape:?}"), self.shape(x)))?;
        let tracked = self.tracked(x);
        Ok(self.push(value, Op::Reshape(x), tracked))
    }

    /// Collapses every axis after the first.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let shape = [t.batch_len(), t.sample_len()];
        self.reshape(x, &shape)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op, name: &str) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(name, format!("{:?}", self.shape(a)), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Self::check_finite(&value, name)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, op, tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    /// Columns `start..start + len` of a `[n, d]` matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || start + len > xs[1] {
            return Err(Error::shape("slice_cols", format!("[n, >= {}]", start + len), &xs));
        }
        let d = xs[1];
        let src = self.value(x).data();
        let data: Vec<f64> = (0..xs[0]).flat_map(|i| src[i * d + start..i * d + start + len].iter().copied()).collect();
        let value = Tensor::new(vec![xs[0], len], data)?;
        let tracked = self.tracked(x);
        Ok(self.push(value, Op::SliceCols { x, start }, tracked))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let tracked = self.tracked(x);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), tracked))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let tracked = self.tracked(x);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), tracked))
    }

    // ---- losses -------------------------------------------------------------

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(Error::shape("mse", format!("{:?}", target.shape()), p.shape()));
        }
        let loss = mse_value(p.data(), target.data());
        let tracked = self.tracked(pred);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse {
                pred,
                target: target.data().to_vec(),
            },
            tracked,
        ))
    }

    /// Mean binary cross-entropy of probabilities in (0, 1).
    pub fn bce(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(Error::shape("bce", format!("{:?}", target.shape()), p.shape()));
        }
        let loss = bce_value(p.data(), target.data())?;
        let tracked = self.tracked(pred);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                pred,
                target: target.data().to_vec(),
            },
            tracked,
        ))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)`, evaluated stably.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor) -> Result<Var> {
        let z = self.value(logits);
        if z.shape() != target.shape() {
            return Err(Error::shape("bce_with_logits", format!("{:?}", target.shape()), z.shape()));
        }
        let n = z.len() as f64;
        let loss = z
            .data()
            .iter()
            .zip(target.data())
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        let tracked = self.tracked(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceLogits {
                logits,
                target: target.data().to_vec(),
            },
            tracked,
        ))
    }

    /// `KL(N(mu, exp(logvar)) ‖ N(0, I))`, summed over code dimensions and averaged over the batch.
    pub fn kl_gaussian(&mut self, mu: Var, logvar: Var) -> Result<Var> {
        if self.shape(mu) != self.shape(logvar) {
            return Err(Error::shape("kl_gaussian", format!("{:?}", self.shape(mu)), self.shape(logvar)));
        }
        let batch = if self.value(mu).rank() >= 2 { self.value(mu).batch_len() } else { 1 };
        let loss = kl_value(self.value(mu).data(), self.value(logvar).data()) / batch as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite("kl_gaussian".into()));
        }
        let tracked = self.tracked(mu) || self.tracked(logvar);
        Ok(self.push(Tensor::scalar(loss), Op::KlGaussian { mu, logvar, batch }, tracked))
    }

    // ---- backward -----------------------------------------------------------

    /// Propagates d loss / d node to every tracked node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss).to_vec();
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last `backward` loss with respect to `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Parameter gradients in registration order; untracked or unreached parameters get zeros.
    pub fn param_grads(&self) -> Vec<Vec<f64>> {
        self.params
            .iter()
            .map(|&p| self.grad(p).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; self.value(p).len()]))
            .collect()
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].tracked {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Dense { x, w, b } => {
                let ws = self.shape(*w);
                let (out, inp) = (ws[0], ws[1]);
                let n = self.shape(*x)[0];
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                acc(*x, &|dx| gemm(n, out, inp, 1.0, g, G::N, wv, G::N, 1.0, dx));
                acc(*w, &|dw| gemm(out, n, inp, 1.0, g, G::T, xv, G::N, 1.0, dw));
                acc(*b, &|db| {
                    for row in g.chunks_exact(out) {
                        db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                    }
                });
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let (patch, pos, oc) = (geom.patch(), geom.positions(), geom.out_c);
                let sample_in = geom.c * geom.h * geom.w;
                let wv = self.value(*w).data();
                acc(*w, &|dw| {
                    for (gs, cs) in g.chunks_exact(oc * pos).zip(cols.chunks_exact(patch * pos)) {
                        gemm(oc, pos, patch, 1.0, gs, G::N, cs, G::T, 1.0, dw);
                    }
                });
                acc(*b, &|db| {
                    for (i, row) in g.chunks_exact(pos).enumerate() {
                        db[i % oc] += row.iter().sum::<f64>();
                    }
                });
                acc(*x, &|dx| {
                    let mut dcols = vec![0.0; patch * pos];
                    for (gs, dxs) in g.chunks_exact(oc * pos).zip(dx.chunks_exact_mut(sample_in)) {
                        gemm(patch, oc, pos, 1.0, wv, G::T, gs, G::N, 0.0, &mut dcols);
                        col2im_add(&dcols, geom, dxs);
                    }
                });
            }
            Op::MaxPool2d { x, argmax } => acc(*x, &|dx| {
                for (gi, &src) in g.iter().zip(argmax) {
                    dx[src] += gi;
                }
            }),
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                acc(*x, &|dx| {
                    for ((d, gi), xi) in dx.iter_mut().zip(g).zip(xv) {
                        if *xi > 0.0 {
                            *d += gi;
                        }
                    }
                })
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                acc(*x, &|dx| {
                    for ((d, gi), yi) in dx.iter_mut().zip(g).zip(y) {
                        *d += gi * yi * (1.0 - yi);
                    }
                })
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                acc(*x, &|dx| {
                    for ((d, gi), yi) in dx.iter_mut().zip(g).zip(y) {
                        *d += gi * (1.0 - yi * yi);
                    }
                })
            }
            Op::Exp(x) => {
                let y = node.value.data();
                acc(*x, &|dx| dx.iter_mut().zip(g).zip(y).for_each(|((d, gi), yi)| *d += gi * yi))
            }
            Op::Square(x) => {
                let xv = self.value(*x).data();
                acc(*x, &|dx| dx.iter_mut().zip(g).zip(xv).for_each(|((d, gi), xi)| *d += 2.0 * gi * xi))
            }
            Op::Dropout { x, mask } => {
                acc(*x, &|dx| dx.iter_mut().zip(g).zip(mask).for_each(|((d, gi), m)| *d += gi * m))
            }
            Op::Reshape(x) | Op::Offset(x) => acc(*x, &|dx| dx.iter_mut().zip(g).for_each(|(d, gi)| *d += gi)),
            Op::Scale(x, s) => acc(*x, &|dx| dx.iter_mut().zip(g).for_each(|(d, gi)| *d += gi * s)),
            Op::Add(a, b) => {
                acc(*a, &|da| da.iter_mut().zip(g).for_each(|(d, gi)| *d += gi));
                acc(*b, &|db| db.iter_mut().zip(g).for_each(|(d, gi)| *d += gi));
            }
            Op::Sub(a, b) => {
                acc(*a, &|da| da.iter_mut().zip(g).for_each(|(d, gi)| *d += gi));
                acc(*b, &|db| db.iter_mut().zip(g).for_each(|(d, gi)| *d -= gi));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                acc(*a, &|da| da.iter_mut().zip(g).zip(bv).for_each(|((d, gi), y)| *d += gi * y));
                acc(*b, &|db| db.iter_mut().zip(g).zip(av).for_each(|((d, gi), y)| *d += gi * y));
            }
            Op::SliceCols { x, start } => {
                let d = self.shape(*x)[1];
                let len = node.value.shape()[1];
                acc(*x, &|dx| {
                    for (i, row) in g.chunks_exact(len).enumerate() {
                        dx[i * d + start..i * d + start + len]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(a, r)| *a += r);
                    }
                })
            }
            Op::Sum(x) => acc(*x, &|dx| dx.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                acc(*x, &|dx| dx.iter_mut().for_each(|d| *d += g[0] / n))
            }
            Op::Mse { pred, target } => {
                let p = self.value(*pred).data();
                let n = p.len() as f64;
                acc(*pred, &|dp| {
                    for ((d, pi), ti) in dp.iter_mut().zip(p).zip(target) {
                        *d += g[0] * 2.0 * (pi - ti) / n;
                    }
                })
            }
            Op::Bce { pred, target } => {
                let p = self.value(*pred).data();
                let n = p.len() as f64;
                acc(*pred, &|dp| {
                    for ((d, pi), ti) in dp.iter_mut().zip(p).zip(target) {
                        *d += g[0] * (pi - ti) / (pi * (1.0 - pi)) / n;
                    }
                })
            }
            Op::BceLogits { logits, target } => {
                let z = self.value(*logits).data();
                let n = z.len() as f64;
                acc(*logits, &|dz| {
                    for ((d, zi), ti) in dz.iter_mut().zip(z).zip(target) {
                        *d += g[0] * (sigmoid(*zi) - ti) / n;
                    }
                })
            }
            Op::KlGaussian { mu, logvar, batch } => {
                let m = self.value(*mu).data();
                let lv = self.value(*logvar).data();
                let scale = g[0] / *batch as f64;
                acc(*mu, &|d| d.iter_mut().zip(m).for_each(|(d, mi)| *d += scale * mi));
                acc(*logvar, &|d| {
                    d.iter_mut()
                        .zip(lv)
                        .for_each(|(d, l)| *d += scale * 0.5 * (l.exp() - 1.0))
                });
            }
        }
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn mse_value(pred: &[f64], target: &[f64]) -> f64 {
    pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len().max(1) as f64
}

pub(crate) fn bce_value(pred: &[f64], target: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for (&p, &t) in pred.iter().zip(target) {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::invalid(format!(
                "bce expects probabilities strictly inside (0, 1), got {p}; apply sigmoid first"
            )));
        }
        total -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
    }
    Ok(total / pred.len().max(1) as f64)
}

pub(crate) fn kl_value(mu: &[f64], logvar: &[f64]) -> f64 {
    -0.5 * mu
        .iter()
        .zip(logvar)
        .map(|(m, l)| 1.0 + l - m * m - l.exp())
        .sum::<f64>()
}

/// Unfolds one `[c, h, w]` sample into a `[c·k·k, oh·ow]` patch matrix.
fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let pos = g.positions();
    let plane = g.h * g.w;
    cols.fill(0.0);
    for_each_patch_row(g, |t, c, ki, kj, lo, hi| {
        let dst = &mut cols[t * pos..(t + 1) * pos];
        for oi in 0..g.oh {
            let Some(ii) = (oi * g.stride + ki).checked_sub(g.pad).filter(|&ii| ii < g.h) else { continue };
            let src = &x[c * plane + ii * g.w..c * plane + (ii + 1) * g.w];
            let d = &mut dst[oi * g.ow..(oi + 1) * g.ow];
            if g.stride == 1 {
                let j0 = lo + kj - g.pad;
                d[lo..hi].copy_from_slice(&src[j0..j0 + hi - lo]);
            } else {
                for oj in lo..hi {
                    d[oj] = src[oj * g.stride + kj - g.pad];
                }
            }
        }
    });
}

fn col2im_add(dcols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let pos = g.positions();
    let plane = g.h * g.w;
    for_each_patch_row(g, |t, c, ki, kj, lo, hi| {
        let src = &dcols[t * pos..(t + 1) * pos];
        for oi in 0..g.oh {
            let Some(ii) = (oi * g.stride + ki).checked_sub(g.pad).filter(|&ii| ii < g.h) else { continue };
            let d = &mut dx[c * plane + ii * g.w..c * plane + (ii + 1) * g.w];
            let s = &src[oi * g.ow..(oi + 1) * g.ow];
            for oj in lo..hi {
                d[oj * g.stride + kj - g.pad] += s[oj];
            }
        }
    });
}

/// Visits every patch row `t = (c·k + ki)·k + kj` with the output column range
/// `lo..hi` whose input column lies inside the image.
fn for_each_patch_row(g: &ConvGeom, mut f: impl FnMut(usize, usize, usize, usize, usize, usize)) {
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let lo = g.pad.saturating_sub(kj).div_ceil(g.stride);
                let hi = if g.w + g.pad > kj { ((g.w + g.pad - kj - 1) / g.stride + 1).min(g.ow) } else { 0 };
                f((c * g.k + ki) * g.k + kj, c, ki, kj, lo, hi.max(lo));
            }
        }
    }
}
