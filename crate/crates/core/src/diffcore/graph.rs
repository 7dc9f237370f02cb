//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and whatever the
//! backward pass needs. `backward` walks the tape in reverse, so nodes are
//! always visited after everything that consumed them.

use std::sync::Arc;

use super::tensor::{axpy, dot, norm, Tensor};
use crate::error::{Error, Result};

/// Floor applied inside the cross-entropy logarithm.
pub const CE_LOG_FLOOR: f64 = 1e-12;

/// Norms at or below this are treated as degenerate.
pub const MIN_NORM: f64 = 1e-8;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernels: Var,
        stride: (usize, usize),
        /// Row per output position, each `c_in * kh * kw` long. Empty when
        /// the kernels do not need a gradient.
        patches: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: f64,
    },
    Elu(Var),
    Linear {
        x: Var,
        w: Var,
    },
    Softmax(Var),
    CrossEntropy {
        probs: Var,
        label: usize,
    },
    Cosine {
        a: Var,
        b: Var,
        norm_a: f64,
        norm_b: f64,
    },
    L2Normalize {
        v: Var,
        norm: f64,
    },
    Sum(Var),
    SumSquares(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    AddN(Vec<Var>),
    Reshape(Var),
    MaxOver {
        x: Var,
        argmax: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    MatMulNt(Var, Var),
    MaskedAbsSum {
        x: Var,
        mask: Vec<bool>,
    },
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
    /// Accumulated gradient; only kept for leaves that require it.
    grad: Option<Vec<f64>>,
}

/// A recording of one forward computation.
///
/// Graphs are cheap to create and are meant to be built per forward pass. A
/// graph owns all of its intermediate values, so independent graphs can be
/// evaluated on different threads.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input or parameter.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    /// Adds a leaf without copying its storage.
    pub fn leaf_shared(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Clears accumulated leaf gradients.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Valid (unpadded) strided cross-correlation of a `C_in×H×W` input with
    /// `C_out×C_in×kH×kW` kernels.
    pub fn conv2d_valid(&mut self, input: Var, kernels: Var, stride: (usize, usize)) -> Result<Var> {
        let x = self.value(input);
        let k = self.value(kernels);
        let (xs, ks) = (x.shape(), k.shape());
        if xs.len() != 3 || ks.len() != 4 {
            return Err(Error::Dimension(format!(
                "conv2d expects C×H×W input and O×C×kH×kW kernels, got {xs:?} and {ks:?}"
            )));
        }
        let (c_in, h, w) = (xs[0], xs[1], xs[2]);
        let (c_out, kc, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if kc != c_in {
            return Err(Error::Dimension(format!(
                "kernel expects {kc} input channels, input has {c_in}"
            )));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::Config("conv2d stride must be at least 1".into()));
        }
        if kh > h || kw > w {
            return Err(Error::Dimension(format!(
                "kernel {kh}×{kw} larger than input {h}×{w}"
            )));
        }
        let oh = (h - kh) / stride.0 + 1;
        let ow = (w - kw) / stride.1 + 1;
        let patch_len = c_in * kh * kw;
        let positions = oh * ow;

        let xd = x.data();
        let mut patches = vec![0.0; positions * patch_len];
        for p in 0..positions {
            let (r, c) = (p / ow, p % ow);
            let row = &mut patches[p * patch_len..(p + 1) * patch_len];
            let mut q = 0;
            for ci in 0..c_in {
                for i in 0..kh {
                    let base = ci * h * w + (r * stride.0 + i) * w + c * stride.1;
                    row[q..q + kw].copy_from_slice(&xd[base..base + kw]);
                    q += kw;
                }
            }
        }

        let kd = k.data();
        let mut out = vec![0.0; c_out * positions];
        for o in 0..c_out {
            let filt = &kd[o * patch_len..(o + 1) * patch_len];
            let dst = &mut out[o * positions..(o + 1) * positions];
            for (p, d) in dst.iter_mut().enumerate() {
                *d = dot(filt, &patches[p * patch_len..(p + 1) * patch_len]);
            }
        }
        let keep = self.requires_grad(kernels);
        let value = Tensor::new(vec![c_out, oh, ow], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernels,
                stride,
                patches: if keep { patches } else { Vec::new() },
            },
            &[input, kernels],
        ))
    }

    /// Normalizes over every axis of `x` (shape `C×…`), then applies
    /// per-channel `gain` and `bias` (shape `C`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let xv = self.value(x);
        let channels = *xv.shape().first().ok_or_else(|| {
            Error::Dimension("layer_norm needs at least one axis".into())
        })?;
        for (name, t) in [("gain", self.value(gain)), ("bias", self.value(bias))] {
            if t.len() != channels {
                return Err(Error::Dimension(format!(
                    "layer_norm {name} has {} entries, expected {channels}",
                    t.len()
                )));
            }
        }
        let n = xv.len() as f64;
        let per = xv.len() / channels;
        let mean = xv.data().iter().sum::<f64>() / n;
        let var = xv.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv_std = 1.0 / (var + eps).sqrt();
        let xhat: Vec<f64> = xv.data().iter().map(|v| (v - mean) * inv_std).collect();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut out = vec![0.0; xhat.len()];
        for c in 0..channels {
            for i in c * per..(c + 1) * per {
                out[i] = g[c] * xhat[i] + b[c];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// `x` where positive, `exp(x) - 1` elsewhere.
    pub fn elu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out: Vec<f64> = xv
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { v.exp_m1() })
            .collect();
        let value = Tensor::new(xv.shape().to_vec(), out).expect("same shape");
        self.push(value, Op::Elu(x), &[x])
    }

    /// Matrix-vector product `w · x` for `w: m×n`, `x: n`. No bias.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.shape().len() != 2 || wv.shape()[1] != xv.len() {
            return Err(Error::Dimension(format!(
                "linear: weights {:?} incompatible with input of length {}",
                wv.shape(),
                xv.len()
            )));
        }
        let (m, n) = (wv.shape()[0], wv.shape()[1]);
        let out: Vec<f64> = (0..m)
            .map(|i| dot(&wv.data()[i * n..(i + 1) * n], xv.data()))
            .collect();
        Ok(self.push(Tensor::vector(out), Op::Linear { x, w }, &[x, w]))
    }

    pub fn softmax(&mut self, q: Var) -> Result<Var> {
        let qv = self.value(q);
        if qv.is_empty() {
            return Err(Error::Dimension("softmax of an empty vector".into()));
        }
        if qv.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("softmax input is not finite".into()));
        }
        let value = Tensor::vector(softmax_values(qv.data()));
        Ok(self.push(value, Op::Softmax(q), &[q]))
    }

    /// `-ln(max(probs[label], 1e-12))`
    pub fn cross_entropy(&mut self, probs: Var, label: usize) -> Result<Var> {
        let pv = self.value(probs);
        if label >= pv.len() {
            return Err(Error::Index(format!(
                "label {label} out of range for {} classes",
                pv.len()
            )));
        }
        let p = pv.data()[label].max(CE_LOG_FLOOR);
        Ok(self.push(
            Tensor::scalar(-p.ln()),
            Op::CrossEntropy { probs, label },
            &[probs],
        ))
    }

    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.len() != bv.len() {
            return Err(Error::Dimension(format!(
                "cosine_similarity of lengths {} and {}",
                av.len(),
                bv.len()
            )));
        }
        let (na, nb) = (norm(av.data()), norm(bv.data()));
        if na <= MIN_NORM || nb <= MIN_NORM {
            return Err(Error::Degenerate(format!(
                "cosine_similarity with norms {na:e} and {nb:e}"
            )));
        }
        let c = (dot(av.data(), bv.data()) / (na * nb)).clamp(-1.0, 1.0);
        Ok(self.push(
            Tensor::scalar(c),
            Op::Cosine {
                a,
                b,
                norm_a: na,
                norm_b: nb,
            },
            &[a, b],
        ))
    }

    pub fn l2_normalize(&mut self, v: Var) -> Result<Var> {
        let vv = self.value(v);
        let n = norm(vv.data());
        if n <= MIN_NORM {
            return Err(Error::Degenerate(format!("l2_normalize of norm {n:e}")));
        }
        let out: Vec<f64> = vv.data().iter().map(|x| x / n).collect();
        let value = Tensor::new(vv.shape().to_vec(), out)?;
        Ok(self.push(value, Op::L2Normalize { v, norm: n }, &[v]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let d = self.value(x).data();
        let s = dot(d, d);
        self.push(Tensor::scalar(s), Op::SumSquares(x), &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same_shape(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same_shape(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    fn zip_same_shape(
        &self,
        a: Var,
        b: Var,
        what: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Dimension(format!(
                "{what}: shapes {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let out = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), out)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let xv = self.value(x);
        let out = xv.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(xv.shape().to_vec(), out).expect("same shape");
        self.push(value, Op::Scale(x, factor), &[x])
    }

    /// Elementwise sum of equally shaped tensors, accumulated left to right.
    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Dimension("add_n of nothing".into()))?;
        let shape = self.value(*first).shape().to_vec();
        let mut out = vec![0.0; self.value(*first).len()];
        for &x in xs {
            let xv = self.value(x);
            if xv.shape() != shape.as_slice() {
                return Err(Error::Dimension(format!(
                    "add_n: shapes {shape:?} and {:?}",
                    xv.shape()
                )));
            }
            for (o, v) in out.iter_mut().zip(xv.data()) {
                *o += v;
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::AddN(xs.to_vec()), xs))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Maximum of `x` over the listed positions. Ties go to the earliest
    /// listed position.
    pub fn max_over(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let mut best: Option<(usize, f64)> = None;
        for &i in indices {
            let v = *xv.data().get(i).ok_or_else(|| {
                Error::Index(format!("max_over index {i} beyond length {}", xv.len()))
            })?;
            if best.map_or(true, |(_, b)| v > b) {
                best = Some((i, v));
            }
        }
        let (argmax, v) =
            best.ok_or_else(|| Error::Config("max_over an empty index set".into()))?;
        Ok(self.push(Tensor::scalar(v), Op::MaxOver { x, argmax }, &[x]))
    }

    /// Rows `start..start + rows` of a 2-D tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, rows: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 2 || start + rows > xv.shape()[0] || rows == 0 {
            return Err(Error::Dimension(format!(
                "slice_rows {start}..{} of {:?}",
                start + rows,
                xv.shape()
            )));
        }
        let cols = xv.shape()[1];
        let data = xv.data()[start * cols..(start + rows) * cols].to_vec();
        let value = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(value, Op::SliceRows { x, start }, &[x]))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (as_, bs) = (av.shape(), bv.shape());
        if as_.len() != 2 || bs.len() != 2 || as_[1] != bs[1] {
            return Err(Error::Dimension(format!("matmul_nt of {as_:?} and {bs:?}")));
        }
        let (m, n, k) = (as_[0], bs[0], as_[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = dot(&av.data()[i * k..(i + 1) * k], &bv.data()[j * k..(j + 1) * k]);
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMulNt(a, b), &[a, b]))
    }

    /// Sum of `|x|` over entries where `mask` is set.
    pub fn masked_abs_sum(&mut self, x: Var, mask: Vec<bool>) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.len() {
            return Err(Error::Dimension(format!(
                "mask of length {} for tensor of length {}",
                mask.len(),
                xv.len()
            )));
        }
        let s = xv
            .data()
            .iter()
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|(v, _)| v.abs())
            .sum();
        Ok(self.push(Tensor::scalar(s), Op::MaskedAbsSum { x, mask }, &[x]))
    }

    /// Differentiates a scalar `loss`, adding into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_with(loss, &[1.0])
    }

    /// Vector-Jacobian product: propagates `seed` (shaped like `output`)
    /// back to the leaves.
    pub fn backward_with(&mut self, output: Var, seed: &[f64]) -> Result<()> {
        if seed.len() != self.value(output).len() {
            return Err(Error::Dimension(format!(
                "seed of length {} for output of length {}",
                seed.len(),
                self.value(output).len()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed.to_vec());
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(i, &g, &mut grads)?;
        }
        for (i, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernels,
                stride,
                patches,
            } => {
                let xs = self.value(*input).shape().to_vec();
                let ks = self.value(*kernels).shape().to_vec();
                let (c_in, h, w) = (xs[0], xs[1], xs[2]);
                let (c_out, kh, kw) = (ks[0], ks[2], ks[3]);
                let (oh, ow) = (out.shape()[1], out.shape()[2]);
                let positions = oh * ow;
                let patch_len = c_in * kh * kw;
                let kd = self.value(*kernels).data();
                if self.requires_grad(*kernels) {
                    let gk = slot(grads, *kernels, kd.len());
                    for o in 0..c_out {
                        let row = &mut gk[o * patch_len..(o + 1) * patch_len];
                        for p in 0..positions {
                            let go = g[o * positions + p];
                            if go != 0.0 {
                                axpy(go, &patches[p * patch_len..(p + 1) * patch_len], row);
                            }
                        }
                    }
                }
                if self.requires_grad(*input) {
                    let mut dpatch = vec![0.0; patch_len];
                    let gx = slot(grads, *input, c_in * h * w);
                    for p in 0..positions {
                        dpatch.iter_mut().for_each(|v| *v = 0.0);
                        for o in 0..c_out {
                            let go = g[o * positions + p];
                            if go != 0.0 {
                                axpy(go, &kd[o * patch_len..(o + 1) * patch_len], &mut dpatch);
                            }
                        }
                        let (r, c) = (p / ow, p % ow);
                        let mut q = 0;
                        for ci in 0..c_in {
                            for ki in 0..kh {
                                let base = ci * h * w + (r * stride.0 + ki) * w + c * stride.1;
                                for (dst, src) in gx[base..base + kw].iter_mut().zip(&dpatch[q..q + kw]) {
                                    *dst += src;
                                }
                                q += kw;
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let channels = self.value(*gain).len();
                let per = xhat.len() / channels;
                let gd = self.value(*gain).data();
                if self.requires_grad(*gain) {
                    let gg = slot(grads, *gain, channels);
                    for c in 0..channels {
                        gg[c] += dot(&g[c * per..(c + 1) * per], &xhat[c * per..(c + 1) * per]);
                    }
                }
                if self.requires_grad(*bias) {
                    let gb = slot(grads, *bias, channels);
                    for c in 0..channels {
                        gb[c] += g[c * per..(c + 1) * per].iter().sum::<f64>();
                    }
                }
                if self.requires_grad(*x) {
                    let n = xhat.len() as f64;
                    let mut dxhat = vec![0.0; xhat.len()];
                    for c in 0..channels {
                        for k in c * per..(c + 1) * per {
                            dxhat[k] = g[k] * gd[c];
                        }
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / n;
                    let mean_dx = dot(&dxhat, xhat) / n;
                    let gx = slot(grads, *x, xhat.len());
                    for k in 0..xhat.len() {
                        gx[k] += inv_std * (dxhat[k] - mean_d - xhat[k] * mean_dx);
                    }
                }
            }
            Op::Elu(x) => {
                let gx = slot(grads, *x, out.len());
                for ((d, y), gi) in gx.iter_mut().zip(out.data()).zip(g) {
                    *d += if *y > 0.0 { *gi } else { gi * (y + 1.0) };
                }
            }
            Op::Linear { x, w } => {
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                let n = xv.len();
                if self.requires_grad(*w) {
                    let gw = slot(grads, *w, wv.len());
                    for (r, gi) in g.iter().enumerate() {
                        axpy(*gi, xv, &mut gw[r * n..(r + 1) * n]);
                    }
                }
                if self.requires_grad(*x) {
                    let gx = slot(grads, *x, n);
                    for (r, gi) in g.iter().enumerate() {
                        axpy(*gi, &wv[r * n..(r + 1) * n], gx);
                    }
                }
            }
            Op::Softmax(q) => {
                let y = out.data();
                let s = dot(g, y);
                let gq = slot(grads, *q, y.len());
                for k in 0..y.len() {
                    gq[k] += y[k] * (g[k] - s);
                }
            }
            Op::CrossEntropy { probs, label } => {
                let pv = self.value(*probs).data();
                let p = pv[*label];
                let gp = slot(grads, *probs, pv.len());
                if p > CE_LOG_FLOOR {
                    gp[*label] -= g[0] / p;
                }
            }
            Op::Cosine {
                a,
                b,
                norm_a,
                norm_b,
            } => {
                let c = out.data()[0];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let s = g[0];
                let nab = norm_a * norm_b;
                if self.requires_grad(*a) {
                    let ga = slot(grads, *a, av.len());
                    for k in 0..av.len() {
                        ga[k] += s * (bv[k] / nab - c * av[k] / (norm_a * norm_a));
                    }
                }
                if self.requires_grad(*b) {
                    let gb = slot(grads, *b, bv.len());
                    for k in 0..bv.len() {
                        gb[k] += s * (av[k] / nab - c * bv[k] / (norm_b * norm_b));
                    }
                }
            }
            Op::L2Normalize { v, norm } => {
                let y = out.data();
                let s = dot(y, g);
                let gv = slot(grads, *v, y.len());
                for k in 0..y.len() {
                    gv[k] += (g[k] - y[k] * s) / norm;
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                slot(grads, *x, n).iter_mut().for_each(|d| *d += g[0]);
            }
            Op::SumSquares(x) => {
                let xv = self.value(*x).data();
                let gx = slot(grads, *x, xv.len());
                for (d, v) in gx.iter_mut().zip(xv) {
                    *d += 2.0 * v * g[0];
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.requires_grad(*a) {
                    axpy(1.0, g, slot(grads, *a, g.len()));
                }
                if self.requires_grad(*b) {
                    axpy(sign, g, slot(grads, *b, g.len()));
                }
            }
            Op::Scale(x, factor) => {
                axpy(*factor, g, slot(grads, *x, g.len()));
            }
            Op::AddN(xs) => {
                for x in xs {
                    if self.requires_grad(*x) {
                        axpy(1.0, g, slot(grads, *x, g.len()));
                    }
                }
            }
            Op::Reshape(x) => {
                axpy(1.0, g, slot(grads, *x, g.len()));
            }
            Op::MaxOver { x, argmax } => {
                let n = self.value(*x).len();
                slot(grads, *x, n)[*argmax] += g[0];
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let cols = xv.shape()[1];
                let gx = slot(grads, *x, xv.len());
                axpy(1.0, g, &mut gx[start * cols..start * cols + g.len()]);
            }
            Op::MatMulNt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[0];
                if self.requires_grad(*a) {
                    let bd = bv.data().to_vec();
                    let ga = slot(grads, *a, m * k);
                    for i in 0..m {
                        for j in 0..n {
                            axpy(g[i * n + j], &bd[j * k..(j + 1) * k], &mut ga[i * k..(i + 1) * k]);
                        }
                    }
                }
                if self.requires_grad(*b) {
                    let ad = self.value(*a).data().to_vec();
                    let gb = slot(grads, *b, n * k);
                    for i in 0..m {
                        for j in 0..n {
                            axpy(g[i * n + j], &ad[i * k..(i + 1) * k], &mut gb[j * k..(j + 1) * k]);
                        }
                    }
                }
            }
            Op::MaskedAbsSum { x, mask } => {
                let xv = self.value(*x).data();
                let gx = slot(grads, *x, xv.len());
                for ((d, v), m) in gx.iter_mut().zip(xv).zip(mask) {
                    if *m {
                        *d += g[0] * sign(*v);
                    }
                }
            }
        }
        Ok(())
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

/// Max-shifted softmax of a finite vector.
pub fn softmax_values(q: &[f64]) -> Vec<f64> {
    let m = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = q.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}
