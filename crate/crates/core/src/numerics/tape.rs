//! Reverse-mode automatic differentiation over a linear recording.
//!
//! Every op appends one node holding its output value and whatever it needs
//! for the backward rule. `backward` walks the nodes in reverse once; a tape
//! must be re-recorded (or [`Tape::reset`]) before another backward pass.

use std::fmt;

use super::linalg::gemm;
use super::tensor::Tensor;
use crate::error::{bail, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for [`Tape::custom`]: receives the input values and the
/// output gradient, returns one gradient buffer per input.
pub type CustomBackward = Box<dyn Fn(&[&Tensor], &[f64]) -> Vec<Vec<f64>>>;

/// Running statistics returned by a batch-statistics BatchNorm forward.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// GELU constants of the tanh formulation: sqrt(2/pi) and the cubic coefficient.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
pub const GELU_CUBIC: f64 = 0.044_715;

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, a_t: bool, b_t: bool, m: usize, k: usize, n: usize, batch: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBroadcast { a: Var, b: Var },
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    LayerNorm { x: Var, scale: Var, offset: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    BatchNorm { x: Var, scale: Var, offset: Var, xhat: Vec<f64>, rstd: Vec<f64>, batch_stats: bool },
    GroupNorm { x: Var, scale: Var, offset: Var, groups: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, smoothing: f64, probs: Vec<f64>, per_row: f64 },
    Im2col { x: Var, geom: ConvGeom },
    Reshape(Var),
    Gather { x: Var, index: Vec<usize> },
    Concat { a: Var, b: Var, outer: usize, a_len: usize, b_len: usize },
    MeanAxis { x: Var, outer: usize, len: usize, inner: usize },
    Expand { x: Var, copies: usize },
    Sum(Var),
    Custom { inputs: Vec<Var>, backward: CustomBackward },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Convolution window geometry for channels-last `[b, h, w, c]` inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
    requires: Vec<bool>,
}

impl Gradients {
    /// Gradient of a requires-grad leaf; zeros when the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<Tensor> {
        let i = var.0;
        if i >= self.grads.len() || !self.requires[i] {
            return None;
        }
        let shape = self.shapes[i].clone();
        Some(match &self.grads[i] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        })
    }

    /// Moves a gradient out without copying.
    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        let i = var.0;
        if i >= self.grads.len() || !self.requires[i] {
            return None;
        }
        let shape = self.shapes[i].clone();
        Some(match self.grads[i].take() {
            Some(g) => Tensor::from_parts(shape, g),
            None => Tensor::zeros(&shape),
        })
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).field("consumed", &self.consumed).finish()
    }
}

fn check_var(tape: &Tape, v: Var) -> Result<()> {
    if v.0 >= tape.nodes.len() {
        bail!(Tape, "variable {} is not on this tape", v.0);
    }
    Ok(())
}

fn acc(slot: &mut Option<Vec<f64>>, contrib: Vec<f64>) {
    match slot {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(contrib) {
                *a += b;
            }
        }
        None => *slot = Some(contrib),
    }
}

fn acc_with(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let g = slot.get_or_insert_with(|| vec![0.0; len]);
    f(g);
}

/// Welford mean and population variance; exact on constant input.
fn moments(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut n, mut mean, mut m2) = (0.0, 0.0, 0.0);
    for v in values {
        n += 1.0;
        let d = v - mean;
        mean += d / n;
        m2 += d * (v - mean);
    }
    (mean, m2 / n)
}

fn split3(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node so the tape can record a fresh forward pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn checked(&self, vars: &[Var]) -> Result<()> {
        vars.iter().try_for_each(|&v| check_var(self, v))
    }

    // ---------------------------------------------------------------- linear algebra

    /// `[m, k] · [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// 2-D product with optional transposition of either operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, a_t: bool, b_t: bool) -> Result<Var> {
        self.checked(&[a, b])?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            bail!(Dimension, "matmul expects 2-D operands, got {:?} and {:?}", sa, sb);
        }
        let (m, k) = if a_t { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if b_t { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            bail!(Dimension, "matmul inner dimensions {} and {} differ", k, k2);
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), a_t, self.value(b).data(), b_t, &mut out, 0.0);
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul { a, b, a_t, b_t, m, k, n, batch: 1 },
            rg,
        ))
    }

    /// Batched product over the leading axis of two rank-3 tensors.
    pub fn bmm(&mut self, a: Var, b: Var, a_t: bool, b_t: bool) -> Result<Var> {
        self.checked(&[a, b])?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            bail!(Dimension, "bmm expects [b, m, k] x [b, k, n], got {:?} and {:?}", sa, sb);
        }
        let batch = sa[0];
        let (m, k) = if a_t { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if b_t { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != k2 {
            bail!(Dimension, "bmm inner dimensions {} and {} differ", k, k2);
        }
        let mut out = vec![0.0; batch * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    a_t,
                    &bv[i * k * n..(i + 1) * k * n],
                    b_t,
                    &mut out[i * m * n..(i + 1) * m * n],
                    0.0,
                );
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::from_parts(vec![batch, m, n], out),
            Op::MatMul { a, b, a_t, b_t, m, k, n, batch },
            rg,
        ))
    }

    // ---------------------------------------------------------------- elementwise

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.checked(&[a, b])?;
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            bail!(Dimension, "{} of {:?} and {:?}", name, va.shape(), vb.shape());
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(va.shape().to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    /// Adds `b` to every trailing block of `a`; `b`'s shape must be a suffix of `a`'s.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        self.checked(&[a, b])?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            bail!(Dimension, "cannot broadcast {:?} onto {:?}", sb, sa);
        }
        let bv = self.value(b).data();
        let m = bv.len();
        let data = self.value(a).data().iter().enumerate().map(|(i, &x)| x + bv[i % m]).collect();
        let v = Tensor::from_parts(sa.to_vec(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::AddBroadcast { a, b }, rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        check_var(self, a)?;
        let v = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Scale(a, c), rg))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        check_var(self, a)?;
        let v = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Relu(a), rg))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        check_var(self, a)?;
        let v = self.value(a).map(|x| 0.5 * x * (1.0 + (GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh()));
        let rg = self.rg(&[a]);
        Ok(self.push(v, Op::Gelu(a), rg))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        check_var(self, x)?;
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            bail!(Index, "softmax axis {} for rank {}", axis, shape.len());
        }
        let (outer, len, inner) = split3(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| (o * len + i) * inner + j;
                let max = (0..len).map(|i| src[at(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for i in 0..len {
                    let e = (src[at(i)] - max).exp();
                    out[at(i)] = e;
                    total += e;
                }
                for i in 0..len {
                    out[at(i)] /= total;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { x, outer, len, inner }, rg))
    }

    // ---------------------------------------------------------------- normalization

    /// Per-row normalization over the last axis followed by an affine map.
    pub fn layer_norm(&mut self, x: Var, scale: Var, offset: Var, eps: f64) -> Result<Var> {
        self.checked(&[x, scale, offset])?;
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        if self.shape(scale) != [d] || self.shape(offset) != [d] {
            bail!(Dimension, "layer_norm over {} features with scale {:?} / offset {:?}", d, self.shape(scale), self.shape(offset));
        }
        let src = self.value(x).data();
        let (g, b) = (self.value(scale).data(), self.value(offset).data());
        let rows = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let (mean, var) = moments(row.iter().copied());
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for i in 0..d {
                let h = (row[i] - mean) * rs;
                xhat[r * d + i] = h;
                out[r * d + i] = g[i] * h + b[i];
            }
        }
        let rg = self.rg(&[x, scale, offset]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::LayerNorm { x, scale, offset, xhat, rstd }, rg))
    }

    /// BatchNorm over every axis but the last (channels-last).
    ///
    /// With `use_batch_stats` the batch moments normalize the input and the
    /// returned running statistics are `momentum * old + (1 - momentum) * batch`;
    /// otherwise the running statistics normalize and are returned unchanged.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        scale: Var,
        offset: Var,
        running_mean: &[f64],
        running_var: &[f64],
        use_batch_stats: bool,
        momentum: f64,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        self.checked(&[x, scale, offset])?;
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap();
        if self.shape(scale) != [c] || self.shape(offset) != [c] || running_mean.len() != c || running_var.len() != c {
            bail!(Dimension, "batch_norm over {} channels with mismatched parameter lengths", c);
        }
        if use_batch_stats && shape.len() > 1 && shape[0] == 1 {
            bail!(Numeric, "degenerate variance: batch statistics from a batch of size 1");
        }
        let src = self.value(x).data();
        let m = src.len() / c;
        if use_batch_stats && m < 2 {
            bail!(Numeric, "degenerate variance: batch statistics from {} value(s) per channel", m);
        }
        let (mean, var) = if use_batch_stats {
            (0..c).map(|ch| moments(src[ch..].iter().step_by(c).copied())).unzip()
        } else {
            (running_mean.to_vec(), running_var.to_vec())
        };
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (g, b) = (self.value(scale).data(), self.value(offset).data());
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        for (i, v) in src.iter().enumerate() {
            let ch = i % c;
            let h = (v - mean[ch]) * rstd[ch];
            xhat[i] = h;
            out[i] = g[ch] * h + b[ch];
        }
        let stats = if use_batch_stats {
            BatchStats {
                mean: running_mean.iter().zip(&mean).map(|(o, n)| momentum * o + (1.0 - momentum) * n).collect(),
                var: running_var.iter().zip(&var).map(|(o, n)| momentum * o + (1.0 - momentum) * n).collect(),
            }
        } else {
            BatchStats { mean: running_mean.to_vec(), var: running_var.to_vec() }
        };
        let rg = self.rg(&[x, scale, offset]);
        let v = self.push(
            Tensor::from_parts(shape, out),
            Op::BatchNorm { x, scale, offset, xhat, rstd, batch_stats: use_batch_stats },
            rg,
        );
        Ok((v, stats))
    }

    /// Per-sample normalization over channel groups (and all spatial positions)
    /// of a channels-last `[b, ..., c]` input.
    pub fn group_norm(&mut self, x: Var, scale: Var, offset: Var, groups: usize, eps: f64) -> Result<Var> {
        self.checked(&[x, scale, offset])?;
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap();
        if groups == 0 || c % groups != 0 {
            bail!(Dimension, "{} channels are not divisible into {} groups", c, groups);
        }
        if self.shape(scale) != [c] || self.shape(offset) != [c] {
            bail!(Dimension, "group_norm over {} channels with mismatched parameter lengths", c);
        }
        let src = self.value(x).data();
        let batch = shape[0];
        let spatial = src.len() / (batch * c);
        let cg = c / groups;
        let (g, b) = (self.value(scale).data(), self.value(offset).data());
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        let mut rstd = vec![0.0; batch * groups];
        for n in 0..batch {
            let base = n * spatial * c;
            for gi in 0..groups {
                let idx = |s: usize, j: usize| base + s * c + gi * cg + j;
                let (mean, var) = moments((0..spatial).flat_map(|s| (0..cg).map(move |j| (s, j))).map(|(s, j)| src[idx(s, j)]));
                let rs = 1.0 / (var + eps).sqrt();
                rstd[n * groups + gi] = rs;
                for s in 0..spatial {
                    for j in 0..cg {
                        let i = idx(s, j);
                        let h = (src[i] - mean) * rs;
                        xhat[i] = h;
                        out[i] = g[gi * cg + j] * h + b[gi * cg + j];
                    }
                }
            }
        }
        let rg = self.rg(&[x, scale, offset]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::GroupNorm { x, scale, offset, groups, xhat, rstd }, rg))
    }

    // ---------------------------------------------------------------- losses

    /// Mean label-smoothed cross-entropy of `[b, c]` logits.
    ///
    /// The target puts `1 - smoothing` on the label plus `smoothing / c` on every class.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], smoothing: f64) -> Result<Var> {
        let rows = self.shape(logits).first().copied().unwrap_or(0);
        self.cross_entropy_impl(logits, labels, smoothing, 1.0 / rows.max(1) as f64)
    }

    /// Summed (not averaged) unsmoothed cross-entropy, used for input gradients.
    pub fn cross_entropy_sum(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.cross_entropy_impl(logits, labels, 0.0, 1.0)
    }

    fn cross_entropy_impl(&mut self, logits: Var, labels: &[usize], smoothing: f64, per_row: f64) -> Result<Var> {
        check_var(self, logits)?;
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            bail!(Dimension, "cross_entropy of logits {:?} with {} labels", shape, labels.len());
        }
        if !(0.0..1.0).contains(&smoothing) {
            bail!(Contract, "label smoothing {} outside [0, 1)", smoothing);
        }
        let (b, c) = (shape[0], shape[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            bail!(Index, "label {} outside 0..{}", bad, c);
        }
        let src = self.value(logits).data();
        if !src.iter().all(|v| v.is_finite()) {
            bail!(Numeric, "non-finite logits");
        }
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        let off = smoothing / c as f64;
        for r in 0..b {
            let row = &src[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for j in 0..c {
                let logp = row[j] - lse;
                probs[r * c + j] = logp.exp();
                let q = if j == labels[r] { 1.0 - smoothing + off } else { off };
                loss -= q * logp;
            }
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss * per_row),
            Op::CrossEntropy { logits, targets: labels.to_vec(), smoothing, probs, per_row },
            rg,
        ))
    }

    // ---------------------------------------------------------------- layout

    /// Unfolds `[b, h, w, c]` into rows of `kernel x kernel x c` windows,
    /// giving `[b * oh * ow, kernel * kernel * c]` with zero padding.
    pub fn im2col(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        check_var(self, x)?;
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            bail!(Dimension, "im2col expects [b, h, w, c], got {:?}", s);
        }
        if kernel == 0 || stride == 0 || s[1] + 2 * pad < kernel || s[2] + 2 * pad < kernel {
            bail!(Dimension, "window {} stride {} pad {} does not fit {:?}", kernel, stride, pad, s);
        }
        let geom = ConvGeom { batch: s[0], height: s[1], width: s[2], channels: s[3], kernel, stride, pad };
        let (oh, ow, pl) = (geom.out_height(), geom.out_width(), geom.patch_len());
        let src = self.value(x).data();
        let mut out = vec![0.0; geom.batch * oh * ow * pl];
        for_each_window(&geom, |row, col, src_idx| out[row * pl + col] = src[src_idx]);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(vec![geom.batch * oh * ow, pl], out), Op::Im2col { x, geom }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        check_var(self, x)?;
        let v = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        check_var(self, x)?;
        let s = self.shape(x).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            bail!(Index, "invalid permutation {:?} for rank {}", perm, s.len());
        }
        let mut in_strides = vec![1usize; s.len()];
        for i in (0..s.len().saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * s[i + 1];
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let n: usize = s.iter().product();
        let mut index = Vec::with_capacity(n);
        let mut counter = vec![0usize; s.len()];
        let mut offset = 0usize;
        for _ in 0..n {
            index.push(offset);
            for ax in (0..s.len()).rev() {
                counter[ax] += 1;
                offset += strides[ax];
                if counter[ax] < out_shape[ax] {
                    break;
                }
                offset -= strides[ax] * counter[ax];
                counter[ax] = 0;
            }
        }
        self.gather(x, out_shape, index)
    }

    /// Elements `start..end` of `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        check_var(self, x)?;
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start >= end || end > s[axis] {
            bail!(Index, "slice {}..{} of axis {} in {:?}", start, end, axis, s);
        }
        let (outer, len, inner) = split3(&s, axis);
        let take = end - start;
        let mut index = Vec::with_capacity(outer * take * inner);
        for o in 0..outer {
            for i in start..end {
                let base = (o * len + i) * inner;
                index.extend(base..base + inner);
            }
        }
        let mut shape = s;
        shape[axis] = take;
        self.gather(x, shape, index)
    }

    fn gather(&mut self, x: Var, shape: Vec<usize>, index: Vec<usize>) -> Result<Var> {
        let src = self.value(x).data();
        let data = index.iter().map(|&i| src[i]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Gather { x, index }, rg))
    }

    /// Joins two tensors along `axis`; all other axes must agree.
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        self.checked(&[a, b])?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let same_rest = sa.len() == sb.len()
            && axis < sa.len()
            && sa.iter().zip(&sb).enumerate().all(|(i, (x, y))| i == axis || x == y);
        if !same_rest {
            bail!(Dimension, "concat along {} of {:?} and {:?}", axis, sa, sb);
        }
        let (outer, _, inner) = split3(&sa, axis);
        let (a_len, b_len) = (sa[axis] * inner, sb[axis] * inner);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for o in 0..outer {
            data.extend_from_slice(&av[o * a_len..(o + 1) * a_len]);
            data.extend_from_slice(&bv[o * b_len..(o + 1) * b_len]);
        }
        let mut shape = sa;
        shape[axis] += sb[axis];
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Concat { a, b, outer, a_len, b_len }, rg))
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        check_var(self, x)?;
        let s = self.shape(x).to_vec();
        if axis >= s.len() || s.len() < 2 {
            bail!(Index, "mean over axis {} of {:?}", axis, s);
        }
        let (outer, len, inner) = split3(&s, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..len {
                let base = (o * len + i) * inner;
                for j in 0..inner {
                    out[o * inner + j] += src[base + j];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= len as f64);
        let mut shape = s;
        shape.remove(axis);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::MeanAxis { x, outer, len, inner }, rg))
    }

    /// Repeats `x` along a new leading axis of length `copies`.
    pub fn expand(&mut self, x: Var, copies: usize) -> Result<Var> {
        check_var(self, x)?;
        if copies == 0 {
            bail!(Dimension, "expand to zero copies");
        }
        let v = self.value(x);
        let mut shape = vec![copies];
        shape.extend_from_slice(v.shape());
        let data = v.data().repeat(copies);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Expand { x, copies }, rg))
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        check_var(self, x)?;
        let total = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(total), Op::Sum(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Records an op with a caller-supplied value and backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, backward: CustomBackward) -> Result<Var> {
        self.checked(inputs)?;
        let rg = self.rg(inputs);
        Ok(self.push(value, Op::Custom { inputs: inputs.to_vec(), backward }, rg))
    }

    // ---------------------------------------------------------------- backward

    /// Propagates d`loss` to every requires-grad node recorded before it.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        check_var(self, loss)?;
        if self.consumed {
            bail!(Tape, "backward already ran on this recording; re-record before calling it again");
        }
        if self.value(loss).numel() != 1 {
            bail!(Contract, "backward needs a scalar loss, got shape {:?}", self.shape(loss));
        }
        self.consumed = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let requires = self.nodes.iter().map(|n| matches!(n.op, Op::Leaf) && n.requires_grad).collect();
        Ok(Gradients { grads, shapes, requires })
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, a_t, b_t, m, k, n, batch } => {
                let (av, bv) = (val(a), val(b));
                if rg(a) {
                    let mut da = vec![0.0; batch * m * k];
                    for t in 0..batch {
                        let gt = &g[t * m * n..(t + 1) * m * n];
                        let bt = &bv[t * k * n..(t + 1) * k * n];
                        let out = &mut da[t * m * k..(t + 1) * m * k];
                        if a_t {
                            // A stored [k, m]: dA = op(B) · Gᵀ
                            gemm(k, n, m, bt, b_t, gt, true, out, 0.0);
                        } else {
                            gemm(m, n, k, gt, false, bt, !b_t, out, 0.0);
                        }
                    }
                    acc(&mut grads[a.0], da);
                }
                if rg(b) {
                    let mut db = vec![0.0; batch * k * n];
                    for t in 0..batch {
                        let gt = &g[t * m * n..(t + 1) * m * n];
                        let at = &av[t * m * k..(t + 1) * m * k];
                        let out = &mut db[t * k * n..(t + 1) * k * n];
                        if b_t {
                            // B stored [n, k]: dB = Gᵀ · op(A)
                            gemm(n, m, k, gt, true, at, a_t, out, 0.0);
                        } else {
                            gemm(k, m, n, at, !a_t, gt, false, out, 0.0);
                        }
                    }
                    acc(&mut grads[b.0], db);
                }
            }
            &Op::Add(a, b) => {
                if rg(a) {
                    acc(&mut grads[a.0], g.to_vec());
                }
                if rg(b) {
                    acc(&mut grads[b.0], g.to_vec());
                }
            }
            &Op::Sub(a, b) => {
                if rg(a) {
                    acc(&mut grads[a.0], g.to_vec());
                }
                if rg(b) {
                    acc(&mut grads[b.0], g.iter().map(|v| -v).collect());
                }
            }
            &Op::Mul(a, b) => {
                if rg(a) {
                    acc(&mut grads[a.0], g.iter().zip(val(b)).map(|(x, y)| x * y).collect());
                }
                if rg(b) {
                    acc(&mut grads[b.0], g.iter().zip(val(a)).map(|(x, y)| x * y).collect());
                }
            }
            &Op::AddBroadcast { a, b } => {
                if rg(a) {
                    acc(&mut grads[a.0], g.to_vec());
                }
                if rg(b) {
                    let m = val(b).len();
                    acc_with(&mut grads[b.0], m, |db| {
                        for (j, v) in g.iter().enumerate() {
                            db[j % m] += v;
                        }
                    });
                }
            }
            &Op::Scale(a, c) => {
                if rg(a) {
                    acc(&mut grads[a.0], g.iter().map(|v| v * c).collect());
                }
            }
            &Op::Relu(a) => {
                if rg(a) {
                    acc(&mut grads[a.0], g.iter().zip(val(a)).map(|(d, &x)| if x > 0.0 { *d } else { 0.0 }).collect());
                }
            }
            &Op::Gelu(a) => {
                if rg(a) {
                    let d = g
                        .iter()
                        .zip(val(a))
                        .map(|(d, &x)| {
                            let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
                            let t = u.tanh();
                            let du = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
                            d * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                        })
                        .collect();
                    acc(&mut grads[a.0], d);
                }
            }
            &Op::Softmax { x, outer, len, inner } => {
                if rg(x) {
                    let y = node.value.data();
                    let mut dx = vec![0.0; y.len()];
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |i: usize| (o * len + i) * inner + j;
                            let dot: f64 = (0..len).map(|i| g[at(i)] * y[at(i)]).sum();
                            for i in 0..len {
                                dx[at(i)] = y[at(i)] * (g[at(i)] - dot);
                            }
                        }
                    }
                    acc(&mut grads[x.0], dx);
                }
            }
            Op::LayerNorm { x, scale, offset, xhat, rstd } => {
                let d = val(*scale).len();
                let rows = rstd.len();
                if rg(*scale) || rg(*offset) {
                    let mut ds = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for (idx, gv) in g.iter().enumerate() {
                        ds[idx % d] += gv * xhat[idx];
                        db[idx % d] += gv;
                    }
                    if rg(*scale) {
                        acc(&mut grads[scale.0], ds);
                    }
                    if rg(*offset) {
                        acc(&mut grads[offset.0], db);
                    }
                }
                if rg(*x) {
                    let gam = val(*scale);
                    let mut dx = vec![0.0; g.len()];
                    for r in 0..rows {
                        let base = r * d;
                        let (mut s1, mut s2) = (0.0, 0.0);
                        for i in 0..d {
                            let dh = g[base + i] * gam[i];
                            s1 += dh;
                            s2 += dh * xhat[base + i];
                        }
                        let (s1, s2) = (s1 / d as f64, s2 / d as f64);
                        for i in 0..d {
                            let dh = g[base + i] * gam[i];
                            dx[base + i] = rstd[r] * (dh - s1 - xhat[base + i] * s2);
                        }
                    }
                    acc(&mut grads[x.0], dx);
                }
            }
            Op::BatchNorm { x, scale, offset, xhat, rstd, batch_stats } => {
                let c = rstd.len();
                let m = g.len() / c;
                let mut ds = vec![0.0; c];
                let mut db = vec![0.0; c];
                for (idx, gv) in g.iter().enumerate() {
                    ds[idx % c] += gv * xhat[idx];
                    db[idx % c] += gv;
                }
                if rg(*x) {
                    let gam = val(*scale);
                    let dx = if *batch_stats {
                        // Σ dxhat = γ Σ g and Σ dxhat·xhat = γ Σ g·xhat, per channel.
                        g.iter()
                            .enumerate()
                            .map(|(idx, gv)| {
                                let ch = idx % c;
                                gam[ch] * rstd[ch] / m as f64 * (m as f64 * gv - db[ch] - xhat[idx] * ds[ch])
                            })
                            .collect()
                    } else {
                        g.iter().enumerate().map(|(idx, gv)| gv * gam[idx % c] * rstd[idx % c]).collect()
                    };
                    acc(&mut grads[x.0], dx);
                }
                if rg(*scale) {
                    acc(&mut grads[scale.0], ds);
                }
                if rg(*offset) {
                    acc(&mut grads[offset.0], db);
                }
            }
            Op::GroupNorm { x, scale, offset, groups, xhat, rstd } => {
                let c = val(*scale).len();
                if rg(*scale) || rg(*offset) {
                    let mut ds = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for (idx, gv) in g.iter().enumerate() {
                        ds[idx % c] += gv * xhat[idx];
                        db[idx % c] += gv;
                    }
                    if rg(*scale) {
                        acc(&mut grads[scale.0], ds);
                    }
                    if rg(*offset) {
                        acc(&mut grads[offset.0], db);
                    }
                }
                if rg(*x) {
                    let gam = val(*scale);
                    let groups = *groups;
                    let batch = rstd.len() / groups;
                    let spatial = g.len() / (batch * c);
                    let cg = c / groups;
                    let count = (spatial * cg) as f64;
                    let mut dx = vec![0.0; g.len()];
                    for n in 0..batch {
                        let base = n * spatial * c;
                        for gi in 0..groups {
                            let idx = |s: usize, j: usize| base + s * c + gi * cg + j;
                            let (mut s1, mut s2) = (0.0, 0.0);
                            for s in 0..spatial {
                                for j in 0..cg {
                                    let i = idx(s, j);
                                    let dh = g[i] * gam[gi * cg + j];
                                    s1 += dh;
                                    s2 += dh * xhat[i];
                                }
                            }
                            let (s1, s2) = (s1 / count, s2 / count);
                            let rs = rstd[n * groups + gi];
                            for s in 0..spatial {
                                for j in 0..cg {
                                    let i = idx(s, j);
                                    let dh = g[i] * gam[gi * cg + j];
                                    dx[i] = rs * (dh - s1 - xhat[i] * s2);
                                }
                            }
                        }
                    }
                    acc(&mut grads[x.0], dx);
                }
            }
            Op::CrossEntropy { logits, targets, smoothing, probs, per_row } => {
                if rg(*logits) {
                    let c = probs.len() / targets.len();
                    let off = smoothing / c as f64;
                    let scale = g[0] * per_row;
                    let d = probs
                        .iter()
                        .enumerate()
                        .map(|(idx, p)| {
                            let (r, j) = (idx / c, idx % c);
                            let q = if j == targets[r] { 1.0 - smoothing + off } else { off };
                            scale * (p - q)
                        })
                        .collect();
                    acc(&mut grads[logits.0], d);
                }
            }
            Op::Im2col { x, geom } => {
                if rg(*x) {
                    let pl = geom.patch_len();
                    let len = val(*x).len();
                    acc_with(&mut grads[x.0], len, |dx| {
                        for_each_window(geom, |row, col, src_idx| dx[src_idx] += g[row * pl + col]);
                    });
                }
            }
            &Op::Reshape(x) => {
                if rg(x) {
                    acc(&mut grads[x.0], g.to_vec());
                }
            }
            Op::Gather { x, index } => {
                if rg(*x) {
                    let len = val(*x).len();
                    acc_with(&mut grads[x.0], len, |dx| {
                        for (gv, &i) in g.iter().zip(index) {
                            dx[i] += gv;
                        }
                    });
                }
            }
            &Op::Concat { a, b, outer, a_len, b_len } => {
                let w = a_len + b_len;
                if rg(a) {
                    let mut da = Vec::with_capacity(outer * a_len);
                    for o in 0..outer {
                        da.extend_from_slice(&g[o * w..o * w + a_len]);
                    }
                    acc(&mut grads[a.0], da);
                }
                if rg(b) {
                    let mut db = Vec::with_capacity(outer * b_len);
                    for o in 0..outer {
                        db.extend_from_slice(&g[o * w + a_len..(o + 1) * w]);
                    }
                    acc(&mut grads[b.0], db);
                }
            }
            &Op::MeanAxis { x, outer, len, inner } => {
                if rg(x) {
                    let mut dx = vec![0.0; outer * len * inner];
                    let f = 1.0 / len as f64;
                    for o in 0..outer {
                        for i in 0..len {
                            let base = (o * len + i) * inner;
                            for j in 0..inner {
                                dx[base + j] = g[o * inner + j] * f;
                            }
                        }
                    }
                    acc(&mut grads[x.0], dx);
                }
            }
            &Op::Expand { x, copies } => {
                if rg(x) {
                    let m = g.len() / copies;
                    acc_with(&mut grads[x.0], m, |dx| {
                        for (j, v) in g.iter().enumerate() {
                            dx[j % m] += v;
                        }
                    });
                }
            }
            &Op::Sum(x) => {
                if rg(x) {
                    let len = val(x).len();
                    acc(&mut grads[x.0], vec![g[0]; len]);
                }
            }
            Op::Custom { inputs, backward } => {
                let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                let parts = backward(&values, g);
                for (v, part) in inputs.iter().zip(parts) {
                    if rg(*v) {
                        acc(&mut grads[v.0], part);
                    }
                }
            }
        }
    }
}

fn for_each_window(geom: &ConvGeom, mut f: impl FnMut(usize, usize, usize)) {
    let (oh, ow) = (geom.out_height(), geom.out_width());
    let (h, w, c, k) = (geom.height, geom.width, geom.channels, geom.kernel);
    for b in 0..geom.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = (b * oh + oy) * ow + ox;
                for ky in 0..k {
                    let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = ((b * h + iy as usize) * w + ix as usize) * c;
                        let col = (ky * k + kx) * c;
                        for ch in 0..c {
                            f(row, col + ch, src + ch);
                        }
                    }
                }
            }
        }
    }
}
