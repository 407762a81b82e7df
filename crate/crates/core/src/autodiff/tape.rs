//! Wengert-list reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and enough saved
//! state to replay its gradient rule. [`Tape::backward`] walks the list once in
//! reverse. All kernels use 64-bit floats and fixed sequential reduction order.

use super::kernels::{col2im, gemm, im2col, permute_index, split_axis, ConvGeom};
use crate::error::{dim_err, Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Train/eval switch for batch normalization and dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Mean,
}

/// Running statistics consumed by eval-mode batch normalization.
#[derive(Clone, Copy, Debug)]
pub struct RunningStats<'a> {
    pub mean: &'a [f64],
    pub var: &'a [f64],
}

/// Batch statistics produced by a train-mode batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Lower bound on adjacency degrees, so empty subsets stay finite.
pub const DEGREE_GUARD: f64 = 1e-6;

enum Op {
    Leaf,
    Matmul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    AddBiasAxis { x: Var, b: Var, axis: usize },
    Reshape { x: Var },
    Permute { x: Var, perm: Vec<usize> },
    Relu { x: Var },
    Dropout { x: Var, mask: Vec<f64> },
    Conv2d { input: Var, kernels: Var, geom: ConvGeom, batch: usize, out_c: usize },
    MaxPool2d { x: Var, argmax: Vec<u32> },
    Conv1dTime { x: Var, w: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Pool { x: Var, axis: usize, kind: PoolKind, argmax: Vec<u32> },
    Concat { a: Var, b: Var },
    Broadcast { x: Var, axis: usize, count: usize },
    PartLinear { x: Var, w: Var },
    NodeMix { adj: Var, x: Var },
    SymNormalize { m: Var, scale: Vec<f64>, clamped: Vec<bool> },
    PairwiseDist { x: Var },
    BatchAllTriplet { dist: Var, coeff: Vec<f64> },
    SoftmaxCe { logits: Var, probs: Vec<f64>, labels: Vec<usize> },
    Sum { x: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of the leaves reached by a backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` was not reachable from the loss.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Moves the gradient out, leaving zeros behind.
    pub fn take(&mut self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match self.grads[v.0].take() {
            Some(g) => Tensor::new(&shape, g).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

/// Ordered record of a forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

fn suffix_broadcast(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
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

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    /// Frees all recorded state; the tape can be reused afterwards.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copies the value of `v` into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    // ---------------------------------------------------------------- ops

    /// `a [..×k] · b [k×n] → [..×n]`; leading axes of `a` are flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(dim_err!("matmul {:?} x {:?}", sa, sb));
        }
        let k = sb[0];
        let n = sb[1];
        let m: usize = sa[..sa.len() - 1].iter().product();
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(a), (k, 1), self.data(b), (n, 1), &mut out, (n, 1), 0.0);
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Matmul { a, b }, rg))
    }

    /// Elementwise sum; `b` may match a trailing suffix of `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if !suffix_broadcast(&sa, &sb) {
            return Err(dim_err!("add {:?} + {:?}", sa, sb));
        }
        let bd = self.data(b);
        let mut out = self.data(a).to_vec();
        if !bd.is_empty() {
            for chunk in out.chunks_exact_mut(bd.len()) {
                chunk.iter_mut().zip(bd).for_each(|(x, y)| *x += y);
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&sa, out)?, Op::Add { a, b }, rg))
    }

    /// Elementwise (Hadamard) product; `b` may match a trailing suffix of `a`'s shape.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if !suffix_broadcast(&sa, &sb) {
            return Err(dim_err!("mul {:?} * {:?}", sa, sb));
        }
        let bd = self.data(b);
        let mut out = self.data(a).to_vec();
        if !bd.is_empty() {
            for chunk in out.chunks_exact_mut(bd.len()) {
                chunk.iter_mut().zip(bd).for_each(|(x, y)| *x *= y);
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&sa, out)?, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale { x, factor }, rg)
    }

    /// Adds `b [C]` along `axis` of `x` (e.g. a per-channel conv bias on axis 1).
    pub fn add_bias_axis(&mut self, x: Var, b: Var, axis: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sb = self.shape(b);
        if axis >= sx.len() || sb.len() != 1 || sb[0] != sx[axis] {
            return Err(dim_err!("bias {:?} on axis {} of {:?}", sb, axis, sx));
        }
        let (outer, c, inner) = split_axis(&sx, axis);
        let bd = self.data(b).to_vec();
        let mut out = self.data(x).to_vec();
        for o in 0..outer {
            for (ci, &bv) in bd.iter().enumerate() {
                let base = (o * c + ci) * inner;
                for v in &mut out[base..base + inner] {
                    *v += bv;
                }
            }
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(Tensor::new(&sx, out)?, Op::AddBiasAxis { x, b, axis }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let mut seen = vec![false; sx.len()];
        if perm.len() != sx.len() || perm.iter().any(|&p| p >= sx.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(dim_err!("permutation {:?} for shape {:?}", perm, sx));
        }
        let src = permute_index(&sx, perm);
        let xd = self.data(x);
        let out: Vec<f64> = src.iter().map(|&i| xd[i]).collect();
        let shape: Vec<usize> = perm.iter().map(|&p| sx[p]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Permute { x, perm: perm.to_vec() }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(&[x]);
        self.push(value, Op::Relu { x }, rg)
    }

    /// Inverted dropout: in train mode each value is zeroed with probability
    /// `rate` and survivors are scaled by `1/(1-rate)`; eval mode is the identity.
    pub fn dropout(&mut self, x: Var, rate: f64, mode: Mode, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            if mode == Mode::Train || rate < 0.0 {
                return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
            }
        }
        let n = self.value(x).len();
        let mask: Vec<f64> = match mode {
            Mode::Eval => vec![1.0; n],
            Mode::Train => {
                let keep = 1.0 / (1.0 - rate);
                (0..n)
                    .map(|_| if rng.uniform() < rate { 0.0 } else { keep })
                    .collect()
            }
        };
        let value = {
            let t = self.value(x);
            let d: Vec<f64> = t.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
            Tensor::new(t.shape(), d)?
        };
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Dropout { x, mask }, rg))
    }

    /// 2-D cross-correlation (the kernel is not flipped).
    ///
    /// `input` is `[B×C×H×W]` or `[C×H×W]`, `kernels` is `[O×C×kh×kw]`.
    /// Output extents are `(H + 2·pad − kh)/stride + 1`, which must divide exactly.
    pub fn conv2d(&mut self, input: Var, kernels: Var, stride: usize, pad: usize) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let sk = self.shape(kernels).to_vec();
        let (batch, c, h, w, batched) = match si.len() {
            3 => (1, si[0], si[1], si[2], false),
            4 => (si[0], si[1], si[2], si[3], true),
            _ => return Err(dim_err!("conv2d input must be rank 3 or 4, got {:?}", si)),
        };
        if sk.len() != 4 || sk[1] != c {
            return Err(dim_err!("conv2d kernels {:?} for input {:?}", sk, si));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be >= 1".into()));
        }
        let (o, kh, kw) = (sk[0], sk[2], sk[3]);
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(dim_err!("kernel {}x{} exceeds padded input {}x{}", kh, kw, h + 2 * pad, w + 2 * pad));
        }
        if (h + 2 * pad - kh) % stride != 0 || (w + 2 * pad - kw) % stride != 0 {
            return Err(dim_err!("conv2d output extent is not integral for {:?}, kernel {}x{}, stride {}, pad {}", si, kh, kw, stride, pad));
        }
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: w,
            kh,
            kw,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (w + 2 * pad - kw) / stride + 1,
        };
        let (rows, ncols) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![0.0; rows * ncols];
        let mut out = vec![0.0; batch * o * ncols];
        let xd = self.data(input);
        let kd = self.data(kernels);
        for bi in 0..batch {
            im2col(&xd[bi * c * h * w..(bi + 1) * c * h * w], &geom, &mut cols);
            gemm(o, rows, ncols, kd, (rows, 1), &cols, (ncols, 1), &mut out[bi * o * ncols..(bi + 1) * o * ncols], (ncols, 1), 0.0);
        }
        let shape = if batched {
            vec![batch, o, geom.out_h, geom.out_w]
        } else {
            vec![o, geom.out_h, geom.out_w]
        };
        let rg = self.rg(&[input, kernels]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Conv2d { input, kernels, geom, batch, out_c: o },
            rg,
        ))
    }

    /// 2×2 max pooling with stride 2 over the last two axes.
    pub fn max_pool2d(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 {
            return Err(dim_err!("max_pool2d needs rank >= 2, got {:?}", sx));
        }
        let (h, w) = (sx[sx.len() - 2], sx[sx.len() - 1]);
        if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
            return Err(dim_err!("max_pool2d needs even spatial extents, got {}x{}", h, w));
        }
        let planes = self.value(x).len() / (h * w);
        let (oh, ow) = (h / 2, w / 2);
        let xd = self.data(x);
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let cand = [
                        base + 2 * oy * w + 2 * ox,
                        base + 2 * oy * w + 2 * ox + 1,
                        base + (2 * oy + 1) * w + 2 * ox,
                        base + (2 * oy + 1) * w + 2 * ox + 1,
                    ];
                    let mut best = cand[0];
                    for &ci in &cand[1..] {
                        if xd[ci] > xd[best] {
                            best = ci;
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let mut shape = sx.clone();
        let r = shape.len();
        shape[r - 2] = oh;
        shape[r - 1] = ow;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MaxPool2d { x, argmax }, rg))
    }

    /// Temporal correlation with zero padding `⌊Γ/2⌋` at both ends.
    ///
    /// `x` is `[B×T×D]` or `[T×D]`; `w` is `[Γ×G]` with `G` dividing `D`.
    /// Channel `d` uses kernel column `d / (D/G)`, so `G = D` gives per-channel
    /// kernels, `G = 1` one shared kernel, and `G = nodes` one kernel per node
    /// for node-major `[nodes × channels]` layouts.
    pub fn conv1d_time(&mut self, x: Var, w: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let (t, d) = match sx.len() {
            2 => (sx[0], sx[1]),
            3 => (sx[1], sx[2]),
            _ => return Err(dim_err!("conv1d_time input must be rank 2 or 3, got {:?}", sx)),
        };
        if sw.len() != 2 {
            return Err(dim_err!("conv1d_time weights must be [window x groups], got {:?}", sw));
        }
        let (win, groups) = (sw[0], sw[1]);
        if win % 2 == 0 {
            return Err(Error::Config(format!("temporal window {win} must be odd")));
        }
        if groups == 0 || d % groups != 0 {
            return Err(dim_err!("{} kernel groups do not divide {} channels", groups, d));
        }
        let batch = self.value(x).len() / (t * d).max(1);
        let per = d / groups;
        let half = win / 2;
        let xd = self.data(x);
        let wd = self.data(w);
        let mut out = vec![0.0; xd.len()];
        for b in 0..batch {
            for ti in 0..t {
                let dst = &mut out[(b * t + ti) * d..(b * t + ti + 1) * d];
                for g in 0..win {
                    let src_t = ti as isize + g as isize - half as isize;
                    if src_t < 0 || src_t >= t as isize {
                        continue;
                    }
                    let src = &xd[(b * t + src_t as usize) * d..(b * t + src_t as usize + 1) * d];
                    let wrow = &wd[g * groups..(g + 1) * groups];
                    for ((dc, sc), &wv) in dst.chunks_exact_mut(per).zip(src.chunks_exact(per)).zip(wrow) {
                        dc.iter_mut().zip(sc).for_each(|(v, x)| *v += wv * x);
                    }
                }
            }
        }
        let rg = self.rg(&[x, w]);
        Ok(self.push(Tensor::new(&sx, out)?, Op::Conv1dTime { x, w }, rg))
    }

    /// Batch normalization over rows of `x [..×D]`.
    ///
    /// Train mode uses batch statistics with population variance and returns
    /// them so the caller can update running statistics; eval mode uses `running`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: Mode,
        running: RunningStats<'_>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().ok_or_else(|| dim_err!("batch_norm on a scalar"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(dim_err!("batch_norm affine params must be [{}]", d));
        }
        let rows = self.value(x).len() / d.max(1);
        let xd = self.data(x);
        let (mean, var) = match mode {
            Mode::Train => {
                if rows < 2 {
                    return Err(Error::BatchSize(format!("train-mode batch norm needs >= 2 rows, got {rows}")));
                }
                let mut mean = vec![0.0; d];
                for r in 0..rows {
                    for (m, v) in mean.iter_mut().zip(&xd[r * d..(r + 1) * d]) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                let mut var = vec![0.0; d];
                for r in 0..rows {
                    for j in 0..d {
                        let c = xd[r * d + j] - mean[j];
                        var[j] += c * c;
                    }
                }
                var.iter_mut().for_each(|v| *v /= rows as f64);
                (mean, var)
            }
            Mode::Eval => {
                if running.mean.len() != d || running.var.len() != d {
                    return Err(dim_err!("running statistics must have length {}", d));
                }
                (running.mean.to_vec(), running.var.to_vec())
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.data(gamma);
        let bt = self.data(beta);
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            for j in 0..d {
                let i = r * d + j;
                xhat[i] = (xd[i] - mean[j]) * inv_std[j];
                out[i] = g[j] * xhat[i] + bt[j];
            }
        }
        let train = mode == Mode::Train;
        let rg = self.rg(&[x, gamma, beta]);
        let v = self.push(
            Tensor::new(&sx, out)?,
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train },
            rg,
        );
        Ok((v, train.then_some(BatchStats { mean, var })))
    }

    /// Reduces `axis` by max or mean. Max ties resolve to the lowest index.
    pub fn pool(&mut self, x: Var, axis: usize, kind: PoolKind) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() {
            return Err(dim_err!("pool axis {} out of range for {:?}", axis, sx));
        }
        let (outer, n, inner) = split_axis(&sx, axis);
        if n == 0 {
            return Err(dim_err!("pool over empty axis {} of {:?}", axis, sx));
        }
        let xd = self.data(x);
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        match kind {
            PoolKind::Mean => {
                for o in 0..outer {
                    for k in 0..n {
                        let src = &xd[(o * n + k) * inner..(o * n + k + 1) * inner];
                        for (dst, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *dst += v;
                        }
                    }
                }
                out.iter_mut().for_each(|v| *v /= n as f64);
            }
            PoolKind::Max => {
                argmax = vec![0u32; outer * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut best = 0;
                        let mut bv = xd[o * n * inner + i];
                        for k in 1..n {
                            let v = xd[(o * n + k) * inner + i];
                            if v > bv {
                                bv = v;
                                best = k;
                            }
                        }
                        out[o * inner + i] = bv;
                        argmax[o * inner + i] = best as u32;
                    }
                }
            }
        }
        let mut shape: Vec<usize> = sx.iter().enumerate().filter(|&(i, _)| i != axis).map(|(_, &s)| s).collect();
        if shape.is_empty() {
            shape.push(1);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Pool { x, axis, kind, argmax }, rg))
    }

    /// Joins along the last axis; `a`'s values precede `b`'s.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != sb.len() || sa.is_empty() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(dim_err!("concat {:?} with {:?}", sa, sb));
        }
        let (da, db) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let rows: usize = sa[..sa.len() - 1].iter().product();
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(rows * (da + db));
        for r in 0..rows {
            out.extend_from_slice(&ad[r * da..(r + 1) * da]);
            out.extend_from_slice(&bd[r * db..(r + 1) * db]);
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = da + db;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Concat { a, b }, rg))
    }

    /// Inserts a new axis at `axis` holding `count` copies.
    pub fn broadcast(&mut self, x: Var, axis: usize, count: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis > sx.len() {
            return Err(dim_err!("broadcast axis {} for {:?}", axis, sx));
        }
        let outer: usize = sx[..axis].iter().product();
        let inner: usize = sx[axis..].iter().product();
        let xd = self.data(x);
        let mut out = Vec::with_capacity(outer * count * inner);
        for o in 0..outer {
            for _ in 0..count {
                out.extend_from_slice(&xd[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = sx.clone();
        shape.insert(axis, count);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Broadcast { x, axis, count }, rg))
    }

    /// Per-part linear maps: `x [B×N×Din]`, `w [N×Din×Dout]` → `[B×N×Dout]`.
    pub fn part_linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[0] || sx[2] != sw[1] {
            return Err(dim_err!("part_linear {:?} with weights {:?}", sx, sw));
        }
        let (b, n, din, dout) = (sx[0], sx[1], sx[2], sw[2]);
        let mut out = vec![0.0; b * n * dout];
        let (xd, wd) = (self.data(x), self.data(w));
        for p in 0..n {
            gemm(
                b,
                din,
                dout,
                &xd[p * din..],
                (n * din, 1),
                &wd[p * din * dout..(p + 1) * din * dout],
                (dout, 1),
                &mut out[p * dout..],
                (n * dout, 1),
                0.0,
            );
        }
        let rg = self.rg(&[x, w]);
        Ok(self.push(Tensor::new(&[b, n, dout], out)?, Op::PartLinear { x, w }, rg))
    }

    /// Mixes node features with an adjacency: `y[l,i,:] = Σ_j adj[i,j] · x[l,j,:]`.
    ///
    /// `x` is `[..×N×C]` with `L` leading frames; `adj` is `[N×N]` (shared) or
    /// `[L×N×N]` (one matrix per frame). Non-square `[Nout×N]` is allowed for
    /// the shared form, which is how pooling between scales is expressed.
    pub fn node_mix(&mut self, adj: Var, x: Var) -> Result<Var> {
        let (sa, sx) = (self.shape(adj).to_vec(), self.shape(x).to_vec());
        if sx.len() < 2 {
            return Err(dim_err!("node_mix input must be [..x N x C], got {:?}", sx));
        }
        let (n, c) = (sx[sx.len() - 2], sx[sx.len() - 1]);
        let frames = self.value(x).len() / (n * c).max(1);
        let (per_frame, nout) = match sa.len() {
            2 if sa[1] == n => (false, sa[0]),
            3 if sa[1] == n && sa[2] == n && sa[0] == frames => (true, n),
            _ => return Err(dim_err!("node_mix adjacency {:?} for features {:?}", sa, sx)),
        };
        let (ad, xd) = (self.data(adj), self.data(x));
        let mut out = vec![0.0; frames * nout * c];
        for l in 0..frames {
            let a = if per_frame { &ad[l * n * n..(l + 1) * n * n] } else { ad };
            let xs = &xd[l * n * c..(l + 1) * n * c];
            for i in 0..nout {
                let dst = &mut out[(l * nout + i) * c..(l * nout + i + 1) * c];
                for j in 0..n {
                    let w = a[i * n + j];
                    if w != 0.0 {
                        for (o, v) in dst.iter_mut().zip(&xs[j * c..(j + 1) * c]) {
                            *o += w * v;
                        }
                    }
                }
            }
        }
        let mut shape = sx.clone();
        let r = shape.len();
        shape[r - 2] = nout;
        let rg = self.rg(&[adj, x]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::NodeMix { adj, x }, rg))
    }

    /// Symmetric degree normalization `D^-1/2 M D^-1/2` of each trailing
    /// `N×N` matrix, with `D_ii = Σ_j M_ij + 1e-6` (floored at 1e-6).
    pub fn sym_normalize(&mut self, m: Var) -> Result<Var> {
        let sm = self.shape(m).to_vec();
        let r = sm.len();
        if r < 2 || sm[r - 1] != sm[r - 2] {
            return Err(dim_err!("sym_normalize needs square trailing matrices, got {:?}", sm));
        }
        let n = sm[r - 1];
        let count = self.value(m).len() / (n * n).max(1);
        let md = self.data(m);
        let mut out = vec![0.0; md.len()];
        let mut scale = vec![0.0; count * n];
        let mut clamped = vec![false; count * n];
        for q in 0..count {
            let mat = &md[q * n * n..(q + 1) * n * n];
            for i in 0..n {
                let deg: f64 = mat[i * n..(i + 1) * n].iter().sum::<f64>() + DEGREE_GUARD;
                let (deg, cl) = if deg < DEGREE_GUARD { (DEGREE_GUARD, true) } else { (deg, false) };
                scale[q * n + i] = 1.0 / deg.sqrt();
                clamped[q * n + i] = cl;
            }
            let s = &scale[q * n..(q + 1) * n];
            for i in 0..n {
                for j in 0..n {
                    out[q * n * n + i * n + j] = s[i] * mat[i * n + j] * s[j];
                }
            }
        }
        let rg = self.rg(&[m]);
        Ok(self.push(Tensor::new(&sm, out)?, Op::SymNormalize { m, scale, clamped }, rg))
    }

    /// Euclidean distances between batch rows: `[B×D] → [1×B×B]`,
    /// or per part `[B×N×D] → [N×B×B]`.
    pub fn pairwise_dist(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let (b, parts, d) = match sx.len() {
            2 => (sx[0], 1, sx[1]),
            3 => (sx[0], sx[1], sx[2]),
            _ => return Err(dim_err!("pairwise_dist expects [B x D] or [B x N x D], got {:?}", sx)),
        };
        let xd = self.data(x);
        let mut out = vec![0.0; parts * b * b];
        for p in 0..parts {
            for i in 0..b {
                let xi = &xd[(i * parts + p) * d..(i * parts + p + 1) * d];
                for j in (i + 1)..b {
                    let xj = &xd[(j * parts + p) * d..(j * parts + p + 1) * d];
                    let sq: f64 = xi.iter().zip(xj).map(|(a, c)| (a - c) * (a - c)).sum();
                    let dist = sq.sqrt();
                    out[p * b * b + i * b + j] = dist;
                    out[p * b * b + j * b + i] = dist;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[parts, b, b], out)?, Op::PairwiseDist { x }, rg))
    }

    /// Batch-all triplet loss with the "+" averaging convention.
    ///
    /// For every `(anchor, positive, negative)` triple in each `B×B` distance
    /// matrix, the hinge `max(0, d_ap − d_an + margin)` is taken; each matrix
    /// contributes the mean over strictly positive hinges (0 if none), and the
    /// result is the mean over matrices.
    pub fn batch_all_triplet(&mut self, dist: Var, labels: &[usize], margin: f64) -> Result<Var> {
        let sd = self.shape(dist).to_vec();
        let b = labels.len();
        if sd.len() != 3 || sd[1] != b || sd[2] != b {
            return Err(dim_err!("triplet distances {:?} for {} labels", sd, b));
        }
        check_triplet_batch(labels)?;
        let parts = sd[0];
        let dd = self.data(dist);
        let mut coeff = vec![0.0; dd.len()];
        let mut total = 0.0;
        let mut active: Vec<(usize, usize)> = Vec::new();
        for p in 0..parts {
            let m = &dd[p * b * b..(p + 1) * b * b];
            active.clear();
            let mut sum = 0.0;
            for a in 0..b {
                for pos in 0..b {
                    if pos == a || labels[pos] != labels[a] {
                        continue;
                    }
                    for neg in 0..b {
                        if labels[neg] == labels[a] {
                            continue;
                        }
                        let hinge = m[a * b + pos] - m[a * b + neg] + margin;
                        if hinge > 0.0 {
                            sum += hinge;
                            active.push((a * b + pos, a * b + neg));
                        }
                    }
                }
            }
            if !active.is_empty() {
                let cnt = active.len() as f64;
                total += sum / cnt;
                let w = 1.0 / (cnt * parts as f64);
                for &(ap, an) in &active {
                    coeff[p * b * b + ap] += w;
                    coeff[p * b * b + an] -= w;
                }
            }
        }
        let value = Tensor::scalar(total / parts as f64);
        let rg = self.rg(&[dist]);
        Ok(self.push(value, Op::BatchAllTriplet { dist, coeff }, rg))
    }

    /// Mean over the batch of `−log softmax(logits)[label]`, max-shifted.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || sl[0] != labels.len() {
            return Err(dim_err!("logits {:?} for {} labels", sl, labels.len()));
        }
        let (b, c) = (sl[0], sl[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Index(format!("label {bad} out of range for {c} classes")));
        }
        let ld = self.data(logits);
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for r in 0..b {
            let row = &ld[r * c..(r + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let lse = mx + z.ln();
            loss += lse - row[labels[r]];
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
        }
        let value = Tensor::scalar(loss / b as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            value,
            Op::SoftmaxCe { logits, probs, labels: labels.to_vec() },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.data(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    // ------------------------------------------------------------ backward

    /// Replays gradient rules in reverse recorded order.
    ///
    /// Returns gradients for every leaf; leaves unreachable from `loss` get
    /// zeros. A tape can be differentiated once; afterwards it must be cleared.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let count = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; count];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.apply_rule(i, g, &mut grads)?;
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        for (i, n) in self.nodes.iter().enumerate() {
            if !matches!(n.op, Op::Leaf) || !n.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn apply_rule(&self, i: usize, gv: Vec<f64>, grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let g: &[f64] = &gv;
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let len = |v: Var| nodes[v.0].value.len();
        fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], v: Var, n: usize) -> &'a mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; n])
        }
        // hands the incoming buffer over when the slot is still empty
        fn acc_owned(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
            match &mut grads[v.0] {
                Some(d) => d.iter_mut().zip(&g).for_each(|(d, v)| *d += v),
                slot => *slot = Some(g),
            }
        }
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let sb = self.shape(*b);
                let (k, n) = (sb[0], sb[1]);
                let m = g.len() / n.max(1);
                if wants(*a) {
                    let bd = self.data(*b);
                    let da = acc(grads, *a, len(*a));
                    gemm(m, n, k, g, (n, 1), bd, (1, n), da, (k, 1), 1.0);
                }
                if wants(*b) {
                    let ad = self.data(*a);
                    let db = acc(grads, *b, len(*b));
                    gemm(k, m, n, ad, (1, k), g, (n, 1), db, (n, 1), 1.0);
                }
            }
            Op::Add { a, b } => {
                if wants(*b) {
                    let nb = len(*b);
                    let db = acc(grads, *b, nb);
                    for chunk in g.chunks_exact(nb) {
                        db.iter_mut().zip(chunk).for_each(|(d, v)| *d += v);
                    }
                }
                if wants(*a) {
                    acc_owned(grads, *a, gv);
                }
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                let nb = bd.len();
                if wants(*a) {
                    let da = acc(grads, *a, ad.len());
                    for (dc, gc) in da.chunks_exact_mut(nb).zip(g.chunks_exact(nb)) {
                        for ((d, v), y) in dc.iter_mut().zip(gc).zip(bd) {
                            *d += v * y;
                        }
                    }
                }
                if wants(*b) {
                    let db = acc(grads, *b, nb);
                    for (gc, ac) in g.chunks_exact(nb).zip(ad.chunks_exact(nb)) {
                        for ((d, v), x) in db.iter_mut().zip(gc).zip(ac) {
                            *d += v * x;
                        }
                    }
                }
            }
            Op::Scale { x, factor } => {
                let mut gv = gv;
                gv.iter_mut().for_each(|v| *v *= factor);
                acc_owned(grads, *x, gv);
            }
            Op::AddBiasAxis { x, b, axis } => {
                if wants(*b) {
                    let (outer, c, inner) = split_axis(self.shape(*x), *axis);
                    let db = acc(grads, *b, c);
                    for o in 0..outer {
                        for (ci, d) in db.iter_mut().enumerate() {
                            let base = (o * c + ci) * inner;
                            *d += g[base..base + inner].iter().sum::<f64>();
                        }
                    }
                }
                if wants(*x) {
                    acc_owned(grads, *x, gv);
                }
            }
            Op::Reshape { x } => acc_owned(grads, *x, gv),
            Op::Permute { x, perm } => {
                let src = permute_index(self.shape(*x), perm);
                let dx = acc(grads, *x, len(*x));
                for (o, &s) in src.iter().enumerate() {
                    dx[s] += g[o];
                }
            }
            Op::Relu { x } => {
                let mut gv = gv;
                for (v, o) in gv.iter_mut().zip(node.value.data()) {
                    if *o <= 0.0 {
                        *v = 0.0;
                    }
                }
                acc_owned(grads, *x, gv);
            }
            Op::Dropout { x, mask } => {
                let mut gv = gv;
                gv.iter_mut().zip(mask).for_each(|(v, m)| *v *= m);
                acc_owned(grads, *x, gv);
            }
            Op::Conv2d { input, kernels, geom, batch, out_c } => {
                let (rows, ncols) = (geom.col_rows(), geom.col_cols());
                let img = geom.channels * geom.height * geom.width;
                let o = *out_c;
                let mut cols = vec![0.0; rows * ncols];
                let xd = self.data(*input);
                let kd = self.data(*kernels);
                if wants(*kernels) {
                    let dk = acc(grads, *kernels, len(*kernels));
                    for bi in 0..*batch {
                        im2col(&xd[bi * img..(bi + 1) * img], geom, &mut cols);
                        let gb = &g[bi * o * ncols..(bi + 1) * o * ncols];
                        gemm(o, ncols, rows, gb, (ncols, 1), &cols, (1, ncols), dk, (rows, 1), 1.0);
                    }
                }
                if wants(*input) {
                    let dx = acc(grads, *input, len(*input));
                    for bi in 0..*batch {
                        let gb = &g[bi * o * ncols..(bi + 1) * o * ncols];
                        gemm(rows, o, ncols, kd, (1, rows), gb, (ncols, 1), &mut cols, (ncols, 1), 0.0);
                        col2im(&cols, geom, &mut dx[bi * img..(bi + 1) * img]);
                    }
                }
            }
            Op::MaxPool2d { x, argmax } => {
                let dx = acc(grads, *x, len(*x));
                for (v, &idx) in g.iter().zip(argmax) {
                    dx[idx as usize] += v;
                }
            }
            Op::Conv1dTime { x, w } => {
                let sx = self.shape(*x);
                let (t, d) = if sx.len() == 2 { (sx[0], sx[1]) } else { (sx[1], sx[2]) };
                let sw = self.shape(*w);
                let (win, groups) = (sw[0], sw[1]);
                let batch = len(*x) / (t * d).max(1);
                let per = d / groups;
                let half = win / 2;
                let (xd, wd) = (self.data(*x), self.data(*w));
                let mut dx = wants(*x).then(|| grads[x.0].take().unwrap_or_else(|| vec![0.0; xd.len()]));
                let mut dw = wants(*w).then(|| grads[w.0].take().unwrap_or_else(|| vec![0.0; wd.len()]));
                for b in 0..batch {
                    for ti in 0..t {
                        let gr = &g[(b * t + ti) * d..(b * t + ti + 1) * d];
                        for k in 0..win {
                            let st = ti as isize + k as isize - half as isize;
                            if st < 0 || st >= t as isize {
                                continue;
                            }
                            let base = (b * t + st as usize) * d;
                            if let Some(dx) = dx.as_mut() {
                                let wrow = &wd[k * groups..(k + 1) * groups];
                                let dst = &mut dx[base..base + d];
                                for ((dc, gc), &wv) in dst.chunks_exact_mut(per).zip(gr.chunks_exact(per)).zip(wrow) {
                                    dc.iter_mut().zip(gc).for_each(|(a, b)| *a += wv * b);
                                }
                            }
                            if let Some(dw) = dw.as_mut() {
                                let src = &xd[base..base + d];
                                let wrow = &mut dw[k * groups..(k + 1) * groups];
                                for ((acc, gc), sc) in wrow.iter_mut().zip(gr.chunks_exact(per)).zip(src.chunks_exact(per)) {
                                    *acc += gc.iter().zip(sc).map(|(a, b)| a * b).sum::<f64>();
                                }
                            }
                        }
                    }
                }
                if let Some(dx) = dx {
                    grads[x.0] = Some(dx);
                }
                if let Some(dw) = dw {
                    grads[w.0] = Some(dw);
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let d = inv_std.len();
                let rows = g.len() / d;
                let gam = self.data(*gamma);
                let mut sum_g = vec![0.0; d];
                let mut sum_gx = vec![0.0; d];
                for r in 0..rows {
                    for j in 0..d {
                        sum_g[j] += g[r * d + j];
                        sum_gx[j] += g[r * d + j] * xhat[r * d + j];
                    }
                }
                if wants(*gamma) {
                    let dg = acc(grads, *gamma, d);
                    dg.iter_mut().zip(&sum_gx).for_each(|(a, b)| *a += b);
                }
                if wants(*beta) {
                    let db = acc(grads, *beta, d);
                    db.iter_mut().zip(&sum_g).for_each(|(a, b)| *a += b);
                }
                if wants(*x) {
                    let dx = acc(grads, *x, g.len());
                    let rf = rows as f64;
                    for r in 0..rows {
                        for j in 0..d {
                            let i = r * d + j;
                            if *train {
                                dx[i] += gam[j] * inv_std[j] / rf
                                    * (rf * g[i] - sum_g[j] - xhat[i] * sum_gx[j]);
                            } else {
                                dx[i] += g[i] * gam[j] * inv_std[j];
                            }
                        }
                    }
                }
            }
            Op::Pool { x, axis, kind, argmax } => {
                let (outer, n, inner) = split_axis(self.shape(*x), *axis);
                let dx = acc(grads, *x, outer * n * inner);
                for o in 0..outer {
                    for ii in 0..inner {
                        let gv = g[o * inner + ii];
                        match kind {
                            PoolKind::Max => {
                                let k = argmax[o * inner + ii] as usize;
                                dx[(o * n + k) * inner + ii] += gv;
                            }
                            PoolKind::Mean => {
                                for k in 0..n {
                                    dx[(o * n + k) * inner + ii] += gv / n as f64;
                                }
                            }
                        }
                    }
                }
            }
            Op::Concat { a, b } => {
                let da_w = *self.shape(*a).last().unwrap();
                let db_w = *self.shape(*b).last().unwrap();
                let rows = g.len() / (da_w + db_w).max(1);
                if wants(*a) {
                    let da = acc(grads, *a, len(*a));
                    for r in 0..rows {
                        for j in 0..da_w {
                            da[r * da_w + j] += g[r * (da_w + db_w) + j];
                        }
                    }
                }
                if wants(*b) {
                    let db = acc(grads, *b, len(*b));
                    for r in 0..rows {
                        for j in 0..db_w {
                            db[r * db_w + j] += g[r * (da_w + db_w) + da_w + j];
                        }
                    }
                }
            }
            Op::Broadcast { x, axis, count } => {
                let sx = self.shape(*x);
                let outer: usize = sx[..*axis].iter().product();
                let inner: usize = sx[*axis..].iter().product();
                let dx = acc(grads, *x, outer * inner);
                for o in 0..outer {
                    for c in 0..*count {
                        let src = &g[(o * count + c) * inner..(o * count + c + 1) * inner];
                        for (d, v) in dx[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                }
            }
            Op::PartLinear { x, w } => {
                let sx = self.shape(*x);
                let (b, n, din) = (sx[0], sx[1], sx[2]);
                let dout = self.shape(*w)[2];
                let (xd, wd) = (self.data(*x), self.data(*w));
                if wants(*x) {
                    let dx = acc(grads, *x, xd.len());
                    for p in 0..n {
                        gemm(
                            b,
                            dout,
                            din,
                            &g[p * dout..],
                            (n * dout, 1),
                            &wd[p * din * dout..(p + 1) * din * dout],
                            (1, dout),
                            &mut dx[p * din..],
                            (n * din, 1),
                            1.0,
                        );
                    }
                }
                if wants(*w) {
                    let dw = acc(grads, *w, wd.len());
                    for p in 0..n {
                        gemm(
                            din,
                            b,
                            dout,
                            &xd[p * din..],
                            (1, n * din),
                            &g[p * dout..],
                            (n * dout, 1),
                            &mut dw[p * din * dout..(p + 1) * din * dout],
                            (dout, 1),
                            1.0,
                        );
                    }
                }
            }
            Op::NodeMix { adj, x } => {
                let sa = self.shape(*adj);
                let sx = self.shape(*x);
                let (n, c) = (sx[sx.len() - 2], sx[sx.len() - 1]);
                let frames = len(*x) / (n * c).max(1);
                let per_frame = sa.len() == 3;
                let nout = if per_frame { n } else { sa[0] };
                let (ad, xd) = (self.data(*adj), self.data(*x));
                if wants(*x) {
                    let dx = acc(grads, *x, xd.len());
                    for l in 0..frames {
                        let a = if per_frame { &ad[l * n * n..(l + 1) * n * n] } else { ad };
                        for i in 0..nout {
                            let gr = &g[(l * nout + i) * c..(l * nout + i + 1) * c];
                            for j in 0..n {
                                let wv = a[i * n + j];
                                if wv != 0.0 {
                                    let dst = &mut dx[(l * n + j) * c..(l * n + j + 1) * c];
                                    for (d, v) in dst.iter_mut().zip(gr) {
                                        *d += wv * v;
                                    }
                                }
                            }
                        }
                    }
                }
                if wants(*adj) {
                    let da = acc(grads, *adj, ad.len());
                    for l in 0..frames {
                        let off = if per_frame { l * n * n } else { 0 };
                        for i in 0..nout {
                            let gr = &g[(l * nout + i) * c..(l * nout + i + 1) * c];
                            for j in 0..n {
                                let xr = &xd[(l * n + j) * c..(l * n + j + 1) * c];
                                da[off + i * n + j] += gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>();
                            }
                        }
                    }
                }
            }
            Op::SymNormalize { m, scale, clamped } => {
                let sm = self.shape(*m);
                let n = sm[sm.len() - 1];
                let md = self.data(*m);
                let dm = acc(grads, *m, md.len());
                for q in 0..scale.len() / n.max(1) {
                    let mat = &md[q * n * n..(q + 1) * n * n];
                    let gq = &g[q * n * n..(q + 1) * n * n];
                    let s = &scale[q * n..(q + 1) * n];
                    let mut ds = vec![0.0; n];
                    for i in 0..n {
                        for j in 0..n {
                            let gij = gq[i * n + j];
                            dm[q * n * n + i * n + j] += gij * s[i] * s[j];
                            ds[i] += gij * mat[i * n + j] * s[j];
                            ds[j] += gij * mat[i * n + j] * s[i];
                        }
                    }
                    for i in 0..n {
                        if clamped[q * n + i] {
                            continue;
                        }
                        let dd = ds[i] * -0.5 * s[i] * s[i] * s[i];
                        for j in 0..n {
                            dm[q * n * n + i * n + j] += dd;
                        }
                    }
                }
            }
            Op::PairwiseDist { x } => {
                let sx = self.shape(*x);
                let (b, parts, d) = if sx.len() == 2 { (sx[0], 1, sx[1]) } else { (sx[0], sx[1], sx[2]) };
                let xd = self.data(*x);
                let out = node.value.data();
                let dx = acc(grads, *x, xd.len());
                for p in 0..parts {
                    for i in 0..b {
                        for j in 0..b {
                            if i == j {
                                continue;
                            }
                            let dist = out[p * b * b + i * b + j];
                            let gv = g[p * b * b + i * b + j];
                            if dist < 1e-12 || gv == 0.0 {
                                continue;
                            }
                            let coef = gv / dist;
                            let (ri, rj) = ((i * parts + p) * d, (j * parts + p) * d);
                            for k in 0..d {
                                let diff = xd[ri + k] - xd[rj + k];
                                dx[ri + k] += coef * diff;
                                dx[rj + k] -= coef * diff;
                            }
                        }
                    }
                }
            }
            Op::BatchAllTriplet { dist, coeff } => {
                let dd = acc(grads, *dist, coeff.len());
                for (d, c) in dd.iter_mut().zip(coeff) {
                    *d += g[0] * c;
                }
            }
            Op::SoftmaxCe { logits, probs, labels } => {
                let b = labels.len();
                let c = probs.len() / b;
                let dl = acc(grads, *logits, probs.len());
                for r in 0..b {
                    for j in 0..c {
                        let target = if j == labels[r] { 1.0 } else { 0.0 };
                        dl[r * c + j] += g[0] * (probs[r * c + j] - target) / b as f64;
                    }
                }
            }
            Op::Sum { x } => {
                let dx = acc(grads, *x, len(*x));
                dx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Ok(())
    }
}

/// Rejects batches that cannot form a triplet: at least two identities, each
/// with at least two samples.
pub fn check_triplet_batch(labels: &[usize]) -> Result<()> {
    let mut counts = std::collections::BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    if counts.len() < 2 {
        return Err(Error::Sampling(format!(
            "triplet batch needs >= 2 identities, got {}",
            counts.len()
        )));
    }
    if let Some((id, _)) = counts.iter().find(|(_, &c)| c < 2) {
        return Err(Error::Sampling(format!("identity {id} has fewer than 2 samples in the batch")));
    }
    Ok(())
}
