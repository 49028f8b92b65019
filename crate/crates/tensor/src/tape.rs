//! Recorded operation graph and reverse-mode differentiation.
//!
//! Every primitive appends one node holding its output value and whatever
//! the backward pass needs. Nodes are append-only, so node order is a
//! topological order and `backward` is a single reverse sweep.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::kernels::{col2im3, gemm_a_bt_acc, gemm_acc, gemm_at_b_acc, im2col3};
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::Tensor;

pub const BATCHNORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Train/eval switch for batchnorm and dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel batch statistics observed by a train-mode batchnorm.
/// `var` is the unbiased estimate, as used for running moments.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchMoments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Source of normalization statistics for [`Tape::batchnorm`].
#[derive(Clone, Copy, Debug)]
pub enum NormStats<'a> {
    Batch,
    Running { mean: &'a [f64], var: &'a [f64] },
}

#[derive(Debug)]
enum Op {
    Constant,
    Variable,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Abs(Var),
    LeakyRelu(Var, f64),
    Log(Var),
    Exp(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Sum(Var),
    Mean(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    Conv2d(Var, Var),
    MaxPool2(Var, Vec<usize>),
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Dropout(Var, Vec<f64>),
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    Element(Var, usize),
    PairwiseAbsDiff(Var),
    SymFromPairs(Var, usize),
    PairwiseDist(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar loss with respect to the leaves of a tape.
#[derive(Debug)]
pub struct Gradients {
    leaves: HashMap<Var, Tensor>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    /// Gradient for a leaf created by [`Tape::variable`] or [`Tape::param`].
    /// `None` means the leaf was not reachable from the loss.
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.leaves.get(&var)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|v| self.leaves.get(v))
    }

    /// Dense per-parameter gradients: zero for unreachable entries and for
    /// parameters never bound on the tape.
    pub fn to_param_grads(&self, store: &ParamStore) -> ParamGrads {
        let mut out = ParamGrads::zeros_like(store);
        for id in store.ids() {
            if let Some(g) = self.param(id) {
                out.get_mut(id).data_mut().copy_from_slice(g.data());
            }
        }
        out
    }
}

/// Append-only operation record. One tape per forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = match &op {
            Op::Constant => false,
            Op::Variable => true,
            _ => op_inputs(&op).iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant)
    }

    /// A leaf whose gradient is reported by `backward`.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Variable)
    }

    /// Binds a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = if store.is_trainable(id) {
            self.variable(store.get(id).clone())
        } else {
            self.constant(store.get(id).clone())
        };
        self.params.insert(id, v);
        v
    }

    /// Copies `v` into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        match *s {
            [r, c] => Ok((r, c)),
            _ => Err(TensorError::Rank { op, expected: 2, shape: s.to_vec() }),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b)))
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(op, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    /// Adds a length-`m` bias to every row of an `n×m` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (n, m) = self.dims2("add_bias", a)?;
        if self.value(bias).numel() != m {
            return Err(TensorError::Shape {
                op: "add_bias",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias).data();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(m) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        Ok(self.push(Tensor::new(&[n, m], out)?, Op::AddBias(a, bias)))
    }

    /// `x·W + b`, the fully-connected layer.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        match bias {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|v| v * c);
        self.push(t, Op::Scale(a, c))
    }

    /// Multiplies every entry of `a` by the single-element tensor `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(TensorError::Shape {
                op: "mul_scalar",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(s).to_vec(),
            });
        }
        let c = self.value(s).item();
        let t = self.value(a).map(|v| v * c);
        Ok(self.push(t, Op::MulScalar(a, s)))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::abs);
        self.push(t, Op::Abs(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let t = self.value(a).map(|v| if v >= 0.0 { v } else { slope * v });
        self.push(t, Op::LeakyRelu(a, slope))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(f64::ln);
        if !t.is_finite() {
            return Err(TensorError::NonFinite { op: "log" });
        }
        Ok(self.push(t, Op::Log(a)))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::exp);
        self.push(t, Op::Exp(a))
    }

    /// Concatenates rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat_cols of nothing".into()))?;
        let (n, _) = self.dims2("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2("concat_cols", p)?;
            if r != n {
                return Err(TensorError::Shape {
                    op: "concat_cols",
                    lhs: self.shape(first).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(Tensor::new(&[n, total], out)?, Op::ConcatCols(parts.to_vec())))
    }

    /// Columns `start..end` of a rank-2 tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (n, m) = self.dims2("slice_cols", a)?;
        if start >= end || end > m {
            return Err(TensorError::Index { op: "slice_cols", index: end, extent: m });
        }
        let w = end - start;
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(n * w);
        for i in 0..n {
            out.extend_from_slice(&src[i * m + start..i * m + end]);
        }
        Ok(self.push(Tensor::new(&[n, w], out)?, Op::SliceCols(a, start)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.sum() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Row-wise softmax, stabilized by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.softmax_rows_masked(a, None)
    }

    /// Row-wise softmax restricted to entries where `keep` is true; masked
    /// entries come out as exactly zero and receive no gradient.
    pub fn softmax_rows_masked(&mut self, a: Var, keep: Option<&[bool]>) -> Result<Var> {
        let (n, m) = self.dims2("softmax_rows", a)?;
        let x = self.value(a).data();
        if let Some(mask) = keep {
            if mask.len() != n * m {
                return Err(TensorError::Shape { op: "softmax_rows", lhs: vec![n, m], rhs: vec![mask.len()] });
            }
        }
        let kept = |idx: usize| keep.is_none_or(|mask| mask[idx]);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let mut max = f64::NEG_INFINITY;
            for j in 0..m {
                let v = x[i * m + j];
                if v.is_nan() || (kept(i * m + j) && !v.is_finite()) {
                    return Err(TensorError::NonFinite { op: "softmax_rows" });
                }
                if kept(i * m + j) {
                    max = max.max(v);
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(TensorError::Contract(format!("softmax_rows: row {i} fully masked")));
            }
            let mut total = 0.0;
            for j in 0..m {
                if kept(i * m + j) {
                    let e = (x[i * m + j] - max).exp();
                    out[i * m + j] = e;
                    total += e;
                }
            }
            for o in &mut out[i * m..(i + 1) * m] {
                *o /= total;
            }
        }
        Ok(self.push(Tensor::new(&[n, m], out)?, Op::SoftmaxRows(a)))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (n, m) = self.dims2("log_softmax_rows", a)?;
        let x = self.value(a).data();
        if x.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "log_softmax_rows" });
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &x[i * m..(i + 1) * m];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for j in 0..m {
                out[i * m + j] = row[j] - lse;
            }
        }
        Ok(self.push(Tensor::new(&[n, m], out)?, Op::LogSoftmaxRows(a)))
    }

    /// 3×3 cross-correlation with zero padding 1 and stride 1:
    /// `[b,c,h,w] ⊛ [f,c,3,3] → [b,f,h,w]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var) -> Result<Var> {
        let (b, c, h, w) = dims4("conv2d", self.shape(input))?;
        let (f, kc, kh, kw) = dims4("conv2d", self.shape(kernel))?;
        if kc != c || kh != 3 || kw != 3 {
            return Err(TensorError::Shape {
                op: "conv2d",
                lhs: self.shape(input).to_vec(),
                rhs: self.shape(kernel).to_vec(),
            });
        }
        let hw = h * w;
        let x = self.value(input).data();
        let k = self.value(kernel).data();
        let mut cols = vec![0.0; c * 9 * hw];
        let mut out = vec![0.0; b * f * hw];
        for bi in 0..b {
            im2col3(&x[bi * c * hw..(bi + 1) * c * hw], c, h, w, &mut cols);
            gemm_acc(k, &cols, &mut out[bi * f * hw..(bi + 1) * f * hw], f, c * 9, hw);
        }
        Ok(self.push(Tensor::new(&[b, f, h, w], out)?, Op::Conv2d(input, kernel)))
    }

    /// 2×2 max-pooling with stride 2. Ties go to the first element of the
    /// window in row-major order.
    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let (b, c, h, w) = dims4("maxpool2", self.shape(input))?;
        if h < 2 || w < 2 {
            return Err(TensorError::InvalidShape {
                shape: self.shape(input).to_vec(),
                reason: "maxpool2 needs spatial extents of at least 2",
            });
        }
        let (oh, ow) = (h / 2, w / 2);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut argmax = Vec::with_capacity(b * c * oh * ow);
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + (2 * oy) * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        Ok(self.push(Tensor::new(&[b, c, oh, ow], out)?, Op::MaxPool2(input, argmax)))
    }

    /// Per-channel normalization of `[b, c, ...]` input.
    ///
    /// With [`NormStats::Batch`] the batch statistics are used and returned
    /// so the caller can update its running moments; a batch of one is
    /// rejected. With [`NormStats::Running`] the supplied moments are used.
    pub fn batchnorm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: NormStats<'_>,
    ) -> Result<(Var, Option<BatchMoments>)> {
        let shape = self.shape(input).to_vec();
        if shape.len() < 2 {
            return Err(TensorError::Rank { op: "batchnorm", expected: 2, shape });
        }
        let (b, c) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        for p in [gamma, beta] {
            if self.value(p).numel() != c {
                return Err(TensorError::Shape { op: "batchnorm", lhs: shape.clone(), rhs: self.shape(p).to_vec() });
            }
        }
        let x = self.value(input).data();
        let count = (b * spatial) as f64;
        let (mean, var, moments) = match stats {
            NormStats::Batch => {
                if b < 2 {
                    return Err(TensorError::DegenerateBatch { op: "batchnorm", batch: b });
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * spatial;
                        mean[ci] += x[base..base + spatial].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count);
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * spatial;
                        var[ci] += x[base..base + spatial].iter().map(|v| (v - mean[ci]).powi(2)).sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count);
                let unbiased = var.iter().map(|v| v * count / (count - 1.0)).collect();
                let moments = BatchMoments { mean: mean.clone(), var: unbiased };
                (mean, var, Some(moments))
            }
            NormStats::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(TensorError::Shape { op: "batchnorm", lhs: shape.clone(), rhs: vec![mean.len()] });
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCHNORM_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * spatial;
                for s in base..base + spatial {
                    xhat[s] = (x[s] - mean[ci]) * inv_std[ci];
                    out[s] = g[ci] * xhat[s] + bt[ci];
                }
            }
        }
        let op = Op::BatchNorm {
            input,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats: moments.is_some(),
        };
        Ok((self.push(Tensor::new(&shape, out)?, op), moments))
    }

    /// Inverted dropout: in train mode each entry is zeroed with probability
    /// `p` and survivors are scaled by `1/(1-p)`; eval mode is the identity.
    pub fn dropout(&mut self, a: Var, p: f64, mode: Mode, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Contract(format!("dropout probability {p} outside [0,1)")));
        }
        let n = self.value(a).numel();
        let mask: Vec<f64> = match mode {
            Mode::Eval => vec![1.0; n],
            Mode::Train => {
                let keep = 1.0 / (1.0 - p);
                (0..n).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect()
            }
        };
        let t = self.value(a);
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let out = Tensor::new(t.shape(), data)?;
        Ok(self.push(out, Op::Dropout(a, mask)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a)))
    }

    /// Selects rows `idx` (repeats allowed) of a rank-2 tensor.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (n, m) = self.dims2("gather_rows", a)?;
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(idx.len() * m);
        for &i in idx {
            if i >= n {
                return Err(TensorError::Index { op: "gather_rows", index: i, extent: n });
            }
            out.extend_from_slice(&src[i * m..(i + 1) * m]);
        }
        Ok(self.push(Tensor::new(&[idx.len(), m], out)?, Op::GatherRows(a, idx.to_vec())))
    }

    /// Places row `r` of `a` at row `idx[r]` of an `n_rows`-row zero matrix
    /// (summing on collisions). Adjoint of [`Tape::gather_rows`].
    pub fn scatter_rows(&mut self, a: Var, idx: &[usize], n_rows: usize) -> Result<Var> {
        let (k, m) = self.dims2("scatter_rows", a)?;
        if idx.len() != k {
            return Err(TensorError::Shape { op: "scatter_rows", lhs: vec![k, m], rhs: vec![idx.len()] });
        }
        let src = self.value(a).data();
        let mut out = vec![0.0; n_rows * m];
        for (r, &i) in idx.iter().enumerate() {
            if i >= n_rows {
                return Err(TensorError::Index { op: "scatter_rows", index: i, extent: n_rows });
            }
            for j in 0..m {
                out[i * m + j] += src[r * m + j];
            }
        }
        Ok(self.push(Tensor::new(&[n_rows, m], out)?, Op::ScatterRows(a, idx.to_vec())))
    }

    /// The flat element `i` as a one-element tensor.
    pub fn element(&mut self, a: Var, i: usize) -> Result<Var> {
        let n = self.value(a).numel();
        if i >= n {
            return Err(TensorError::Index { op: "element", index: i, extent: n });
        }
        let v = self.value(a).data()[i];
        Ok(self.push(Tensor::scalar(v), Op::Element(a, i)))
    }

    /// `|x_i − x_j|` for every unordered pair `i ≤ j` of rows of `x[n×d]`,
    /// stacked in row-major pair order into `[n(n+1)/2 × d]`. Each pair is
    /// computed exactly once, so anything built from it is bitwise symmetric.
    pub fn pairwise_abs_diff(&mut self, x: Var) -> Result<Var> {
        let (n, d) = self.dims2("pairwise_abs_diff", x)?;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * (n + 1) / 2 * d);
        for i in 0..n {
            for j in i..n {
                let (ri, rj) = (&src[i * d..(i + 1) * d], &src[j * d..(j + 1) * d]);
                out.extend(ri.iter().zip(rj).map(|(a, b)| (a - b).abs()));
            }
        }
        Ok(self.push(Tensor::new(&[n * (n + 1) / 2, d], out)?, Op::PairwiseAbsDiff(x)))
    }

    /// Inverse layout of [`Tape::pairwise_abs_diff`]: spreads one value per
    /// unordered pair into a symmetric `n×n` matrix.
    pub fn sym_from_pairs(&mut self, pairs: Var, n: usize) -> Result<Var> {
        let p = n * (n + 1) / 2;
        if self.value(pairs).numel() != p {
            return Err(TensorError::Shape { op: "sym_from_pairs", lhs: self.shape(pairs).to_vec(), rhs: vec![p] });
        }
        let v = self.value(pairs).data();
        let mut out = vec![0.0; n * n];
        let mut k = 0;
        for i in 0..n {
            for j in i..n {
                out[i * n + j] = v[k];
                out[j * n + i] = v[k];
                k += 1;
            }
        }
        Ok(self.push(Tensor::new(&[n, n], out)?, Op::SymFromPairs(pairs, n)))
    }

    /// Euclidean distances between rows, `[n×d] → [n×n]`. The gradient at a
    /// zero distance is taken as zero.
    pub fn pairwise_dist(&mut self, x: Var) -> Result<Var> {
        let (n, d) = self.dims2("pairwise_dist", x)?;
        let src = self.value(x).data();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let dist = src[i * d..(i + 1) * d]
                    .iter()
                    .zip(&src[j * d..(j + 1) * d])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                out[i * n + j] = dist;
                out[j * n + i] = dist;
            }
        }
        Ok(self.push(Tensor::new(&[n, n], out)?, Op::PairwiseDist(x)))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let loss_shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss_shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaves = HashMap::new();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if let Op::Variable = node.op {
                leaves.insert(Var(idx), Tensor::new(node.value.shape(), g)?);
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients { leaves, params: self.params.clone() })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: &Var| nodes[v.0].value.data();
        let shape = |v: &Var| nodes[v.0].value.shape();
        // Accumulates into the gradient buffer of `v` if it needs one.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(buf);
        };

        match &node.op {
            Op::Constant | Op::Variable => {}
            Op::MatMul(a, b) => {
                let (m, k) = (shape(a)[0], shape(a)[1]);
                let n = shape(b)[1];
                acc(*a, &mut |da| gemm_a_bt_acc(g, val(b), da, m, n, k));
                acc(*b, &mut |db| gemm_at_b_acc(val(a), g, db, m, k, n));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| add_into(db, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| db.iter_mut().zip(g).for_each(|(d, gv)| *d -= gv));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(a), val(b));
                acc(*a, &mut |da| {
                    for i in 0..da.len() {
                        da[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &mut |db| {
                    for i in 0..db.len() {
                        db[i] += g[i] * av[i];
                    }
                });
            }
            Op::AddBias(a, b) => {
                let m = shape(b).iter().product::<usize>();
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| {
                    for row in g.chunks(m) {
                        add_into(db, row);
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |da| da.iter_mut().zip(g).for_each(|(d, gv)| *d += c * gv)),
            Op::MulScalar(a, s) => {
                let c = val(s)[0];
                let av = val(a);
                acc(*a, &mut |da| da.iter_mut().zip(g).for_each(|(d, gv)| *d += c * gv));
                acc(*s, &mut |ds| ds[0] += g.iter().zip(av).map(|(gv, x)| gv * x).sum::<f64>());
            }
            Op::Abs(a) => {
                let av = val(a);
                acc(*a, &mut |da| {
                    for i in 0..da.len() {
                        let sign = if av[i] > 0.0 {
                            1.0
                        } else if av[i] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        da[i] += g[i] * sign;
                    }
                });
            }
            Op::LeakyRelu(a, slope) => {
                let av = val(a);
                acc(*a, &mut |da| {
                    for i in 0..da.len() {
                        da[i] += if av[i] >= 0.0 { g[i] } else { slope * g[i] };
                    }
                });
            }
            Op::Log(a) => {
                let av = val(a);
                acc(*a, &mut |da| {
                    for i in 0..da.len() {
                        da[i] += g[i] / av[i];
                    }
                });
            }
            Op::Exp(a) => {
                let y = node.value.data();
                acc(*a, &mut |da| {
                    for i in 0..da.len() {
                        da[i] += g[i] * y[i];
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let n = node.value.shape()[0];
                let total = node.value.shape()[1];
                let mut offset = 0;
                for p in parts {
                    let w = shape(p)[1];
                    acc(*p, &mut |dp| {
                        for i in 0..n {
                            add_into(&mut dp[i * w..(i + 1) * w], &g[i * total + offset..i * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceCols(a, start) => {
                let m = shape(a)[1];
                let (n, w) = (node.value.shape()[0], node.value.shape()[1]);
                acc(*a, &mut |da| {
                    for i in 0..n {
                        add_into(&mut da[i * m + start..i * m + start + w], &g[i * w..(i + 1) * w]);
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |da| da.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(a) => {
                let scale = g[0] / nodes[a.0].value.numel() as f64;
                acc(*a, &mut |da| da.iter_mut().for_each(|d| *d += scale));
            }
            Op::SoftmaxRows(a) => {
                let y = node.value.data();
                let m = node.value.shape()[1];
                acc(*a, &mut |da| {
                    for (i, row) in y.chunks(m).enumerate() {
                        let gr = &g[i * m..(i + 1) * m];
                        let inner: f64 = row.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for j in 0..m {
                            da[i * m + j] += row[j] * (gr[j] - inner);
                        }
                    }
                });
            }
            Op::LogSoftmaxRows(a) => {
                let y = node.value.data();
                let m = node.value.shape()[1];
                acc(*a, &mut |da| {
                    for (i, row) in y.chunks(m).enumerate() {
                        let gr = &g[i * m..(i + 1) * m];
                        let total: f64 = gr.iter().sum();
                        for j in 0..m {
                            da[i * m + j] += gr[j] - row[j].exp() * total;
                        }
                    }
                });
            }
            Op::Conv2d(input, kernel) => {
                let (b, c, h, w) = (shape(input)[0], shape(input)[1], shape(input)[2], shape(input)[3]);
                let f = shape(kernel)[0];
                let hw = h * w;
                let x = val(input);
                let k = val(kernel);
                let mut cols = vec![0.0; c * 9 * hw];
                if nodes[kernel.0].needs_grad {
                    acc(*kernel, &mut |dk| {
                        for bi in 0..b {
                            im2col3(&x[bi * c * hw..(bi + 1) * c * hw], c, h, w, &mut cols);
                            gemm_a_bt_acc(&g[bi * f * hw..(bi + 1) * f * hw], &cols, dk, f, hw, c * 9);
                        }
                    });
                }
                acc(*input, &mut |dx| {
                    let mut dcols = vec![0.0; c * 9 * hw];
                    for bi in 0..b {
                        dcols.iter_mut().for_each(|v| *v = 0.0);
                        gemm_at_b_acc(k, &g[bi * f * hw..(bi + 1) * f * hw], &mut dcols, f, c * 9, hw);
                        col2im3(&dcols, c, h, w, &mut dx[bi * c * hw..(bi + 1) * c * hw]);
                    }
                });
            }
            Op::MaxPool2(a, argmax) => acc(*a, &mut |da| {
                for (o, &src) in argmax.iter().enumerate() {
                    da[src] += g[o];
                }
            }),
            Op::BatchNorm { input, gamma, beta, xhat, inv_std, batch_stats } => {
                let s = shape(input);
                let (b, c) = (s[0], s[1]);
                let spatial: usize = s[2..].iter().product();
                let count = (b * spatial) as f64;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * spatial;
                        for idx in base..base + spatial {
                            sum_g[ci] += g[idx];
                            sum_gx[ci] += g[idx] * xhat[idx];
                        }
                    }
                }
                let gam = val(gamma);
                acc(*gamma, &mut |dg| add_into(dg, &sum_gx));
                acc(*beta, &mut |db| add_into(db, &sum_g));
                acc(*input, &mut |dx| {
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * spatial;
                            let k = gam[ci] * inv_std[ci];
                            for idx in base..base + spatial {
                                dx[idx] += if *batch_stats {
                                    k * (g[idx] - sum_g[ci] / count - xhat[idx] * sum_gx[ci] / count)
                                } else {
                                    k * g[idx]
                                };
                            }
                        }
                    }
                });
            }
            Op::Dropout(a, mask) => acc(*a, &mut |da| {
                for i in 0..da.len() {
                    da[i] += g[i] * mask[i];
                }
            }),
            Op::Reshape(a) => acc(*a, &mut |da| add_into(da, g)),
            Op::GatherRows(a, idx) => {
                let m = shape(a)[1];
                acc(*a, &mut |da| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut da[i * m..(i + 1) * m], &g[r * m..(r + 1) * m]);
                    }
                });
            }
            Op::ScatterRows(a, idx) => {
                let m = shape(a)[1];
                acc(*a, &mut |da| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut da[r * m..(r + 1) * m], &g[i * m..(i + 1) * m]);
                    }
                });
            }
            Op::Element(a, i) => acc(*a, &mut |da| da[*i] += g[0]),
            Op::PairwiseAbsDiff(x) => {
                let (n, d) = (shape(x)[0], shape(x)[1]);
                let xv = val(x);
                acc(*x, &mut |dx| {
                    let mut p = 0;
                    for i in 0..n {
                        for j in i..n {
                            for t in 0..d {
                                let diff = xv[i * d + t] - xv[j * d + t];
                                let gp = g[p * d + t];
                                if diff > 0.0 {
                                    dx[i * d + t] += gp;
                                    dx[j * d + t] -= gp;
                                } else if diff < 0.0 {
                                    dx[i * d + t] -= gp;
                                    dx[j * d + t] += gp;
                                }
                            }
                            p += 1;
                        }
                    }
                });
            }
            Op::SymFromPairs(pairs, n) => {
                let n = *n;
                acc(*pairs, &mut |dp| {
                    let mut k = 0;
                    for i in 0..n {
                        for j in i..n {
                            dp[k] += if i == j { g[i * n + j] } else { g[i * n + j] + g[j * n + i] };
                            k += 1;
                        }
                    }
                });
            }
            Op::PairwiseDist(x) => {
                let (n, d) = (shape(x)[0], shape(x)[1]);
                let xv = val(x);
                let dist = node.value.data();
                acc(*x, &mut |dx| {
                    for i in 0..n {
                        for j in 0..n {
                            let dij = dist[i * n + j];
                            if i == j || dij == 0.0 {
                                continue;
                            }
                            let coef = (g[i * n + j] + g[j * n + i]) / dij;
                            if j > i {
                                for t in 0..d {
                                    let diff = xv[i * d + t] - xv[j * d + t];
                                    dx[i * d + t] += coef * diff;
                                    dx[j * d + t] -= coef * diff;
                                }
                            }
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn dims4(op: &'static str, s: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *s {
        [a, b, c, d] => Ok((a, b, c, d)),
        _ => Err(TensorError::Rank { op, expected: 4, shape: s.to_vec() }),
    }
}

fn op_inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Constant | Op::Variable => vec![],
        Op::MatMul(a, b)
        | Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::AddBias(a, b)
        | Op::MulScalar(a, b)
        | Op::Conv2d(a, b) => vec![*a, *b],
        Op::Scale(a, _)
        | Op::Abs(a)
        | Op::LeakyRelu(a, _)
        | Op::Log(a)
        | Op::Exp(a)
        | Op::SliceCols(a, _)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::SoftmaxRows(a)
        | Op::LogSoftmaxRows(a)
        | Op::MaxPool2(a, _)
        | Op::Dropout(a, _)
        | Op::Reshape(a)
        | Op::GatherRows(a, _)
        | Op::ScatterRows(a, _)
        | Op::Element(a, _)
        | Op::PairwiseAbsDiff(a)
        | Op::SymFromPairs(a, _)
        | Op::PairwiseDist(a) => vec![*a],
        Op::ConcatCols(parts) => parts.clone(),
        Op::BatchNorm { input, gamma, beta, .. } => vec![*input, *gamma, *beta],
    }
}
