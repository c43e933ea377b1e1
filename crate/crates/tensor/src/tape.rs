//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends one node whose inputs already exist on the tape, so
//! insertion order is a topological order and backward is a single reverse
//! sweep.

use std::collections::HashMap;

use crate::kernels::{axpy, matmul_nn, matmul_nt, matmul_tn};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::{strides, Result, Tensor, TensorError};

pub const NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Operation tag of a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    Scale,
    AddConst,
    MulScalar,
    AddBias,
    AddRowBias,
    Elu,
    Tanh,
    Sigmoid,
    Relu,
    Softmax,
    LayerNorm,
    BatchNorm,
    MaxPool,
    Sum,
    Mean,
    MeanRows,
    Reshape,
    Permute,
    Concat,
    Slice,
    GatherRows,
    Im2Col3d,
    Upsample,
    SoftmaxCrossEntropy,
}

/// Sliding-window layout of a 3D convolution over a `[C, T, H, W]` input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeometry {
    pub fn output_extents(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.pad[a];
            if self.stride[a] == 0 || padded < self.kernel[a] {
                return Err(TensorError::dim(
                    "im2col3d",
                    format!("axis {a}: extent {} too small for kernel {}", input[a], self.kernel[a]),
                ));
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Ok(out)
    }
}

/// Normalization statistics source for [`Tape::batch_norm`].
#[derive(Debug, Clone)]
pub enum BatchNormMode<F> {
    /// Normalize with the statistics of the current batch (biased variance).
    Batch,
    /// Normalize with externally supplied per-feature mean and variance.
    Fixed { mean: Vec<F>, var: Vec<F> },
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul { a: Var, b: Var },
    Transpose { a: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: F },
    AddConst { a: Var },
    MulScalar { a: Var, s: Var },
    AddBias { a: Var, b: Var },
    AddRowBias { a: Var, b: Var },
    Elu { a: Var },
    Tanh { a: Var },
    Sigmoid { a: Var },
    Relu { a: Var },
    Softmax { a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<F>, inv: Vec<F> },
    BatchNorm { x: Var, gain: Var, bias: Var, xhat: Vec<F>, inv: Vec<F>, batch: bool, mean: Vec<F>, var: Vec<F> },
    MaxPool { a: Var, argmax: Vec<usize>, windows: Vec<usize> },
    Sum { a: Var },
    Mean { a: Var },
    MeanRows { a: Var },
    Reshape { a: Var },
    Permute { a: Var, axes: Vec<usize> },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    GatherRows { table: Var, ids: Vec<usize> },
    Im2Col3d { a: Var, geom: ConvGeometry },
    Upsample { a: Var, factors: Vec<usize> },
    SoftmaxCrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<F> },
}

impl<F> Op<F> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Transpose { .. } => OpKind::Transpose,
            Op::Add { .. } => OpKind::Add,
            Op::Sub { .. } => OpKind::Sub,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::AddConst { .. } => OpKind::AddConst,
            Op::MulScalar { .. } => OpKind::MulScalar,
            Op::AddBias { .. } => OpKind::AddBias,
            Op::AddRowBias { .. } => OpKind::AddRowBias,
            Op::Elu { .. } => OpKind::Elu,
            Op::Tanh { .. } => OpKind::Tanh,
            Op::Sigmoid { .. } => OpKind::Sigmoid,
            Op::Relu { .. } => OpKind::Relu,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::MaxPool { .. } => OpKind::MaxPool,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
            Op::MeanRows { .. } => OpKind::MeanRows,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Permute { .. } => OpKind::Permute,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::Im2Col3d { .. } => OpKind::Im2Col3d,
            Op::Upsample { .. } => OpKind::Upsample,
            Op::SoftmaxCrossEntropy { .. } => OpKind::SoftmaxCrossEntropy,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b }
            | Op::Add { a, b }
            | Op::Sub { a, b }
            | Op::Mul { a, b }
            | Op::AddBias { a, b }
            | Op::AddRowBias { a, b } => vec![*a, *b],
            Op::MulScalar { a, s } => vec![*a, *s],
            Op::Transpose { a }
            | Op::Scale { a, .. }
            | Op::AddConst { a }
            | Op::Elu { a }
            | Op::Tanh { a }
            | Op::Sigmoid { a }
            | Op::Relu { a }
            | Op::Softmax { a }
            | Op::MaxPool { a, .. }
            | Op::Sum { a }
            | Op::Mean { a }
            | Op::MeanRows { a }
            | Op::Reshape { a }
            | Op::Permute { a, .. }
            | Op::Slice { a, .. }
            | Op::Im2Col3d { a, .. }
            | Op::Upsample { a, .. } => vec![*a],
            Op::LayerNorm { x, gain, bias, .. } | Op::BatchNorm { x, gain, bias, .. } => {
                vec![*x, *gain, *bias]
            }
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::GatherRows { table, .. } => vec![*table],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Ordered record of every operation in one forward pass.
#[derive(Debug)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    params: HashMap<ParamId, Var>,
    fault: Option<(OpKind, F)>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward sweep, indexed by node.
#[derive(Debug)]
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<F>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Every node in insertion order.
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    /// Test hook: scale the upstream gradient of every `kind` node by
    /// `factor` during backward, emulating a wrong derivative rule.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, kind: OpKind, factor: F) {
        self.fault = Some((kind, factor));
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf for a stored parameter; repeated requests return the same node.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.leaf(p.value.clone(), p.trainable);
        self.params.insert(id, v);
        v
    }

    /// Parameters bound to this tape, in binding order.
    pub fn bound_params(&self) -> Vec<(ParamId, Var)> {
        let mut out: Vec<_> = self.params.iter().map(|(&p, &v)| (p, v)).collect();
        out.sort_by_key(|(_, v)| *v);
        out
    }

    // ---------------------------------------------------------------
    // Linear algebra
    // ---------------------------------------------------------------

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::zero(); m * n];
        matmul_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(TensorError::dim("transpose", format!("expected rank 2, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let value = Tensor::new(&[c, r], transpose_data(self.value(a).data(), r, c))?;
        Ok(self.push(value, Op::Transpose { a }))
    }

    // ---------------------------------------------------------------
    // Elementwise
    // ---------------------------------------------------------------

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::mismatch(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape(), data)
    }

    fn map(&self, a: Var, f: impl Fn(F) -> F) -> Tensor<F> {
        let t = self.value(a);
        Tensor::new(t.shape(), t.data().iter().map(|&x| f(x)).collect()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let v = self.map(a, |x| x * c);
        self.push(v, Op::Scale { a, c })
    }

    pub fn add_const(&mut self, a: Var, c: F) -> Var {
        let v = self.map(a, |x| x + c);
        self.push(v, Op::AddConst { a })
    }

    /// Multiply every element of `a` by the single element of `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(TensorError::dim("mul_scalar", format!("factor has shape {:?}", self.shape(s))));
        }
        let c = self.value(s).item();
        let v = self.map(a, |x| x * c);
        Ok(self.push(v, Op::MulScalar { a, s }))
    }

    /// Add `b[n]` to every last-axis slice of `a[..., n]`.
    pub fn add_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let n = ta.last_dim();
        if tb.numel() != n {
            return Err(TensorError::mismatch("add_bias", ta.shape(), tb.shape()));
        }
        let bias = tb.data();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n) {
            for (x, &bv) in row.iter_mut().zip(bias) {
                *x += bv;
            }
        }
        let v = Tensor::new(ta.shape(), data)?;
        Ok(self.push(v, Op::AddBias { a, b }))
    }

    /// Add `b[r]` to every element of row `i` of `a[r × c]`.
    pub fn add_row_bias(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.numel() != ta.shape()[0] {
            return Err(TensorError::mismatch("add_row_bias", ta.shape(), tb.shape()));
        }
        let c = ta.shape()[1];
        let mut data = ta.data().to_vec();
        for (row, &bv) in data.chunks_mut(c).zip(tb.data()) {
            row.iter_mut().for_each(|x| *x += bv);
        }
        let v = Tensor::new(ta.shape(), data)?;
        Ok(self.push(v, Op::AddRowBias { a, b }))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| if x > F::zero() { x } else { x.exp_m1() });
        self.push(v, Op::Elu { a })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| x.tanh());
        self.push(v, Op::Tanh { a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| {
            if x >= F::zero() {
                F::one() / (F::one() + (-x).exp())
            } else {
                let e = x.exp();
                e / (F::one() + e)
            }
        });
        self.push(v, Op::Sigmoid { a })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| if x > F::zero() { x } else { F::zero() });
        self.push(v, Op::Relu { a })
    }

    // ---------------------------------------------------------------
    // Normalization
    // ---------------------------------------------------------------

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() == 0 {
            return Err(TensorError::dim("softmax", "rank-0 input has no last axis"));
        }
        let n = t.last_dim();
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let v = Tensor::new(t.shape(), data)?;
        Ok(self.push(v, Op::Softmax { a }))
    }

    /// Layer normalization over the last axis followed by `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.last_dim();
        if tx.rank() == 0 || d < 2 {
            return Err(TensorError::dim("layer_norm", format!("normalized extent must be >= 2, shape {:?}", tx.shape())));
        }
        let (tg, tb) = (self.value(gain), self.value(bias));
        if tg.numel() != d || tb.numel() != d {
            return Err(TensorError::mismatch("layer_norm", tx.shape(), tg.shape()));
        }
        let eps = F::lit(NORM_EPS);
        let df = F::lit(d as f64);
        let rows = tx.numel() / d;
        let mut xhat = vec![F::zero(); tx.numel()];
        let mut inv = vec![F::zero(); rows];
        let mut out = vec![F::zero(); tx.numel()];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<F>() / df;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / df;
            let iv = F::one() / (var + eps).sqrt();
            inv[r] = iv;
            for j in 0..d {
                let h = (row[j] - mean) * iv;
                xhat[r * d + j] = h;
                out[r * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let v = Tensor::new(tx.shape(), out)?;
        Ok(self.push(v, Op::LayerNorm { x, gain, bias, xhat, inv }))
    }

    /// Batch normalization of `x[B × n]` per column, then affine.
    pub fn batch_norm(&mut self, x: Var, gain: Var, bias: Var, mode: BatchNormMode<F>) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 {
            return Err(TensorError::dim("batch_norm", format!("expected [batch, features], got {:?}", tx.shape())));
        }
        let (b, n) = (tx.shape()[0], tx.shape()[1]);
        let (tg, tbias) = (self.value(gain), self.value(bias));
        if tg.numel() != n || tbias.numel() != n {
            return Err(TensorError::mismatch("batch_norm", tx.shape(), tg.shape()));
        }
        let eps = F::lit(NORM_EPS);
        let (mean, var, batch) = match mode {
            BatchNormMode::Batch => {
                if b < 2 {
                    return Err(TensorError::Contract(
                        "batch statistics need at least 2 rows; use running statistics for batch size 1".into(),
                    ));
                }
                let bf = F::lit(b as f64);
                let mut mean = vec![F::zero(); n];
                for row in tx.data().chunks(n) {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= bf);
                let mut var = vec![F::zero(); n];
                for row in tx.data().chunks(n) {
                    for j in 0..n {
                        let c = row[j] - mean[j];
                        var[j] += c * c;
                    }
                }
                var.iter_mut().for_each(|v| *v /= bf);
                (mean, var, true)
            }
            BatchNormMode::Fixed { mean, var } => {
                if mean.len() != n || var.len() != n {
                    return Err(TensorError::dim("batch_norm", "running statistics width mismatch"));
                }
                (mean, var, false)
            }
        };
        let inv: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![F::zero(); b * n];
        let mut out = vec![F::zero(); b * n];
        for i in 0..b {
            for j in 0..n {
                let h = (tx.data()[i * n + j] - mean[j]) * inv[j];
                xhat[i * n + j] = h;
                out[i * n + j] = h * tg.data()[j] + tbias.data()[j];
            }
        }
        let v = Tensor::new(tx.shape(), out)?;
        Ok(self.push(v, Op::BatchNorm { x, gain, bias, xhat, inv, batch, mean, var }))
    }

    /// Batch mean and biased variance recorded by a batch-statistics
    /// [`Tape::batch_norm`] node.
    pub fn batch_norm_stats(&self, v: Var) -> Option<(&[F], &[F])> {
        match &self.nodes[v.0].op {
            Op::BatchNorm { batch: true, mean, var, .. } => Some((mean, var)),
            _ => None,
        }
    }

    // ---------------------------------------------------------------
    // Pooling and reductions
    // ---------------------------------------------------------------

    /// Non-overlapping max pooling with the same `window` on each of `axes`.
    pub fn max_pool(&mut self, a: Var, axes: &[usize], window: usize) -> Result<Var> {
        let rank = self.value(a).rank();
        let mut windows = vec![1; rank];
        for &ax in axes {
            if ax >= rank {
                return Err(TensorError::dim("max_pool", format!("axis {ax} out of range for rank {rank}")));
            }
            windows[ax] = window;
        }
        self.max_pool_windows(a, &windows)
    }

    /// Non-overlapping max pooling with a per-axis window. Ties route the
    /// gradient to the lowest flat index in the window.
    pub fn max_pool_windows(&mut self, a: Var, windows: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let shape = t.shape();
        if windows.len() != shape.len() {
            return Err(TensorError::dim("max_pool", format!("{} windows for rank {}", windows.len(), shape.len())));
        }
        for (ax, (&e, &w)) in shape.iter().zip(windows).enumerate() {
            if w == 0 || e % w != 0 {
                return Err(TensorError::dim("max_pool", format!("axis {ax}: extent {e} not divisible by window {w}")));
            }
        }
        let out_shape: Vec<usize> = shape.iter().zip(windows).map(|(e, w)| e / w).collect();
        let in_strides = strides(shape);
        let offsets = window_offsets(windows, &in_strides);
        let out_numel: usize = out_shape.iter().product();
        let mut out = Vec::with_capacity(out_numel);
        let mut argmax = Vec::with_capacity(out_numel);
        let data = t.data();
        let mut coord = vec![0usize; out_shape.len()];
        for _ in 0..out_numel {
            let base: usize = coord
                .iter()
                .zip(windows)
                .zip(&in_strides)
                .map(|((c, w), s)| c * w * s)
                .sum();
            let mut best = base + offsets[0];
            for &o in &offsets[1..] {
                if data[base + o] > data[best] {
                    best = base + o;
                }
            }
            out.push(data[best]);
            argmax.push(best);
            increment(&mut coord, &out_shape);
        }
        let v = Tensor::new(&out_shape, out)?;
        Ok(self.push(v, Op::MaxPool { a, argmax, windows: windows.to_vec() }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { a })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().copied().sum::<F>() / F::lit(t.numel() as f64);
        self.push(Tensor::scalar(s), Op::Mean { a })
    }

    /// Mean over the first axis: `[m, n...]` → `[n...]` flattened to `[n]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() < 2 {
            return Err(TensorError::dim("mean_rows", format!("expected rank >= 2, got {:?}", t.shape())));
        }
        let m = t.shape()[0];
        let n = t.numel() / m;
        let mut out = vec![F::zero(); n];
        for row in t.data().chunks(n) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let mf = F::lit(m as f64);
        out.iter_mut().for_each(|o| *o /= mf);
        let v = Tensor::new(&[n], out)?;
        Ok(self.push(v, Op::MeanRows { a }))
    }

    // ---------------------------------------------------------------
    // Layout
    // ---------------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape { a }))
    }

    /// Reorder axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let rank = t.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&x| x >= rank || std::mem::replace(&mut seen[x], true)) {
            return Err(TensorError::dim("permute", format!("{axes:?} is not a permutation of rank {rank}")));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&x| t.shape()[x]).collect();
        let src = permuted_sources(t.shape(), axes);
        let data: Vec<F> = src.iter().map(|&i| t.data()[i]).collect();
        let v = Tensor::new(&out_shape, data)?;
        Ok(self.push(v, Op::Permute { a, axes: axes.to_vec() }))
    }

    /// Concatenate along `axis`; every other extent must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| TensorError::dim("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::dim("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(TensorError::mismatch("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let v = Tensor::new(&out_shape, data)?;
        Ok(self.push(v, Op::Concat { inputs: inputs.to_vec(), axis }))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let s = t.shape();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(TensorError::dim("slice", format!("[{start}, {}) on axis {axis} of {s:?}", start + len)));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * s[axis] * inner + start * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut out_shape = s.to_vec();
        out_shape[axis] = len;
        let v = Tensor::new(&out_shape, data)?;
        Ok(self.push(v, Op::Slice { a, axis, start }))
    }

    /// Rows of `table[V × D]` selected by `ids`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(TensorError::dim("gather_rows", format!("table must be rank 2, got {:?}", t.shape())));
        }
        if ids.is_empty() {
            return Err(TensorError::dim("gather_rows", "no ids"));
        }
        let (rows, d) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(TensorError::dim("gather_rows", format!("id {id} out of range for {rows} rows")));
            }
            data.extend_from_slice(&t.data()[id * d..(id + 1) * d]);
        }
        let v = Tensor::new(&[ids.len(), d], data)?;
        Ok(self.push(v, Op::GatherRows { table, ids: ids.to_vec() }))
    }

    /// Unfold `x[C, T, H, W]` into `[C·kt·kh·kw, T'·H'·W']` columns with zero
    /// padding, so a 3D convolution becomes `weight[Cout × C·k³] · cols`.
    pub fn im2col3d(&mut self, a: Var, geom: ConvGeometry) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 4 {
            return Err(TensorError::dim("im2col3d", format!("expected [C, T, H, W], got {:?}", t.shape())));
        }
        let s = t.shape();
        let (c, input) = (s[0], [s[1], s[2], s[3]]);
        let out = geom.output_extents(input)?;
        let rows = c * geom.kernel.iter().product::<usize>();
        let cols = out.iter().product::<usize>();
        let mut data = vec![F::zero(); rows * cols];
        im2col_visit(&geom, c, input, out, |r, col, src| {
            data[r * cols + col] = t.data()[src];
        });
        let v = Tensor::new(&[rows, cols], data)?;
        Ok(self.push(v, Op::Im2Col3d { a, geom }))
    }

    /// Nearest-neighbour upsampling by an integer factor per axis.
    pub fn upsample_nearest(&mut self, a: Var, factors: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if factors.len() != t.rank() || factors.contains(&0) {
            return Err(TensorError::dim("upsample", format!("factors {factors:?} for shape {:?}", t.shape())));
        }
        let out_shape: Vec<usize> = t.shape().iter().zip(factors).map(|(e, f)| e * f).collect();
        let src = upsample_sources(t.shape(), factors);
        let data = src.iter().map(|&i| t.data()[i]).collect();
        let v = Tensor::new(&out_shape, data)?;
        Ok(self.push(v, Op::Upsample { a, factors: factors.to_vec() }))
    }

    // ---------------------------------------------------------------
    // Losses
    // ---------------------------------------------------------------

    /// Mean softmax cross-entropy of `logits[B × C]` against class ids.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 2 || t.shape()[0] != targets.len() {
            return Err(TensorError::dim(
                "softmax_cross_entropy",
                format!("logits {:?} for {} targets", t.shape(), targets.len()),
            ));
        }
        let c = t.shape()[1];
        if let Some(&bad) = targets.iter().find(|&&y| y >= c) {
            return Err(TensorError::dim("softmax_cross_entropy", format!("class {bad} out of range for {c}")));
        }
        let mut probs = t.data().to_vec();
        let mut loss = F::zero();
        for (row, &y) in probs.chunks_mut(c).zip(targets) {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<F>().ln() + max;
            loss += lse - row[y];
            softmax_in_place(row);
        }
        let loss = loss / F::lit(targets.len() as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy { logits, targets: targets.to_vec(), probs },
        ))
    }

    /// Smallest distance of any recorded non-smooth op input to its kink:
    /// the gap between the top two entries of each max-pool window and the
    /// magnitude of each rectifier input. Finite differences are only
    /// trustworthy when this exceeds the step size.
    pub fn kink_margin(&self) -> F {
        let mut margin = F::infinity();
        for node in &self.nodes {
            match &node.op {
                Op::MaxPool { a, argmax, windows } => {
                    let t = self.value(*a);
                    let s = strides(t.shape());
                    let offsets = window_offsets(windows, &s);
                    if offsets.len() < 2 {
                        continue;
                    }
                    for &best in argmax {
                        let base = window_base(best, t.shape(), windows, &s);
                        let top = t.data()[best];
                        for &o in &offsets {
                            if base + o != best {
                                margin = margin.min(top - t.data()[base + o]);
                            }
                        }
                    }
                }
                Op::Relu { a } => {
                    for &x in self.value(*a).data() {
                        margin = margin.min(x.abs());
                    }
                }
                _ => {}
            }
        }
        margin
    }

    // ---------------------------------------------------------------
    // Backward
    // ---------------------------------------------------------------

    /// Reverse sweep from a single-element loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_from(&[(loss, vec![F::one()])])
    }

    /// Reverse sweep seeded with explicit upstream gradients.
    pub fn backward_from(&self, seeds: &[(Var, Vec<F>)]) -> Result<Gradients<F>> {
        let n = self.nodes.len();
        let mut needed = vec![false; n];
        for (v, g) in seeds {
            if v.0 >= n || g.len() != self.value(*v).numel() {
                return Err(TensorError::Contract(format!("seed for node {} has wrong size", v.0)));
            }
            needed[v.0] = self.nodes[v.0].requires_grad;
        }
        for i in (0..n).rev() {
            if needed[i] {
                for inp in self.nodes[i].op.inputs() {
                    if self.nodes[inp.0].requires_grad {
                        needed[inp.0] = true;
                    }
                }
            }
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..n)
            .map(|i| needed[i].then(|| vec![F::zero(); self.nodes[i].value.numel()]))
            .collect();
        for (v, g) in seeds {
            if let Some(buf) = grads[v.0].as_mut() {
                for (b, &x) in buf.iter_mut().zip(g) {
                    *b += x;
                }
            }
        }
        for i in (0..n).rev() {
            if !needed[i] || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let mut g = grads[i].take().expect("needed node has a buffer");
            if let Some((kind, factor)) = self.fault {
                if kind == self.nodes[i].op.kind() {
                    g.iter_mut().for_each(|x| *x *= factor);
                }
            }
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, nn) = (sa[0], sa[1], sb[1]);
                if let Some(ga) = grads[a.0].as_mut() {
                    matmul_nt(g, self.value(*b).data(), ga, m, nn, k);
                }
                if let Some(gb) = grads[b.0].as_mut() {
                    matmul_tn(self.value(*a).data(), g, gb, k, m, nn);
                }
            }
            Op::Transpose { a } => {
                if let Some(ga) = grads[a.0].as_mut() {
                    let s = self.shape(*a);
                    let gt = transpose_data(g, s[1], s[0]);
                    add_into(ga, &gt);
                }
            }
            Op::Add { a, b } => {
                if let Some(ga) = grads[a.0].as_mut() {
                    add_into(ga, g);
                }
                if let Some(gb) = grads[b.0].as_mut() {
                    add_into(gb, g);
                }
            }
            Op::Sub { a, b } => {
                if let Some(ga) = grads[a.0].as_mut() {
                    add_into(ga, g);
                }
                if let Some(gb) = grads[b.0].as_mut() {
                    axpy(-F::one(), g, gb);
                }
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = grads[a.0].as_mut() {
                    for ((o, &gi), &bv) in ga.iter_mut().zip(g).zip(vb) {
                        *o += gi * bv;
                    }
                }
                if let Some(gb) = grads[b.0].as_mut() {
                    for ((o, &gi), &av) in gb.iter_mut().zip(g).zip(va) {
                        *o += gi * av;
                    }
                }
            }
            Op::Scale { a, c } => {
                if let Some(ga) = grads[a.0].as_mut() {
                    axpy(*c, g, ga);
                }
            }
            Op::AddConst { a } | Op::Reshape { a } => {
                if let Some(ga) = grads[a.0].as_mut() {
                    add_into(ga, g);
                }
            }
            Op::MulScalar { a, s } => {
                let c = self.value(*s).item();
                if let Some(ga) = grads[a.0].as_mut() {
                    axpy(c, g, ga);
                }
                if let Some(gs) = grads[s.0].as_mut() {
                    let d: F = g.iter().zip(self.value(*a).data()).map(|(&x, &v)| x * v).sum();
                    gs[0] += d;
                }
            }
            Op::AddBias { a, b } => {
                if let Some(ga) = grads[a.0].as_mut() {
                    add_into(ga, g);
                }
                if let Some(gb) = grads[b.0].as_mut() {
                    let n = gb.len();
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                }
            }
            Op::AddRowBias { a, b } => {
                if let Some(ga) = grads[a.0].as_mut() {
                    add_into(ga, g);
                }
                if let Some(gb) = grads[b.0].as_mut() {
                    let c = g.len() / gb.len();
                    for (o, row) in gb.iter_mut().zip(g.chunks(c)) {
                        *o += row.iter().copied().sum::<F>();
                    }
                }
            }
            Op::Elu { a } => {
                if let Some(ga) = grads[a.0].as_mut() {
                    for ((o, &gi), &yv) in ga.iter_mut().zip(g).zip(y) {
                        *o += if yv > F::zero() { gi } else { gi * (yv + F::one()) };
                    }
                }
            }
            Op::Tanh { a } => {
                if let Some(ga) = grads[a.0].as_mut() {
                    for ((o, &gi), &yv) in ga.iter_mut().zip(g).zip(y) {
                        *o += gi * (F::one() - yv * yv);
                    }
                }
            }
            Op::Sigmoid { a } => {
                if let Some(ga) = grads[a.0].as_mut() {
                    for ((o, &gi), &yv) in ga.iter_mut().zip(g).zip(y) {
                        *o += gi * yv * (F::one() - yv);
                    }
                }
            }
            Op::Relu { a } => {
                if let Some(ga) = grads[a.0].as_mut() {
                    for ((o, &gi), &xv) in ga.iter_mut().zip(g).zip(self.value(*a).data()) {
                        if xv > F::zero() {
                            *o += gi;
                        }
                    }
                }
            }
            Op::Softmax { a } => {
                if let Some(ga) = grads[a.0].as_mut() {
                    let n = node.value.last_dim();
                    for ((orow, grow), yrow) in ga.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let s: F = grow.iter().zip(yrow).map(|(&gi, &yi)| gi * yi).sum();
                        for j in 0..n {
                            orow[j] += yrow[j] * (grow[j] - s);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv } => {
                let d = node.value.last_dim();
                let gain_v = self.value(*gain).data();
                if let Some(gg) = grads[gain.0].as_mut() {
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if let Some(gb) = grads[bias.0].as_mut() {
                    for grow in g.chunks(d) {
                        add_into(gb, grow);
                    }
                }
                if let Some(gx) = grads[x.0].as_mut() {
                    let df = F::lit(d as f64);
                    let mut gxh = vec![F::zero(); d];
                    for (r, ((orow, grow), hrow)) in gx.chunks_mut(d).zip(g.chunks(d)).zip(xhat.chunks(d)).enumerate() {
                        for j in 0..d {
                            gxh[j] = grow[j] * gain_v[j];
                        }
                        let s1: F = gxh.iter().copied().sum();
                        let s2: F = gxh.iter().zip(hrow).map(|(&a, &h)| a * h).sum();
                        let k = inv[r] / df;
                        for j in 0..d {
                            orow[j] += k * (df * gxh[j] - s1 - hrow[j] * s2);
                        }
                    }
                }
            }
            Op::BatchNorm { x, gain, bias, xhat, inv, batch, .. } => {
                let s = node.value.shape();
                let (b, n) = (s[0], s[1]);
                let gain_v = self.value(*gain).data();
                if let Some(gg) = grads[gain.0].as_mut() {
                    for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if let Some(gb) = grads[bias.0].as_mut() {
                    for grow in g.chunks(n) {
                        add_into(gb, grow);
                    }
                }
                if let Some(gx) = grads[x.0].as_mut() {
                    if *batch {
                        let bf = F::lit(b as f64);
                        let mut s1 = vec![F::zero(); n];
                        let mut s2 = vec![F::zero(); n];
                        for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                            for j in 0..n {
                                let gh = grow[j] * gain_v[j];
                                s1[j] += gh;
                                s2[j] += gh * hrow[j];
                            }
                        }
                        for (orow, (grow, hrow)) in gx.chunks_mut(n).zip(g.chunks(n).zip(xhat.chunks(n))) {
                            for j in 0..n {
                                let gh = grow[j] * gain_v[j];
                                orow[j] += inv[j] / bf * (bf * gh - s1[j] - hrow[j] * s2[j]);
                            }
                        }
                    } else {
                        for (orow, grow) in gx.chunks_mut(n).zip(g.chunks(n)) {
                            for j in 0..n {
                                orow[j] += grow[j] * gain_v[j] * inv[j];
                            }
                        }
                    }
                }
            }
            Op::MaxPool { a, argmax, .. } => {
                if let Some(ga) = grads[a.0].as_mut() {
                    for (&src, &gi) in argmax.iter().zip(g) {
                        ga[src] += gi;
                    }
                }
            }
            Op::Sum { a } => {
                if let Some(ga) = grads[a.0].as_mut() {
                    ga.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Mean { a } => {
                if let Some(ga) = grads[a.0].as_mut() {
                    let c = g[0] / F::lit(ga.len() as f64);
                    ga.iter_mut().for_each(|o| *o += c);
                }
            }
            Op::MeanRows { a } => {
                if let Some(ga) = grads[a.0].as_mut() {
                    let n = g.len();
                    let m = ga.len() / n;
                    let inv_m = F::one() / F::lit(m as f64);
                    for row in ga.chunks_mut(n) {
                        axpy(inv_m, g, row);
                    }
                }
            }
            Op::Permute { a, axes } => {
                if let Some(ga) = grads[a.0].as_mut() {
                    let src = permuted_sources(self.shape(*a), axes);
                    for (&s, &gi) in src.iter().zip(g) {
                        ga[s] += gi;
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let s = node.value.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let total = s[*axis] * inner;
                let mut offset = 0;
                for v in inputs {
                    let chunk = self.shape(*v)[*axis] * inner;
                    if let Some(gv) = grads[v.0].as_mut() {
                        for o in 0..outer {
                            add_into(&mut gv[o * chunk..(o + 1) * chunk], &g[o * total + offset..o * total + offset + chunk]);
                        }
                    }
                    offset += chunk;
                }
            }
            Op::Slice { a, axis, start } => {
                if let Some(ga) = grads[a.0].as_mut() {
                    let s = self.shape(*a);
                    let outer: usize = s[..*axis].iter().product();
                    let inner: usize = s[axis + 1..].iter().product();
                    let len = node.value.shape()[*axis];
                    for o in 0..outer {
                        let base = o * s[*axis] * inner + start * inner;
                        add_into(&mut ga[base..base + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                    }
                }
            }
            Op::GatherRows { table, ids } => {
                if let Some(gt) = grads[table.0].as_mut() {
                    let d = node.value.shape()[1];
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::Im2Col3d { a, geom } => {
                if let Some(ga) = grads[a.0].as_mut() {
                    let s = self.shape(*a);
                    let input = [s[1], s[2], s[3]];
                    let out = geom.output_extents(input).expect("validated in forward");
                    let cols: usize = out.iter().product();
                    im2col_visit(geom, s[0], input, out, |r, col, src| {
                        ga[src] += g[r * cols + col];
                    });
                }
            }
            Op::Upsample { a, factors } => {
                if let Some(ga) = grads[a.0].as_mut() {
                    let src = upsample_sources(self.shape(*a), factors);
                    for (&s, &gi) in src.iter().zip(g) {
                        ga[s] += gi;
                    }
                }
            }
            Op::SoftmaxCrossEntropy { logits, targets, probs } => {
                if let Some(gl) = grads[logits.0].as_mut() {
                    let c = self.shape(*logits)[1];
                    let scale = g[0] / F::lit(targets.len() as f64);
                    for (b, &y) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == y { F::one() } else { F::zero() };
                            gl[b * c + j] += scale * (probs[b * c + j] - onehot);
                        }
                    }
                }
            }
        }
    }
}

fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn softmax_in_place<F: Real>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut total = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

fn transpose_data<F: Real>(x: &[F], r: usize, c: usize) -> Vec<F> {
    let mut out = vec![F::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

fn increment(coord: &mut [usize], shape: &[usize]) {
    for ax in (0..coord.len()).rev() {
        coord[ax] += 1;
        if coord[ax] < shape[ax] {
            return;
        }
        coord[ax] = 0;
    }
}

/// Flat offsets of every cell of a window, in increasing flat order.
fn window_offsets(windows: &[usize], in_strides: &[usize]) -> Vec<usize> {
    let count: usize = windows.iter().product();
    let mut offsets = Vec::with_capacity(count);
    let mut coord = vec![0usize; windows.len()];
    for _ in 0..count {
        offsets.push(coord.iter().zip(in_strides).map(|(c, s)| c * s).sum());
        increment(&mut coord, windows);
    }
    offsets
}

fn window_base(flat: usize, shape: &[usize], windows: &[usize], in_strides: &[usize]) -> usize {
    let mut base = 0;
    for ax in 0..shape.len() {
        let c = (flat / in_strides[ax]) % shape[ax];
        base += (c / windows[ax]) * windows[ax] * in_strides[ax];
    }
    base
}

/// For each output position of a permutation, the flat input index.
fn permuted_sources(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let numel: usize = shape.iter().product();
    let mut out = Vec::with_capacity(numel);
    let mut coord = vec![0usize; shape.len()];
    for _ in 0..numel {
        out.push(coord.iter().zip(&src_strides).map(|(c, s)| c * s).sum());
        increment(&mut coord, &out_shape);
    }
    out
}

fn upsample_sources(shape: &[usize], factors: &[usize]) -> Vec<usize> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = shape.iter().zip(factors).map(|(e, f)| e * f).collect();
    let numel: usize = out_shape.iter().product();
    let mut out = Vec::with_capacity(numel);
    let mut coord = vec![0usize; shape.len()];
    for _ in 0..numel {
        out.push(
            coord
                .iter()
                .zip(factors)
                .zip(&in_strides)
                .map(|((c, f), s)| (c / f) * s)
                .sum(),
        );
        increment(&mut coord, &out_shape);
    }
    out
}

/// Calls `f(row, col, src)` for every in-bounds (column entry, input) pair.
fn im2col_visit(geom: &ConvGeometry, channels: usize, input: [usize; 3], out: [usize; 3], mut f: impl FnMut(usize, usize, usize)) {
    let [kt, kh, kw] = geom.kernel;
    let [st, sh, sw] = geom.stride;
    let [pt, ph, pw] = geom.pad;
    let [ti, hi, wi] = input;
    let [to, ho, wo] = out;
    for c in 0..channels {
        for dt in 0..kt {
            for dh in 0..kh {
                for dw in 0..kw {
                    let r = ((c * kt + dt) * kh + dh) * kw + dw;
                    for ot in 0..to {
                        let it = (ot * st + dt) as isize - pt as isize;
                        if it < 0 || it >= ti as isize {
                            continue;
                        }
                        for oh in 0..ho {
                            let ih = (oh * sh + dh) as isize - ph as isize;
                            if ih < 0 || ih >= hi as isize {
                                continue;
                            }
                            let src_row = ((c * ti + it as usize) * hi + ih as usize) * wi;
                            let col_row = (ot * ho + oh) * wo;
                            for ow in 0..wo {
                                let iw = (ow * sw + dw) as isize - pw as isize;
                                if iw < 0 || iw >= wi as isize {
                                    continue;
                                }
                                f(r, col_row + ow, src_row + iw as usize);
                            }
                        }
                    }
                }
            }
        }
    }
}
