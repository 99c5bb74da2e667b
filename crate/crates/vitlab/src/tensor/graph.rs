//! The recording tape: every forward operation appends a node, `backward`
//! walks the tape once in reverse. Node ids are assigned in creation order,
//! so the tape is topologically sorted by construction.

use super::kernels as k;
use super::{DType, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EltOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnaryOp {
    Neg,
    Exp,
    Log,
    Sqrt,
    Gelu,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    /// Biased variance (divide by the axis length).
    Var,
    Max,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul,
    Binary(EltOp),
    Scale(f64),
    Unary(UnaryOp),
    Reduce(ReduceOp, usize),
    Reshape,
    Permute(Vec<usize>),
    Softmax(usize),
    Concat(usize),
    Slice { axis: usize, start: usize },
    TileLead,
    LayerNorm,
    RmsNorm,
    NormalizeOnly,
    SigmoidXent,
    SoftmaxXent,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul => "matmul",
            Op::Binary(EltOp::Add) => "add",
            Op::Binary(EltOp::Sub) => "sub",
            Op::Binary(EltOp::Mul) => "mul",
            Op::Binary(EltOp::Div) => "div",
            Op::Scale(_) => "scale",
            Op::Unary(UnaryOp::Neg) => "neg",
            Op::Unary(UnaryOp::Exp) => "exp",
            Op::Unary(UnaryOp::Log) => "log",
            Op::Unary(UnaryOp::Sqrt) => "sqrt",
            Op::Unary(UnaryOp::Gelu) => "gelu",
            Op::Unary(UnaryOp::Sigmoid) => "sigmoid",
            Op::Reduce(ReduceOp::Sum, _) => "sum",
            Op::Reduce(ReduceOp::Mean, _) => "mean",
            Op::Reduce(ReduceOp::Var, _) => "var",
            Op::Reduce(ReduceOp::Max, _) => "max",
            Op::Reshape => "reshape",
            Op::Permute(_) => "permute",
            Op::Softmax(_) => "softmax",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::TileLead => "tile",
            Op::LayerNorm { .. } => "layer_norm",
            Op::RmsNorm { .. } => "rms_norm",
            Op::NormalizeOnly { .. } => "normalize_only",
            Op::SigmoidXent => "sigmoid_xent",
            Op::SoftmaxXent => "softmax_xent",
        }
    }
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    tracked: bool,
    /// Forward intermediates needed by backward (means, inverse stds, argmax
    /// indices), flattened.
    saved: Vec<f64>,
}

/// Append-only operation tape.
pub struct Graph {
    nodes: Vec<Node>,
    /// When set, every operation scans its output for NaN/Inf and fails
    /// instead of propagating. On by default.
    pub check_finite: bool,
    scope: String,
}

/// Per-leaf gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient buffer for a node, if any path from the loss reached it.
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Gradient buffer, zero-filled for untouched leaves.
    pub fn get_or_zeros(&self, id: NodeId, numel: usize) -> Vec<f64> {
        match self.get(id) {
            Some(g) => g.to_vec(),
            None => vec![0.0; numel],
        }
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Graph {
        Graph { nodes: Vec::new(), check_finite: true, scope: String::new() }
    }

    /// Label subsequent operations for error diagnostics.
    pub fn set_scope(&mut self, scope: impl Into<String>) {
        self.scope = scope.into();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        let tracked = t.grad_tracked();
        self.push_unchecked(Op::Leaf, vec![], t, tracked, vec![])
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push_unchecked(Op::Leaf, vec![], t.with_tracking(false), false, vec![])
    }

    fn push_unchecked(
        &mut self,
        op: Op,
        inputs: Vec<NodeId>,
        value: Tensor,
        tracked: bool,
        saved: Vec<f64>,
    ) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, inputs, value, tracked, saved });
        id
    }

    fn push(
        &mut self,
        op: Op,
        inputs: Vec<NodeId>,
        shape: Vec<usize>,
        data: Vec<f64>,
        dtype: DType,
        saved: Vec<f64>,
    ) -> Result<NodeId> {
        let value = Tensor::from_vec(shape, data, dtype);
        if self.check_finite && value.data().iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite {
                op: op.name(),
                label: if self.scope.is_empty() { None } else { Some(self.scope.clone()) },
            });
        }
        let tracked = inputs.iter().any(|i| self.nodes[i.0].tracked);
        Ok(self.push_unchecked(op, inputs, value, tracked, saved))
    }

    fn dtype2(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<DType> {
        let (da, db) = (self.value(a).dtype(), self.value(b).dtype());
        if da != db {
            return Err(TensorError::DTypeMismatch { op });
        }
        Ok(da)
    }

    // ── shape-moving ops ───────────────────────────────────────────────

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let t = self.value(a);
        if shape.iter().product::<usize>() != t.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {:?}", t.shape(), shape),
            });
        }
        let (data, dtype) = (t.data().to_vec(), t.dtype());
        self.push(Op::Reshape, vec![a], shape, data, dtype, vec![])
    }

    pub fn permute(&mut self, a: NodeId, perm: &[usize]) -> Result<NodeId> {
        let t = self.value(a);
        let rank = t.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::ShapeMismatch {
                op: "permute",
                detail: format!("perm {:?} for rank {}", perm, rank),
            });
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| t.shape()[p]).collect();
        let data = permute_copy(t.data(), t.shape(), perm);
        let dtype = t.dtype();
        self.push(Op::Permute(perm.to_vec()), vec![a], out_shape, data, dtype, vec![])
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        assert!(!parts.is_empty());
        let first = self.value(parts[0]);
        let rank = first.rank();
        if axis >= rank {
            return Err(TensorError::InvalidAxis { op: "concat", axis, rank });
        }
        let dtype = first.dtype();
        let mut out_shape = first.shape().to_vec();
        for &p in &parts[1..] {
            let t = self.value(p);
            if t.rank() != rank
                || t.shape().iter().enumerate().any(|(i, &s)| i != axis && s != out_shape[i])
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    detail: format!("{:?} vs {:?} on axis {}", out_shape, t.shape(), axis),
                });
            }
            if t.dtype() != dtype {
                return Err(TensorError::DTypeMismatch { op: "concat" });
            }
            out_shape[axis] += t.shape()[axis];
        }
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let mut data = vec![0.0; out_shape.iter().product()];
        let total_axis = out_shape[axis];
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            let alen = t.shape()[axis];
            for o in 0..outer {
                let src = &t.data()[o * alen * inner..(o + 1) * alen * inner];
                let dst_start = (o * total_axis + offset) * inner;
                data[dst_start..dst_start + alen * inner].copy_from_slice(src);
            }
            offset += alen;
        }
        self.push(Op::Concat(axis), parts.to_vec(), out_shape, data, dtype, vec![])
    }

    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let t = self.value(a);
        let rank = t.rank();
        if axis >= rank {
            return Err(TensorError::InvalidAxis { op: "slice", axis, rank });
        }
        if start + len > t.shape()[axis] {
            return Err(TensorError::ShapeMismatch {
                op: "slice",
                detail: format!("range {}..{} exceeds axis length {}", start, start + len, t.shape()[axis]),
            });
        }
        let outer: usize = t.shape()[..axis].iter().product();
        let inner: usize = t.shape()[axis + 1..].iter().product();
        let alen = t.shape()[axis];
        let mut out_shape = t.shape().to_vec();
        out_shape[axis] = len;
        let mut data = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src = &t.data()[(o * alen + start) * inner..(o * alen + start + len) * inner];
            data[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
        }
        let dtype = t.dtype();
        self.push(Op::Slice { axis, start }, vec![a], out_shape, data, dtype, vec![])
    }

    /// Repeat a tensor `n` times along a new leading axis.
    pub fn tile_lead(&mut self, a: NodeId, n: usize) -> Result<NodeId> {
        let t = self.value(a);
        let mut out_shape = vec![n];
        out_shape.extend_from_slice(t.shape());
        let mut data = Vec::with_capacity(n * t.numel());
        for _ in 0..n {
            data.extend_from_slice(t.data());
        }
        let dtype = t.dtype();
        self.push(Op::TileLead, vec![a], out_shape, data, dtype, vec![])
    }

    // ── arithmetic ─────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let dtype = self.dtype2("matmul", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let (ra, rb) = (ta.rank(), tb.rank());
        if ra < 2 || (rb != 2 && rb != ra) {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("ranks {} x {}", ra, rb),
            });
        }
        let (m, kk) = (ta.shape()[ra - 2], ta.shape()[ra - 1]);
        let n = tb.shape()[rb - 1];
        let lead = &ta.shape()[..ra - 2];
        let b_batched = rb == ra && ra > 2;
        let compatible = if b_batched {
            tb.shape()[rb - 2] == kk && &tb.shape()[..rb - 2] == lead
        } else {
            rb == 2 && tb.shape()[0] == kk
        };
        if !compatible {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} x {:?}", ta.shape(), tb.shape()),
            });
        }
        let batch: usize = lead.iter().product();
        let mut out_shape = lead.to_vec();
        out_shape.push(m);
        out_shape.push(n);
        let mut data = vec![0.0; batch * m * n];
        match dtype {
            DType::F64 => {
                for bi in 0..batch {
                    let asl = &ta.data()[bi * m * kk..(bi + 1) * m * kk];
                    let bsl = if b_batched {
                        &tb.data()[bi * kk * n..(bi + 1) * kk * n]
                    } else {
                        tb.data()
                    };
                    k::mm_f64(asl, bsl, &mut data[bi * m * n..(bi + 1) * m * n], m, kk, n);
                }
            }
            DType::F32 => {
                let a32 = k::to_f32(ta.data());
                let b32 = k::to_f32(tb.data());
                for bi in 0..batch {
                    let asl = &a32[bi * m * kk..(bi + 1) * m * kk];
                    let bsl = if b_batched { &b32[bi * kk * n..(bi + 1) * kk * n] } else { &b32[..] };
                    k::mm_f32(asl, bsl, &mut data[bi * m * n..(bi + 1) * m * n], m, kk, n);
                }
            }
        }
        self.push(Op::MatMul, vec![a, b], out_shape, data, dtype, vec![])
    }

    /// Element-wise binary op; `b`'s shape must equal `a`'s or a trailing
    /// suffix of it (broadcast over the leading axes).
    pub fn binary(&mut self, op: EltOp, a: NodeId, b: NodeId) -> Result<NodeId> {
        let dtype = self.dtype2("binary", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let suffix_ok = tb.rank() <= ta.rank()
            && ta.shape()[ta.rank() - tb.rank()..] == *tb.shape();
        if !suffix_ok {
            return Err(TensorError::ShapeMismatch {
                op: "elementwise",
                detail: format!("{:?} vs {:?} (broadcast must match a suffix)", ta.shape(), tb.shape()),
            });
        }
        let bl = tb.numel().max(1);
        let mut data = vec![0.0; ta.numel()];
        for (i, dst) in data.iter_mut().enumerate() {
            let x = ta.data()[i];
            let y = tb.data()[i % bl];
            *dst = match op {
                EltOp::Add => x + y,
                EltOp::Sub => x - y,
                EltOp::Mul => x * y,
                EltOp::Div => {
                    if y == 0.0 {
                        return Err(TensorError::DivisionByZero { index: i });
                    }
                    x / y
                }
            };
        }
        let shape = ta.shape().to_vec();
        self.push(Op::Binary(op), vec![a, b], shape, data, dtype, vec![])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(EltOp::Add, a, b)
    }
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(EltOp::Sub, a, b)
    }
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(EltOp::Mul, a, b)
    }
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(EltOp::Div, a, b)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let t = self.value(a);
        let data = t.data().iter().map(|v| v * c).collect();
        let (shape, dtype) = (t.shape().to_vec(), t.dtype());
        self.push(Op::Scale(c), vec![a], shape, data, dtype, vec![])
    }

    fn unary(&mut self, op: UnaryOp, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        let mut data = vec![0.0; t.numel()];
        for (i, dst) in data.iter_mut().enumerate() {
            let x = t.data()[i];
            *dst = match op {
                UnaryOp::Neg => -x,
                UnaryOp::Exp => x.exp(),
                UnaryOp::Log => {
                    if x <= 0.0 {
                        return Err(TensorError::DomainError { op: "log", value: x, index: i });
                    }
                    x.ln()
                }
                UnaryOp::Sqrt => {
                    if x < 0.0 {
                        return Err(TensorError::DomainError { op: "sqrt", value: x, index: i });
                    }
                    x.sqrt()
                }
                UnaryOp::Gelu => k::gelu(x),
                UnaryOp::Sigmoid => k::sigmoid(x),
            };
        }
        let (shape, dtype) = (t.shape().to_vec(), t.dtype());
        self.push(Op::Unary(op), vec![a], shape, data, dtype, vec![])
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(UnaryOp::Neg, a)
    }
    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(UnaryOp::Exp, a)
    }
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(UnaryOp::Log, a)
    }
    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(UnaryOp::Sqrt, a)
    }
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(UnaryOp::Gelu, a)
    }
    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(UnaryOp::Sigmoid, a)
    }

    // ── reductions ─────────────────────────────────────────────────────

    pub fn reduce(&mut self, op: ReduceOp, a: NodeId, axis: usize) -> Result<NodeId> {
        let t = self.value(a);
        let rank = t.rank();
        if axis >= rank {
            return Err(TensorError::InvalidAxis { op: "reduce", axis, rank });
        }
        let alen = t.shape()[axis];
        if alen == 0 {
            return Err(TensorError::EmptyAxis { op: "reduce" });
        }
        let outer: usize = t.shape()[..axis].iter().product();
        let inner: usize = t.shape()[axis + 1..].iter().product();
        let mut out_shape = t.shape().to_vec();
        out_shape.remove(axis);
        let mut data = vec![0.0; outer * inner];
        let mut saved = Vec::new();
        let x = t.data();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| x[(o * alen + j) * inner + i];
                let out = &mut data[o * inner + i];
                match op {
                    ReduceOp::Sum => {
                        let mut s = 0.0;
                        for j in 0..alen {
                            s += at(j);
                        }
                        *out = s;
                    }
                    ReduceOp::Mean => {
                        let mut s = 0.0;
                        for j in 0..alen {
                            s += at(j);
                        }
                        *out = s / alen as f64;
                    }
                    ReduceOp::Var => {
                        let mut s = 0.0;
                        for j in 0..alen {
                            s += at(j);
                        }
                        let m = s / alen as f64;
                        let mut v = 0.0;
                        for j in 0..alen {
                            let d = at(j) - m;
                            v += d * d;
                        }
                        *out = v / alen as f64;
                        saved.push(m);
                    }
                    ReduceOp::Max => {
                        let mut best = at(0);
                        let mut arg = 0usize;
                        for j in 1..alen {
                            if at(j) > best {
                                best = at(j);
                                arg = j;
                            }
                        }
                        *out = best;
                        saved.push(arg as f64);
                    }
                }
            }
        }
        let dtype = t.dtype();
        self.push(Op::Reduce(op, axis), vec![a], out_shape, data, dtype, saved)
    }

    pub fn sum(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.reduce(ReduceOp::Sum, a, axis)
    }
    pub fn mean(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        self.reduce(ReduceOp::Mean, a, axis)
    }

    /// Sum every element down to a scalar.
    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.value(a).numel();
        let flat = self.reshape(a, vec![n])?;
        let s = self.reduce(ReduceOp::Sum, flat, 0)?;
        self.reshape(s, vec![])
    }

    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let t = self.value(a);
        let rank = t.rank();
        if axis >= rank {
            return Err(TensorError::InvalidAxis { op: "softmax", axis, rank });
        }
        let alen = t.shape()[axis];
        if alen == 0 {
            return Err(TensorError::EmptyAxis { op: "softmax" });
        }
        let outer: usize = t.shape()[..axis].iter().product();
        let inner: usize = t.shape()[axis + 1..].iter().product();
        let x = t.data();
        let mut data = vec![0.0; t.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * alen + j) * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..alen {
                    mx = mx.max(x[idx(j)]);
                }
                let mut denom = 0.0;
                for j in 0..alen {
                    let e = (x[idx(j)] - mx).exp();
                    data[idx(j)] = e;
                    denom += e;
                }
                for j in 0..alen {
                    data[idx(j)] /= denom;
                }
            }
        }
        let (shape, dtype) = (t.shape().to_vec(), t.dtype());
        self.push(Op::Softmax(axis), vec![a], shape, data, dtype, vec![])
    }

    // ── normalization (fused over the last axis) ───────────────────────

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let d = self.norm_check("layer_norm", x, Some(gamma), Some(beta))?;
        let t = self.value(x);
        let slices = t.numel() / d;
        let (g, b) = (self.value(gamma).data().to_vec(), self.value(beta).data().to_vec());
        let mut data = vec![0.0; t.numel()];
        let mut saved = vec![0.0; 2 * slices];
        for s in 0..slices {
            let xs = &t.data()[s * d..(s + 1) * d];
            let (mean, inv_std) = moments(xs, eps);
            saved[s] = mean;
            saved[slices + s] = inv_std;
            for j in 0..d {
                data[s * d + j] = (xs[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        let (shape, dtype) = (t.shape().to_vec(), t.dtype());
        self.push(Op::LayerNorm, vec![x, gamma, beta], shape, data, dtype, saved)
    }

    /// Standardize each last-axis slice, no learnable affine.
    pub fn normalize_only(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        let d = self.norm_check("normalize_only", x, None, None)?;
        let t = self.value(x);
        let slices = t.numel() / d;
        let mut data = vec![0.0; t.numel()];
        let mut saved = vec![0.0; 2 * slices];
        for s in 0..slices {
            let xs = &t.data()[s * d..(s + 1) * d];
            let (mean, inv_std) = moments(xs, eps);
            saved[s] = mean;
            saved[slices + s] = inv_std;
            for j in 0..d {
                data[s * d + j] = (xs[j] - mean) * inv_std;
            }
        }
        let (shape, dtype) = (t.shape().to_vec(), t.dtype());
        self.push(Op::NormalizeOnly, vec![x], shape, data, dtype, saved)
    }

    /// x / sqrt(mean(x^2) + eps) * gamma — no centering, no shift.
    pub fn rms_norm(&mut self, x: NodeId, gamma: NodeId, eps: f64) -> Result<NodeId> {
        let d = self.norm_check("rms_norm", x, Some(gamma), None)?;
        let t = self.value(x);
        let slices = t.numel() / d;
        let g = self.value(gamma).data().to_vec();
        let mut data = vec![0.0; t.numel()];
        let mut saved = vec![0.0; slices];
        for s in 0..slices {
            let xs = &t.data()[s * d..(s + 1) * d];
            let mut ms = 0.0;
            for &v in xs {
                ms += v * v;
            }
            let r = 1.0 / (ms / d as f64 + eps).sqrt();
            saved[s] = r;
            for j in 0..d {
                data[s * d + j] = xs[j] * r * g[j];
            }
        }
        let (shape, dtype) = (t.shape().to_vec(), t.dtype());
        self.push(Op::RmsNorm, vec![x, gamma], shape, data, dtype, saved)
    }

    fn norm_check(&self, op: &'static str, x: NodeId, gamma: Option<NodeId>, beta: Option<NodeId>) -> Result<usize> {
        let t = self.value(x);
        if t.rank() == 0 {
            return Err(TensorError::ShapeMismatch { op, detail: "scalar input".into() });
        }
        let d = t.shape()[t.rank() - 1];
        for p in [gamma, beta].into_iter().flatten() {
            let ts = self.value(p).shape();
            if ts != [d] {
                return Err(TensorError::ShapeMismatch {
                    op,
                    detail: format!("param shape {:?}, normalized axis {}", ts, d),
                });
            }
        }
        Ok(d)
    }

    // ── losses ─────────────────────────────────────────────────────────

    /// Mean over the batch of per-class binary cross-entropy against
    /// (possibly soft) targets, in the stable softplus form.
    pub fn sigmoid_xent(&mut self, logits: NodeId, targets: NodeId) -> Result<NodeId> {
        let dtype = self.loss_check("sigmoid_xent", logits, targets)?;
        let (tl, tt) = (self.value(logits), self.value(targets));
        let batch = tl.shape()[0] as f64;
        let mut total = 0.0;
        for (&z, &t) in tl.data().iter().zip(tt.data()) {
            // softplus(z) - z*t == max(z,0) - z*t + log1p(exp(-|z|))
            total += k::softplus(z) - z * t;
        }
        let loss = total / batch;
        self.push(Op::SigmoidXent, vec![logits, targets], vec![], vec![loss], dtype, vec![])
    }

    /// Mean over the batch of cross-entropy between softmax(logits) and the
    /// target distribution, computed with max-shifted log-sum-exp.
    pub fn softmax_xent(&mut self, logits: NodeId, targets: NodeId) -> Result<NodeId> {
        let dtype = self.loss_check("softmax_xent", logits, targets)?;
        let (tl, tt) = (self.value(logits), self.value(targets));
        let (b, kk) = (tl.shape()[0], tl.shape()[1]);
        let mut total = 0.0;
        for r in 0..b {
            let zs = &tl.data()[r * kk..(r + 1) * kk];
            let ts = &tt.data()[r * kk..(r + 1) * kk];
            let mx = zs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for &z in zs {
                denom += (z - mx).exp();
            }
            let lse = mx + denom.ln();
            let mut dot = 0.0;
            for (z, t) in zs.iter().zip(ts) {
                dot += z * t;
            }
            total += lse - dot;
        }
        let loss = total / b as f64;
        self.push(Op::SoftmaxXent, vec![logits, targets], vec![], vec![loss], dtype, vec![])
    }

    fn loss_check(&self, op: &'static str, logits: NodeId, targets: NodeId) -> Result<DType> {
        let dtype = self.dtype2(op, logits, targets)?;
        let (tl, tt) = (self.value(logits), self.value(targets));
        if tl.rank() != 2 || tl.shape() != tt.shape() {
            return Err(TensorError::ShapeMismatch {
                op,
                detail: format!("logits {:?}, targets {:?}", tl.shape(), tt.shape()),
            });
        }
        Ok(dtype)
    }

    // ── backward ───────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Visits each node at most once.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(TensorError::NonScalarLoss { shape: lt.shape().to_vec() });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if grads[id].is_none() || !self.nodes[id].tracked {
                continue;
            }
            let g = grads[id].take().unwrap();
            self.backward_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let tracked = |i: usize| self.nodes[node.inputs[i].0].tracked;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul => self.backward_matmul(node, g, grads),
            Op::Binary(op) => {
                let ta = self.nodes[node.inputs[0].0].value.data();
                let tb = self.nodes[node.inputs[1].0].value.data();
                let bl = tb.len().max(1);
                if tracked(0) {
                    let da = self.grad_buf(grads, node.inputs[0]);
                    for i in 0..g.len() {
                        da[i] += match op {
                            EltOp::Add | EltOp::Sub => g[i],
                            EltOp::Mul => g[i] * tb[i % bl],
                            EltOp::Div => g[i] / tb[i % bl],
                        };
                    }
                }
                if tracked(1) {
                    let db = self.grad_buf(grads, node.inputs[1]);
                    for i in 0..g.len() {
                        db[i % bl] += match op {
                            EltOp::Add => g[i],
                            EltOp::Sub => -g[i],
                            EltOp::Mul => g[i] * ta[i],
                            EltOp::Div => {
                                let y = tb[i % bl];
                                -g[i] * ta[i] / (y * y)
                            }
                        };
                    }
                }
            }
            Op::Scale(c) => {
                if tracked(0) {
                    let da = self.grad_buf(grads, node.inputs[0]);
                    for i in 0..g.len() {
                        da[i] += g[i] * c;
                    }
                }
            }
            Op::Unary(op) => {
                if tracked(0) {
                    let x = self.nodes[node.inputs[0].0].value.data();
                    let y = node.value.data();
                    let da = self.grad_buf(grads, node.inputs[0]);
                    for i in 0..g.len() {
                        da[i] += g[i]
                            * match op {
                                UnaryOp::Neg => -1.0,
                                UnaryOp::Exp => y[i],
                                UnaryOp::Log => 1.0 / x[i],
                                UnaryOp::Sqrt => 0.5 / y[i],
                                UnaryOp::Gelu => k::gelu_grad(x[i]),
                                UnaryOp::Sigmoid => y[i] * (1.0 - y[i]),
                            };
                    }
                }
            }
            Op::Reduce(op, axis) => {
                if !tracked(0) {
                    return;
                }
                let t = &self.nodes[node.inputs[0].0].value;
                let alen = t.shape()[*axis];
                let outer: usize = t.shape()[..*axis].iter().product();
                let inner: usize = t.shape()[*axis + 1..].iter().product();
                let x = t.data();
                let da = self.grad_buf(grads, node.inputs[0]);
                for o in 0..outer {
                    for i in 0..inner {
                        let go = g[o * inner + i];
                        match op {
                            ReduceOp::Sum => {
                                for j in 0..alen {
                                    da[(o * alen + j) * inner + i] += go;
                                }
                            }
                            ReduceOp::Mean => {
                                let s = go / alen as f64;
                                for j in 0..alen {
                                    da[(o * alen + j) * inner + i] += s;
                                }
                            }
                            ReduceOp::Var => {
                                let m = node.saved[o * inner + i];
                                let s = 2.0 * go / alen as f64;
                                for j in 0..alen {
                                    let idx = (o * alen + j) * inner + i;
                                    da[idx] += s * (x[idx] - m);
                                }
                            }
                            ReduceOp::Max => {
                                let arg = node.saved[o * inner + i] as usize;
                                da[(o * alen + arg) * inner + i] += go;
                            }
                        }
                    }
                }
            }
            Op::Reshape => {
                if tracked(0) {
                    let da = self.grad_buf(grads, node.inputs[0]);
                    for i in 0..g.len() {
                        da[i] += g[i];
                    }
                }
            }
            Op::Permute(perm) => {
                if tracked(0) {
                    // gradient flows through the inverse permutation
                    let mut inv = vec![0usize; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    let back = permute_copy(g, node.value.shape(), &inv);
                    let da = self.grad_buf(grads, node.inputs[0]);
                    for i in 0..back.len() {
                        da[i] += back[i];
                    }
                }
            }
            Op::Concat(axis) => {
                let out_shape = node.value.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let total_axis = out_shape[*axis];
                let mut offset = 0;
                for (pi, &inp) in node.inputs.iter().enumerate() {
                    let alen = self.nodes[inp.0].value.shape()[*axis];
                    if tracked(pi) {
                        let da = self.grad_buf(grads, node.inputs[pi]);
                        for o in 0..outer {
                            for j in 0..alen * inner {
                                da[o * alen * inner + j] += g[(o * total_axis + offset) * inner + j];
                            }
                        }
                    }
                    offset += alen;
                }
            }
            Op::Slice { axis, start } => {
                if tracked(0) {
                    let t = &self.nodes[node.inputs[0].0].value;
                    let alen = t.shape()[*axis];
                    let outer: usize = t.shape()[..*axis].iter().product();
                    let inner: usize = t.shape()[*axis + 1..].iter().product();
                    let len = node.value.shape()[*axis];
                    let da = self.grad_buf(grads, node.inputs[0]);
                    for o in 0..outer {
                        for j in 0..len * inner {
                            da[(o * alen + *start) * inner + j] += g[o * len * inner + j];
                        }
                    }
                }
            }
            Op::TileLead => {
                if tracked(0) {
                    let n = self.nodes[node.inputs[0].0].value.numel();
                    let reps = node.value.shape()[0];
                    let da = self.grad_buf(grads, node.inputs[0]);
                    for r in 0..reps {
                        for i in 0..n {
                            da[i] += g[r * n + i];
                        }
                    }
                }
            }
            Op::Softmax(axis) => {
                if tracked(0) {
                    let y = node.value.data();
                    let shape = node.value.shape();
                    let alen = shape[*axis];
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[*axis + 1..].iter().product();
                    let da = self.grad_buf(grads, node.inputs[0]);
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |j: usize| (o * alen + j) * inner + i;
                            let mut dot = 0.0;
                            for j in 0..alen {
                                dot += g[idx(j)] * y[idx(j)];
                            }
                            for j in 0..alen {
                                da[idx(j)] += y[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { .. } => {
                let x = self.nodes[node.inputs[0].0].value.data();
                let gamma = self.nodes[node.inputs[1].0].value.data();
                let d = gamma.len();
                let slices = x.len() / d;
                for s in 0..slices {
                    let mean = node.saved[s];
                    let inv_std = node.saved[slices + s];
                    let gs = &g[s * d..(s + 1) * d];
                    let xs = &x[s * d..(s + 1) * d];
                    // per-slice reductions of gamma*g and gamma*g*xhat
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..d {
                        let xhat = (xs[j] - mean) * inv_std;
                        let gg = gamma[j] * gs[j];
                        m1 += gg;
                        m2 += gg * xhat;
                    }
                    m1 /= d as f64;
                    m2 /= d as f64;
                    if tracked(0) {
                        let dx = self.grad_buf(grads, node.inputs[0]);
                        for j in 0..d {
                            let xhat = (xs[j] - mean) * inv_std;
                            dx[s * d + j] += inv_std * (gamma[j] * gs[j] - m1 - xhat * m2);
                        }
                    }
                    if tracked(1) {
                        let dg = self.grad_buf(grads, node.inputs[1]);
                        for j in 0..d {
                            let xhat = (xs[j] - mean) * inv_std;
                            dg[j] += gs[j] * xhat;
                        }
                    }
                    if tracked(2) {
                        let db = self.grad_buf(grads, node.inputs[2]);
                        for j in 0..d {
                            db[j] += gs[j];
                        }
                    }
                }
            }
            Op::NormalizeOnly { .. } => {
                if tracked(0) {
                    let x = self.nodes[node.inputs[0].0].value.data();
                    let d = node.value.shape()[node.value.rank() - 1];
                    let slices = x.len() / d;
                    let dx = self.grad_buf(grads, node.inputs[0]);
                    for s in 0..slices {
                        let mean = node.saved[s];
                        let inv_std = node.saved[slices + s];
                        let gs = &g[s * d..(s + 1) * d];
                        let xs = &x[s * d..(s + 1) * d];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let xhat = (xs[j] - mean) * inv_std;
                            m1 += gs[j];
                            m2 += gs[j] * xhat;
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            let xhat = (xs[j] - mean) * inv_std;
                            dx[s * d + j] += inv_std * (gs[j] - m1 - xhat * m2);
                        }
                    }
                }
            }
            Op::RmsNorm { .. } => {
                let x = self.nodes[node.inputs[0].0].value.data();
                let gamma = self.nodes[node.inputs[1].0].value.data();
                let d = gamma.len();
                let slices = x.len() / d;
                for s in 0..slices {
                    let r = node.saved[s];
                    let gs = &g[s * d..(s + 1) * d];
                    let xs = &x[s * d..(s + 1) * d];
                    if tracked(0) {
                        let mut dot = 0.0;
                        for j in 0..d {
                            dot += gamma[j] * gs[j] * xs[j];
                        }
                        let c = r * r * r / d as f64 * dot;
                        let dx = self.grad_buf(grads, node.inputs[0]);
                        for j in 0..d {
                            dx[s * d + j] += gamma[j] * gs[j] * r - xs[j] * c;
                        }
                    }
                    if tracked(1) {
                        let dg = self.grad_buf(grads, node.inputs[1]);
                        for j in 0..d {
                            dg[j] += gs[j] * xs[j] * r;
                        }
                    }
                }
            }
            Op::SigmoidXent => {
                if tracked(0) {
                    let z = self.nodes[node.inputs[0].0].value.data();
                    let t = self.nodes[node.inputs[1].0].value.data();
                    let b = self.nodes[node.inputs[0].0].value.shape()[0] as f64;
                    let go = g[0];
                    let dz = self.grad_buf(grads, node.inputs[0]);
                    for i in 0..z.len() {
                        dz[i] += go * (k::sigmoid(z[i]) - t[i]) / b;
                    }
                }
            }
            Op::SoftmaxXent => {
                if tracked(0) {
                    let tl = &self.nodes[node.inputs[0].0].value;
                    let t = self.nodes[node.inputs[1].0].value.data();
                    let (b, kk) = (tl.shape()[0], tl.shape()[1]);
                    let go = g[0];
                    let z = tl.data();
                    let dz = self.grad_buf(grads, node.inputs[0]);
                    for r in 0..b {
                        let zs = &z[r * kk..(r + 1) * kk];
                        let mx = zs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let mut denom = 0.0;
                        for &v in zs {
                            denom += (v - mx).exp();
                        }
                        for j in 0..kk {
                            let p = (zs[j] - mx).exp() / denom;
                            dz[r * kk + j] += go * (p - t[r * kk + j]) / b as f64;
                        }
                    }
                }
            }
        }
    }

    fn grad_buf<'a>(&self, grads: &'a mut [Option<Vec<f64>>], id: NodeId) -> &'a mut Vec<f64> {
        let n = self.nodes[id.0].value.numel();
        grads[id.0].get_or_insert_with(|| vec![0.0; n])
    }

    fn backward_matmul(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (aid, bid) = (node.inputs[0].0, node.inputs[1].0);
        let ta = &self.nodes[aid].value;
        let tb = &self.nodes[bid].value;
        let ra = ta.rank();
        let (m, kk) = (ta.shape()[ra - 2], ta.shape()[ra - 1]);
        let n = tb.shape()[tb.rank() - 1];
        let batch: usize = ta.shape()[..ra - 2].iter().product();
        let b_batched = tb.rank() == ra && ra > 2;
        let f32_path = ta.dtype() == DType::F32;
        let (a32, b32, g32) = if f32_path {
            (k::to_f32(ta.data()), k::to_f32(tb.data()), k::to_f32(g))
        } else {
            (vec![], vec![], vec![])
        };
        if self.nodes[aid].tracked {
            let da = grads[aid].get_or_insert_with(|| vec![0.0; ta.numel()]);
            for bi in 0..batch {
                let gsl = bi * m * n..(bi + 1) * m * n;
                let dsl = bi * m * kk..(bi + 1) * m * kk;
                if f32_path {
                    let bsl = if b_batched { &b32[bi * kk * n..(bi + 1) * kk * n] } else { &b32[..] };
                    k::mm_acc_a_bt_f32(&g32[gsl], bsl, &mut da[dsl], m, kk, n);
                } else {
                    let bsl = if b_batched {
                        &tb.data()[bi * kk * n..(bi + 1) * kk * n]
                    } else {
                        tb.data()
                    };
                    k::mm_acc_a_bt_f64(&g[gsl], bsl, &mut da[dsl], m, kk, n);
                }
            }
        }
        if self.nodes[bid].tracked {
            let db = grads[bid].get_or_insert_with(|| vec![0.0; tb.numel()]);
            for bi in 0..batch {
                let gsl = bi * m * n..(bi + 1) * m * n;
                let asl = bi * m * kk..(bi + 1) * m * kk;
                let dsl = if b_batched { bi * kk * n..(bi + 1) * kk * n } else { 0..kk * n };
                if f32_path {
                    k::mm_acc_at_b_f32(&a32[asl], &g32[gsl], &mut db[dsl], m, kk, n);
                } else {
                    k::mm_acc_at_b_f64(&ta.data()[asl], &g[gsl], &mut db[dsl], m, kk, n);
                }
            }
        }
    }
}

fn moments(xs: &[f64], eps: f64) -> (f64, f64) {
    let d = xs.len() as f64;
    let mut s = 0.0;
    for &v in xs {
        s += v;
    }
    let mean = s / d;
    let mut var = 0.0;
    for &v in xs {
        let dd = v - mean;
        var += dd * dd;
    }
    var /= d;
    (mean, 1.0 / (var + eps).sqrt())
}

fn permute_copy(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut out = vec![0.0; data.len()];
    let mut idx = vec![0usize; rank];
    for slot in out.iter_mut() {
        let mut src = 0;
        for (i, &ix) in idx.iter().enumerate() {
            src += ix * in_strides[perm[i]];
        }
        *slot = data[src];
        for i in (0..rank).rev() {
            idx[i] += 1;
            if idx[i] < out_shape[i] {
                break;
            }
            idx[i] = 0;
        }
    }
    out
}
