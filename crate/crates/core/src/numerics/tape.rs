//! Reverse-mode automatic differentiation over a recorded computation.
//!
//! A [`Tape`] records every operation as a node holding its forward value.
//! Nodes are appended in evaluation order, so a reverse sweep visits them in
//! a valid topological order. Parameter leaves reference a [`ParamStore`]
//! entry by id; their gradients come back as [`ParamGrads`] so several tapes
//! can be reduced into one store in a fixed order.

use std::collections::HashMap;
use std::ops::Range;
use std::sync::Arc;

use super::gemm::{gemm, matmul, matmul_nt, matmul_tn, View, ViewMut};
use super::{ParamGrads, ParamId, ParamStore, Tensor, TensorError};

pub const LAYER_NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// User-defined differentiable operation. The forward value is computed by
/// the caller; the op only supplies the vector-Jacobian product.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;

    /// Returns one optional gradient per input, shaped like that input.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &Tensor) -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    MatMulNt(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize),
    SoftmaxRows(NodeId),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, xhat: Tensor, inv_std: Vec<f64> },
    Gelu(NodeId),
    Tanh(NodeId),
    MeanRows(NodeId),
    SegmentMean { x: NodeId, segments: Vec<Range<usize>> },
    Sum(NodeId),
    L2NormalizeRows { x: NodeId, norms: Vec<f64> },
    GatherRows { table: NodeId, ids: Vec<usize> },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        shared: usize,
        segments: Vec<(Range<usize>, Range<usize>)>,
        probs: Vec<Tensor>,
    },
    Custom { inputs: Vec<NodeId>, op: Box<dyn CustomOp> },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by a backward sweep.
#[derive(Debug, Default)]
pub struct Gradients {
    pub params: ParamGrads,
    leaves: HashMap<NodeId, Tensor>,
}

impl Gradients {
    /// Gradient of a leaf created with [`Tape::variable`].
    pub fn leaf(&self, id: NodeId) -> Option<&Tensor> {
        self.leaves.get(&id)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch { op, left: a.shape(), right: b.shape() }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        debug_assert!(value.is_finite(), "non-finite value produced by tape op");
        self.nodes.push(Node { value: Arc::new(value), op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].requires_grad)
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Free leaf whose gradient is reported through [`Gradients::leaf`].
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter. Frozen parameters behave as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        let p = store.get(id);
        self.nodes.push(Node { value: p.shared_value(), op: Op::Param(id), requires_grad: p.trainable() });
        NodeId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(mismatch("matmul", va, vb));
        }
        let out = matmul(va, vb);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.cols() {
            return Err(mismatch("matmul_nt", va, vb));
        }
        let out = matmul_nt(va, vb);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMulNt(a, b), rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch("add", va, vb));
        }
        let mut out = va.clone();
        out.add_assign(vb);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds a `1 x d` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId, TensorError> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.rows() != 1 || vr.cols() != va.cols() {
            return Err(mismatch("add_row", va, vr));
        }
        let mut out = va.clone();
        for r in 0..out.rows() {
            for (x, b) in out.row_slice_mut(r).iter_mut().zip(vr.data()) {
                *x += b;
            }
        }
        let rg = self.rg(&[a, row]);
        Ok(self.push(out, Op::AddRow(a, row), rg))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let mut out = self.value(a).clone();
        out.scale_assign(factor);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, factor), rg)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        let first = parts.first().ok_or(TensorError::Empty { op: "concat_rows" })?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(mismatch("concat_rows", self.value(*first), v));
            }
            data.extend_from_slice(v.data());
            rows += v.rows();
        }
        let out = Tensor::from_vec(rows, cols, data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        let first = parts.first().ok_or(TensorError::Empty { op: "concat_cols" })?;
        let rows = self.value(*first).rows();
        let mut cols = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(mismatch("concat_cols", self.value(*first), v));
            }
            cols += v.cols();
        }
        let mut out = Tensor::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            for r in 0..rows {
                out.row_slice_mut(r)[offset..offset + v.cols()].copy_from_slice(v.row_slice(r));
            }
            offset += v.cols();
        }
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Columns `[start, start + width)`.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, width: usize) -> Result<NodeId, TensorError> {
        let va = self.value(a);
        if start + width > va.cols() {
            return Err(TensorError::ShapeMismatch { op: "slice_cols", left: va.shape(), right: (start, width) });
        }
        let mut out = Tensor::zeros(va.rows(), width);
        for r in 0..va.rows() {
            out.row_slice_mut(r).copy_from_slice(&va.row_slice(r)[start..start + width]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SliceCols(a, start), rg))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_slice_mut(r));
        }
        let rg = self.rg(&[a]);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    /// Row-wise layer normalisation followed by the affine `gain`/`bias` rows.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        let d = vx.cols();
        if vg.shape() != (1, d) || vb.shape() != (1, d) {
            return Err(mismatch("layer_norm", vx, vg));
        }
        let mut xhat = Tensor::zeros(vx.rows(), d);
        let mut out = Tensor::zeros(vx.rows(), d);
        let mut inv_std = Vec::with_capacity(vx.rows());
        for r in 0..vx.rows() {
            let row = vx.row_slice(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            let xh = xhat.row_slice_mut(r);
            for (h, v) in xh.iter_mut().zip(row) {
                *h = (v - mean) * is;
            }
            let o = out.row_slice_mut(r);
            for c in 0..d {
                o[c] = xh[c] * vg.data()[c] + vb.data()[c];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, inv_std }, rg))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
        let rg = self.rg(&[a]);
        self.push(out, Op::Gelu(a), rg)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.tanh());
        let rg = self.rg(&[a]);
        self.push(out, Op::Tanh(a), rg)
    }

    /// Mean over rows: `n x d -> 1 x d`.
    pub fn mean_rows(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let va = self.value(a);
        if va.rows() == 0 {
            return Err(TensorError::Empty { op: "mean_rows" });
        }
        let mut out = Tensor::zeros(1, va.cols());
        for r in 0..va.rows() {
            for (o, v) in out.data_mut().iter_mut().zip(va.row_slice(r)) {
                *o += v;
            }
        }
        out.scale_assign(1.0 / va.rows() as f64);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::MeanRows(a), rg))
    }

    /// Mean over each row range: `n x d -> segments.len() x d`.
    pub fn segment_mean_rows(&mut self, a: NodeId, segments: &[Range<usize>]) -> Result<NodeId, TensorError> {
        let va = self.value(a);
        let mut out = Tensor::zeros(segments.len(), va.cols());
        for (i, r) in segments.iter().enumerate() {
            if r.is_empty() || r.end > va.rows() {
                return Err(TensorError::Empty { op: "segment_mean_rows" });
            }
            let dst = out.row_slice_mut(i);
            for row in r.clone() {
                for (o, v) in dst.iter_mut().zip(va.row_slice(row)) {
                    *o += v;
                }
            }
            let inv = 1.0 / r.len() as f64;
            dst.iter_mut().for_each(|o| *o *= inv);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SegmentMean { x: a, segments: segments.to_vec() }, rg))
    }

    /// Sum of all entries as a `1 x 1` tensor.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn l2_normalize_rows(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let mut out = self.value(a).clone();
        let mut norms = Vec::with_capacity(out.rows());
        for r in 0..out.rows() {
            let row = out.row_slice_mut(r);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(TensorError::ZeroVector);
            }
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::L2NormalizeRows { x: a, norms }, rg))
    }

    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, TensorError> {
        let vt = self.value(table);
        let mut out = Tensor::zeros(ids.len(), vt.cols());
        for (r, &i) in ids.iter().enumerate() {
            if i >= vt.rows() {
                return Err(TensorError::IndexOutOfRange { index: i, len: vt.rows() });
            }
            out.row_slice_mut(r).copy_from_slice(vt.row_slice(i));
        }
        let rg = self.rg(&[table]);
        Ok(self.push(out, Op::GatherRows { table, ids: ids.to_vec() }, rg))
    }

    /// Multi-head scaled dot-product attention. `q` is `n x d`; `k` and `v`
    /// are `s x d` for any number of key positions `s`. Each of the `heads`
    /// heads works on a contiguous `d / heads` column block and the outputs
    /// are concatenated back into `n x d`.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize) -> Result<NodeId, TensorError> {
        let (n, s) = (self.value(q).rows(), self.value(k).rows());
        self.attention_impl(q, k, v, heads, 0, vec![(0..n, 0..s)])
    }

    /// Attention over several sequences stacked row-wise. `k` and `v` hold
    /// `shared` rows visible to every sequence followed by one row per row of
    /// `q`; the rows of `q` in `segments[i]` attend to the shared rows and to
    /// the key rows of their own segment only.
    pub fn segmented_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        shared: usize,
        segments: &[Range<usize>],
    ) -> Result<NodeId, TensorError> {
        let n = self.value(q).rows();
        if self.value(k).rows() != shared + n {
            return Err(mismatch("segmented_attention", self.value(q), self.value(k)));
        }
        let mut next = 0;
        for r in segments {
            if r.start != next || r.end <= r.start {
                return Err(TensorError::Empty { op: "segmented_attention" });
            }
            next = r.end;
        }
        if next != n {
            return Err(mismatch("segmented_attention", self.value(q), self.value(k)));
        }
        let segs = segments.iter().map(|r| (r.clone(), shared + r.start..shared + r.end)).collect();
        self.attention_impl(q, k, v, heads, shared, segs)
    }

    fn attention_impl(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        shared: usize,
        segments: Vec<(Range<usize>, Range<usize>)>,
    ) -> Result<NodeId, TensorError> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let d = vq.cols();
        if heads == 0 || d % heads != 0 || vk.cols() != d || vv.cols() != d {
            return Err(mismatch("attention", vq, vk));
        }
        if vk.rows() != vv.rows() {
            return Err(mismatch("attention", vk, vv));
        }
        if vk.rows() == 0 {
            return Err(TensorError::Empty { op: "attention" });
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Tensor::zeros(vq.rows(), d);
        let mut probs = Vec::with_capacity(heads * segments.len());
        for (qr, kr) in &segments {
            let (n, ks) = (qr.len(), kr.len());
            for h in 0..heads {
                let c0 = h * dh;
                let mut p = Tensor::zeros(n, shared + ks);
                let qh = View::block(vq, qr.start, n, c0, dh);
                gemm(scale, qh, View::block(vk, 0, shared, c0, dh).t(), 0.0, ViewMut::block(&mut p, 0, n, 0, shared));
                gemm(scale, qh, View::block(vk, kr.start, ks, c0, dh).t(), 0.0, ViewMut::block(&mut p, 0, n, shared, ks));
                for r in 0..n {
                    softmax_in_place(p.row_slice_mut(r));
                }
                let mut dst = ViewMut::block(&mut out, qr.start, n, c0, dh);
                gemm(1.0, View::block(&p, 0, n, 0, shared), View::block(vv, 0, shared, c0, dh), 0.0, dst.reborrow());
                gemm(1.0, View::block(&p, 0, n, shared, ks), View::block(vv, kr.start, ks, c0, dh), 1.0, dst);
                probs.push(p);
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(out, Op::Attention { q, k, v, heads, shared, segments, probs }, rg))
    }

    /// Attention probabilities (one `n x s` matrix per head) recorded by an
    /// [`Tape::attention`] node.
    pub fn attention_probs(&self, id: NodeId) -> Option<&[Tensor]> {
        match &self.nodes[id.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn custom(&mut self, inputs: &[NodeId], value: Tensor, op: Box<dyn CustomOp>) -> NodeId {
        let rg = self.rg(inputs);
        self.push(value, Op::Custom { inputs: inputs.to_vec(), op }, rg)
    }

    /// Reverse sweep from a scalar loss with seed gradient 1.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, TensorError> {
        let v = self.value(loss);
        if v.shape() != (1, 1) {
            return Err(TensorError::ShapeMismatch { op: "backward", left: v.shape(), right: (1, 1) });
        }
        self.backward_seeded(loss, Tensor::scalar(1.0))
    }

    /// Reverse sweep from any node with an explicit upstream gradient.
    pub fn backward_seeded(&self, root: NodeId, seed: Tensor) -> Result<Gradients, TensorError> {
        if !self.nodes[root.0].requires_grad {
            return Err(TensorError::DetachedLoss);
        }
        if seed.shape() != self.value(root).shape() {
            return Err(mismatch("backward_seeded", self.value(root), &seed));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(seed);
        let mut out = Gradients::default();

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    out.leaves.insert(NodeId(idx), g);
                }
                Op::Param(pid) => out.params.add(*pid, g),
                op => self.propagate(op, &node.value, &g, &mut grads),
            }
        }
        Ok(out)
    }

    fn accum(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    self.accum(grads, *a, matmul_nt(g, self.value(*b)));
                }
                if self.wants(*b) {
                    self.accum(grads, *b, matmul_tn(self.value(*a), g));
                }
            }
            Op::MatMulNt(a, b) => {
                // out = a b^T: da = g b, db = g^T a
                if self.wants(*a) {
                    self.accum(grads, *a, matmul(g, self.value(*b)));
                }
                if self.wants(*b) {
                    self.accum(grads, *b, matmul_tn(g, self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    self.accum(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    self.accum(grads, *b, g.clone());
                }
            }
            Op::AddRow(a, row) => {
                if self.wants(*a) {
                    self.accum(grads, *a, g.clone());
                }
                if self.wants(*row) {
                    let mut gr = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (acc, v) in gr.data_mut().iter_mut().zip(g.row_slice(r)) {
                            *acc += v;
                        }
                    }
                    self.accum(grads, *row, gr);
                }
            }
            Op::Scale(a, f) => {
                let mut ga = g.clone();
                ga.scale_assign(*f);
                self.accum(grads, *a, ga);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.wants(p) {
                        let data = g.data()[offset * g.cols()..(offset + rows) * g.cols()].to_vec();
                        self.accum(grads, p, Tensor::from_vec(rows, g.cols(), data).expect("concat slice"));
                    }
                    offset += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let cols = self.value(p).cols();
                    if self.wants(p) {
                        let mut gp = Tensor::zeros(g.rows(), cols);
                        for r in 0..g.rows() {
                            gp.row_slice_mut(r).copy_from_slice(&g.row_slice(r)[offset..offset + cols]);
                        }
                        self.accum(grads, p, gp);
                    }
                    offset += cols;
                }
            }
            Op::SliceCols(a, start) => {
                let va = self.value(*a);
                let mut ga = Tensor::zeros(va.rows(), va.cols());
                for r in 0..g.rows() {
                    ga.row_slice_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row_slice(r));
                }
                self.accum(grads, *a, ga);
            }
            Op::SoftmaxRows(a) => {
                let mut ga = Tensor::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let (y, gy) = (out.row_slice(r), g.row_slice(r));
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for (c, dst) in ga.row_slice_mut(r).iter_mut().enumerate() {
                        *dst = y[c] * (gy[c] - dot);
                    }
                }
                self.accum(grads, *a, ga);
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let vg = self.value(*gain);
                let d = out.cols();
                if self.wants(*x) {
                    let mut gx = Tensor::zeros(out.rows(), d);
                    let mut dxhat = vec![0.0; d];
                    for r in 0..out.rows() {
                        let gy = g.row_slice(r);
                        let xh = xhat.row_slice(r);
                        for c in 0..d {
                            dxhat[c] = gy[c] * vg.data()[c];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        let dst = gx.row_slice_mut(r);
                        for c in 0..d {
                            dst[c] = inv_std[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
                        }
                    }
                    self.accum(grads, *x, gx);
                }
                if self.wants(*gain) || self.wants(*bias) {
                    let mut gg = Tensor::zeros(1, d);
                    let mut gb = Tensor::zeros(1, d);
                    for r in 0..out.rows() {
                        let gy = g.row_slice(r);
                        let xh = xhat.row_slice(r);
                        for c in 0..d {
                            gg.data_mut()[c] += gy[c] * xh[c];
                            gb.data_mut()[c] += gy[c];
                        }
                    }
                    self.accum(grads, *gain, gg);
                    self.accum(grads, *bias, gb);
                }
            }
            Op::Gelu(a) => {
                let va = self.value(*a);
                let mut ga = g.clone();
                for (dst, x) in ga.data_mut().iter_mut().zip(va.data()) {
                    *dst *= gelu_grad(*x);
                }
                self.accum(grads, *a, ga);
            }
            Op::Tanh(a) => {
                let mut ga = g.clone();
                for (dst, y) in ga.data_mut().iter_mut().zip(out.data()) {
                    *dst *= 1.0 - y * y;
                }
                self.accum(grads, *a, ga);
            }
            Op::MeanRows(a) => {
                let va = self.value(*a);
                let inv = 1.0 / va.rows() as f64;
                let mut ga = Tensor::zeros(va.rows(), va.cols());
                for r in 0..va.rows() {
                    for (dst, v) in ga.row_slice_mut(r).iter_mut().zip(g.data()) {
                        *dst = v * inv;
                    }
                }
                self.accum(grads, *a, ga);
            }
            Op::SegmentMean { x, segments } => {
                let vx = self.value(*x);
                let mut gx = Tensor::zeros(vx.rows(), vx.cols());
                for (i, r) in segments.iter().enumerate() {
                    let inv = 1.0 / r.len() as f64;
                    for row in r.clone() {
                        for (dst, v) in gx.row_slice_mut(row).iter_mut().zip(g.row_slice(i)) {
                            *dst = v * inv;
                        }
                    }
                }
                self.accum(grads, *x, gx);
            }
            Op::Sum(a) => {
                let va = self.value(*a);
                self.accum(grads, *a, Tensor::full(va.rows(), va.cols(), g.item()));
            }
            Op::L2NormalizeRows { x, norms } => {
                let mut gx = Tensor::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let (y, gy) = (out.row_slice(r), g.row_slice(r));
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for (c, dst) in gx.row_slice_mut(r).iter_mut().enumerate() {
                        *dst = (gy[c] - y[c] * dot) / norms[r];
                    }
                }
                self.accum(grads, *x, gx);
            }
            Op::GatherRows { table, ids } => {
                let vt = self.value(*table);
                let mut gt = Tensor::zeros(vt.rows(), vt.cols());
                for (r, &i) in ids.iter().enumerate() {
                    for (dst, v) in gt.row_slice_mut(i).iter_mut().zip(g.row_slice(r)) {
                        *dst += v;
                    }
                }
                self.accum(grads, *table, gt);
            }
            Op::Attention { q, k, v, heads, shared, segments, probs } => {
                let (vq, vk, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let d = vq.cols();
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let shared = *shared;
                let mut gq = Tensor::zeros(vq.rows(), d);
                let mut gk = Tensor::zeros(vk.rows(), d);
                let mut gv = Tensor::zeros(vk.rows(), d);
                let mut probs = probs.iter();
                for (qr, kr) in segments {
                    let (n, ks) = (qr.len(), kr.len());
                    for h in 0..*heads {
                        let p = probs.next().expect("one probability matrix per segment and head");
                        let c0 = h * dh;
                        let go = View::block(g, qr.start, n, c0, dh);
                        // dV = P^T dO, split over shared and own key rows
                        gemm(1.0, View::block(p, 0, n, 0, shared).t(), go, 1.0, ViewMut::block(&mut gv, 0, shared, c0, dh));
                        gemm(1.0, View::block(p, 0, n, shared, ks).t(), go, 1.0, ViewMut::block(&mut gv, kr.start, ks, c0, dh));
                        // dP = dO V^T
                        let mut dp = Tensor::zeros(n, shared + ks);
                        gemm(1.0, go, View::block(vv, 0, shared, c0, dh).t(), 0.0, ViewMut::block(&mut dp, 0, n, 0, shared));
                        gemm(1.0, go, View::block(vv, kr.start, ks, c0, dh).t(), 0.0, ViewMut::block(&mut dp, 0, n, shared, ks));
                        // dS = P * (dP - rowsum(dP * P)), then the score scale
                        for r in 0..n {
                            let pr = p.row_slice(r);
                            let dpr = dp.row_slice_mut(r);
                            let dot: f64 = pr.iter().zip(dpr.iter()).map(|(a, b)| a * b).sum();
                            for c in 0..shared + ks {
                                dpr[c] = pr[c] * (dpr[c] - dot) * scale;
                            }
                        }
                        let (ds_shared, ds_own) = (View::block(&dp, 0, n, 0, shared), View::block(&dp, 0, n, shared, ks));
                        let mut dq = ViewMut::block(&mut gq, qr.start, n, c0, dh);
                        gemm(1.0, ds_shared, View::block(vk, 0, shared, c0, dh), 1.0, dq.reborrow());
                        gemm(1.0, ds_own, View::block(vk, kr.start, ks, c0, dh), 1.0, dq);
                        let qh = View::block(vq, qr.start, n, c0, dh);
                        gemm(1.0, ds_shared.t(), qh, 1.0, ViewMut::block(&mut gk, 0, shared, c0, dh));
                        gemm(1.0, ds_own.t(), qh, 1.0, ViewMut::block(&mut gk, kr.start, ks, c0, dh));
                    }
                }
                self.accum(grads, *q, gq);
                self.accum(grads, *k, gk);
                self.accum(grads, *v, gv);
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|i| self.value(*i)).collect();
                let gs = op.backward(&vals, out, g);
                debug_assert_eq!(gs.len(), inputs.len(), "custom op {} gradient arity", op.name());
                for (i, gi) in inputs.iter().zip(gs) {
                    if let Some(gi) = gi {
                        self.accum(grads, *i, gi);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    #[test]
    fn softmax_of_equal_values_is_uniform() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::full(2, 4, 3.7));
        let y = t.softmax_rows(x);
        for v in t.value(y).data() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn l2_normalize_gives_unit_rows() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::randn(3, 5, 2.0, &mut rng()));
        let y = t.l2_normalize_rows(x).unwrap();
        for r in 0..3 {
            let row = t.value(y).row_slice(r);
            let dot: f64 = row.iter().map(|v| v * v).sum();
            assert!((dot - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn l2_normalize_rejects_zero_rows() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(1, 3));
        assert_eq!(t.l2_normalize_rows(x), Err(TensorError::ZeroVector));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(2, 3));
        let b = t.constant(Tensor::zeros(2, 3));
        assert!(matches!(t.matmul(a, b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut store = ParamStore::new();
        let w = store.register("w", Tensor::randn(2, 3, 1.0, &mut rng()), true);
        let mut t = Tape::new();
        let x = t.param(&store, w);
        let loss = t.sum(x);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.params.get(w).unwrap(), &Tensor::full(2, 3, 1.0));
    }

    #[test]
    fn unrelated_parameter_keeps_zero_gradient() {
        let mut store = ParamStore::new();
        let w = store.register("w", Tensor::full(1, 2, 1.0), true);
        let u = store.register("u", Tensor::full(1, 2, 1.0), true);
        let mut t = Tape::new();
        let xw = t.param(&store, w);
        let _xu = t.param(&store, u);
        let loss = t.sum(xw);
        let g = t.backward(loss).unwrap();
        store.accumulate(&g.params);
        assert_eq!(store.get(u).grad(), &Tensor::zeros(1, 2));
    }

    #[test]
    fn constant_loss_is_detached() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::scalar(2.0));
        let loss = t.sum(x);
        assert_eq!(t.backward(loss).unwrap_err(), TensorError::DetachedLoss);
    }

    #[test]
    fn frozen_parameters_get_no_gradient() {
        let mut store = ParamStore::new();
        let w = store.register("w", Tensor::full(1, 2, 1.0), true);
        let u = store.register("u", Tensor::full(1, 2, 1.0), true);
        store.set_trainable(u, false);
        let mut t = Tape::new();
        let xw = t.param(&store, w);
        let xu = t.param(&store, u);
        let s = t.add(xw, xu).unwrap();
        let loss = t.sum(s);
        let g = t.backward(loss).unwrap();
        assert!(g.params.get(u).is_none());
        store.accumulate(&g.params);
        assert_eq!(store.get(u).grad(), &Tensor::zeros(1, 2));
    }

    #[test]
    fn accumulation_is_additive() {
        let mut store = ParamStore::new();
        let w = store.register("w", Tensor::randn(2, 2, 1.0, &mut rng()), true);
        let mut t = Tape::new();
        let x = t.param(&store, w);
        let y = t.matmul(x, x).unwrap();
        let loss = t.sum(y);
        let g = t.backward(loss).unwrap();
        store.accumulate(&g.params);
        let once = store.get(w).grad().clone();
        store.accumulate(&g.params);
        let mut twice = once.clone();
        twice.scale_assign(2.0);
        assert_eq!(store.get(w).grad(), &twice);
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut r = rng();
        let mut t = Tape::new();
        let q = t.constant(Tensor::randn(3, 4, 1.0, &mut r));
        let k = t.constant(Tensor::randn(5, 4, 1.0, &mut r));
        let v = t.constant(Tensor::randn(5, 4, 1.0, &mut r));
        let o = t.attention(q, k, v, 2).unwrap();
        assert_eq!(t.value(o).shape(), (3, 4));
        for p in t.attention_probs(o).unwrap() {
            assert_eq!(p.shape(), (3, 5));
            for row in 0..3 {
                let s: f64 = p.row_slice(row).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
                assert!(p.row_slice(row).iter().all(|&x| x > 0.0));
            }
        }
    }
}
