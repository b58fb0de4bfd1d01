//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! A [`Tape`] records every operation of a forward pass. It is rebuilt for
//! each batch; [`Tape::backward`] then walks the recording in reverse and
//! accumulates gradients into the [`ParamStore`]. Gradients accumulate across
//! calls until the optimizer clears them, so calling `backward` twice on the
//! same loss doubles every parameter gradient.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::sparse::SparseMatrix;
use crate::tensor::{dot, Tensor};

/// Probabilities are clamped to this floor inside logs.
pub const PROB_FLOOR: f64 = 1e-8;
/// Norms below this are treated as zero by [`Tape::cosine_rows`].
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    SpMM(Arc<SparseMatrix>, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    ConcatCols(NodeId, NodeId),
    ConcatRows(Vec<NodeId>),
    SliceRows(NodeId, usize),
    GatherRows(NodeId, Vec<usize>),
    Reshape(NodeId),
    Transpose(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Log(NodeId),
    SoftmaxRows(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    MeanRows(NodeId),
    CosineRows(NodeId, NodeId),
    KlDivRows(NodeId, NodeId),
    InfoNce(NodeId, usize),
    BceOneHot(NodeId, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints of every node reached from a loss.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }
}

fn acc(adj: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut adj[id.0] {
        Some(a) => a.add_assign(&g),
        slot @ None => *slot = Some(g),
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

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool, param: Option<ParamId>) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            param,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false, None)
    }

    /// A differentiable leaf not bound to any parameter.
    pub fn var(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, true, None)
    }

    /// A leaf holding a snapshot of a parameter's current value.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        self.leaf(store.value(id).clone(), true, Some(id))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b]))
    }

    /// Sparse constant times dense node.
    pub fn spmm(&mut self, s: &Arc<SparseMatrix>, x: NodeId) -> Result<NodeId> {
        let v = s.matmul_dense(self.value(x))?;
        Ok(self.push(v, Op::SpMM(Arc::clone(s), x), &[x]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    /// Adds the `1×c` node `row` to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr != (1, sa.1) {
            return Err(Error::shape("add_row", sa, sr));
        }
        let mut v = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..sa.0 {
            for (x, y) in v.row_mut(i).iter_mut().zip(&r) {
                *x += y;
            }
        }
        Ok(self.push(v, Op::AddRow(a, row), &[a, row]))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.0 != sb.0 {
            return Err(Error::shape("concat_cols", sa, sb));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let mut data = Vec::with_capacity(sa.0 * (sa.1 + sb.1));
        for r in 0..sa.0 {
            data.extend_from_slice(va.row(r));
            data.extend_from_slice(vb.row(r));
        }
        let v = Tensor::from_vec(sa.0, sa.1 + sb.1, data)?;
        Ok(self.push(v, Op::ConcatCols(a, b), &[a, b]))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = parts.first() else {
            return Err(Error::InvalidArgument("concat_rows of nothing".into()));
        };
        let cols = self.shape(first).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.1 != cols {
                return Err(Error::shape("concat_rows", self.shape(first), s));
            }
            rows += s.0;
            data.extend_from_slice(self.value(p).data());
        }
        let v = Tensor::from_vec(rows, cols, data)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let s = self.shape(a);
        if start + len > s.0 {
            return Err(Error::shape("slice_rows", s, (start, len)));
        }
        let data = self.value(a).data()[start * s.1..(start + len) * s.1].to_vec();
        let v = Tensor::from_vec(len, s.1, data)?;
        Ok(self.push(v, Op::SliceRows(a, start), &[a]))
    }

    /// Row `i` of the output is row `index[i]` of `a`; repeats allowed.
    pub fn gather_rows(&mut self, a: NodeId, index: &[usize]) -> Result<NodeId> {
        let s = self.shape(a);
        let src = self.value(a);
        let mut data = Vec::with_capacity(index.len() * s.1);
        for &i in index {
            if i >= s.0 {
                return Err(Error::IndexOutOfRange {
                    what: "gather_rows",
                    index: i,
                    size: s.0,
                });
            }
            data.extend_from_slice(src.row(i));
        }
        let v = Tensor::from_vec(index.len(), s.1, data)?;
        Ok(self.push(v, Op::GatherRows(a, index.to_vec()), &[a]))
    }

    /// Reinterprets the row-major buffer with a new shape.
    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let v = Tensor::from_vec(rows, cols, self.value(a).data().to_vec())
            .map_err(|_| Error::shape("reshape", self.shape(a), (rows, cols)))?;
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a), &[a])
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Log(a), &[a])
    }

    /// Row-wise softmax; each row's max is subtracted before exponentiation.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let src = self.value(a);
        let mut v = Tensor::zeros(src.rows(), src.cols());
        for r in 0..src.rows() {
            v.row_mut(r)
                .copy_from_slice(&crate::tensor::softmax(src.row(r)));
        }
        self.push(v, Op::SoftmaxRows(a), &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / t.len().max(1) as f64);
        self.push(v, Op::Mean(a), &[a])
    }

    /// Column means, as a `1×c` row.
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let t = self.value(a);
        let (r, c) = t.shape();
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(t.row(i)) {
                *o += v;
            }
        }
        let n = r.max(1) as f64;
        let v = Tensor::row_vector(out.into_iter().map(|x| x / n).collect());
        self.push(v, Op::MeanRows(a), &[a])
    }

    /// Cosine similarity of matching rows, as an `r×1` column.
    pub fn cosine_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("cosine_rows", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let out: Vec<f64> = (0..va.rows())
            .map(|r| cosine(va.row(r), vb.row(r)))
            .collect();
        let v = Tensor::from_vec(out.len(), 1, out)?;
        Ok(self.push(v, Op::CosineRows(a, b), &[a, b]))
    }

    /// Per-row `Σ p (log p − log q)` with both sides clamped to
    /// `[PROB_FLOOR, 1]`, as an `r×1` column.
    pub fn kl_div_rows(&mut self, p: NodeId, q: NodeId) -> Result<NodeId> {
        self.same_shape("kl_div", p, q)?;
        let (vp, vq) = (self.value(p), self.value(q));
        let out: Vec<f64> = (0..vp.rows())
            .map(|r| {
                vp.row(r)
                    .iter()
                    .zip(vq.row(r))
                    .map(|(&p, &q)| {
                        let (p, q) = (clamp_prob(p), clamp_prob(q));
                        p * (p.ln() - q.ln())
                    })
                    .sum()
            })
            .collect();
        let v = Tensor::from_vec(out.len(), 1, out)?;
        Ok(self.push(v, Op::KlDivRows(p, q), &[p, q]))
    }

    /// Per-row `−log(Σ_{j<n_pos} e^{z_j} / Σ_j e^{z_j})`, as an `r×1` column.
    pub fn info_nce(&mut self, logits: NodeId, n_pos: usize) -> Result<NodeId> {
        let s = self.shape(logits);
        if n_pos == 0 || n_pos > s.1 {
            return Err(Error::shape("info_nce", s, (n_pos, 0)));
        }
        let t = self.value(logits);
        let out: Vec<f64> = (0..s.0)
            .map(|r| {
                let z = t.row(r);
                log_sum_exp(z) - log_sum_exp(&z[..n_pos])
            })
            .collect();
        let v = Tensor::from_vec(s.0, 1, out)?;
        Ok(self.push(v, Op::InfoNce(logits, n_pos), &[logits]))
    }

    /// Per-row binary cross-entropy against a one-hot target,
    /// `−[log ŷ_t + Σ_{i≠t} log(1 − ŷ_i)]` with `ŷ` clamped to
    /// `[PROB_FLOOR, 1 − PROB_FLOOR]`, as an `r×1` column.
    pub fn bce_one_hot(&mut self, probs: NodeId, targets: &[usize]) -> Result<NodeId> {
        let s = self.shape(probs);
        if targets.len() != s.0 {
            return Err(Error::shape("bce_one_hot", s, (targets.len(), 1)));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= s.1) {
            return Err(Error::IndexOutOfRange {
                what: "bce_one_hot targets",
                index: t,
                size: s.1,
            });
        }
        let p = self.value(probs);
        let out: Vec<f64> = targets
            .iter()
            .enumerate()
            .map(|(r, &t)| {
                -p.row(r)
                    .iter()
                    .enumerate()
                    .map(|(i, &y)| {
                        let y = clamp_bce(y);
                        if i == t {
                            y.ln()
                        } else {
                            (1.0 - y).ln()
                        }
                    })
                    .sum::<f64>()
            })
            .collect();
        let v = Tensor::from_vec(s.0, 1, out)?;
        Ok(self.push(v, Op::BceOneHot(probs, targets.to_vec()), &[probs]))
    }

    /// Adjoints of every node with respect to the scalar `loss`.
    pub fn gradients(&self, loss: NodeId) -> Result<Gradients> {
        let s = self.shape(loss);
        if s != (1, 1) {
            return Err(Error::shape("backward (loss must be scalar)", s, (1, 1)));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                adj[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            self.propagate(node, &g, &mut adj)?;
        }
        Ok(Gradients { grads: adj })
    }

    /// Accumulates `∂loss/∂p` into every parameter leaf on this tape.
    pub fn backward(&self, loss: NodeId, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(pid), Some(g)) = (node.param, &grads.grads[i]) {
                store.accumulate_grad(pid, g);
            }
        }
        Ok(())
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, adj: &mut [Option<Tensor>]) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    acc(adj, *a, g.matmul_t(self.value(*b))?);
                }
                if self.wants(*b) {
                    acc(adj, *b, self.value(*a).t_matmul(g)?);
                }
            }
            Op::SpMM(s, x) => acc(adj, *x, s.transpose_matmul_dense(g)?),
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(adj, *a, g.clone());
                }
                if self.wants(*b) {
                    acc(adj, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    acc(adj, *a, g.clone());
                }
                if self.wants(*b) {
                    acc(adj, *b, g.scale(-1.0));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    acc(adj, *a, g.zip_map(self.value(*b), |g, v| g * v));
                }
                if self.wants(*b) {
                    acc(adj, *b, g.zip_map(self.value(*a), |g, v| g * v));
                }
            }
            Op::AddRow(a, row) => {
                if self.wants(*a) {
                    acc(adj, *a, g.clone());
                }
                if self.wants(*row) {
                    let mut sums = vec![0.0; g.cols()];
                    for r in 0..g.rows() {
                        for (s, v) in sums.iter_mut().zip(g.row(r)) {
                            *s += v;
                        }
                    }
                    acc(adj, *row, Tensor::row_vector(sums));
                }
            }
            Op::Scale(a, s) => acc(adj, *a, g.scale(*s)),
            Op::ConcatCols(a, b) => {
                let ca = self.shape(*a).1;
                let cb = self.shape(*b).1;
                let rows = g.rows();
                let mut ga = Tensor::zeros(rows, ca);
                let mut gb = Tensor::zeros(rows, cb);
                for r in 0..rows {
                    ga.row_mut(r).copy_from_slice(&g.row(r)[..ca]);
                    gb.row_mut(r).copy_from_slice(&g.row(r)[ca..]);
                }
                if self.wants(*a) {
                    acc(adj, *a, ga);
                }
                if self.wants(*b) {
                    acc(adj, *b, gb);
                }
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut start = 0;
                for &p in parts {
                    let rows = self.shape(p).0;
                    if self.wants(p) {
                        let data = g.data()[start * cols..(start + rows) * cols].to_vec();
                        acc(adj, p, Tensor::from_vec(rows, cols, data)?);
                    }
                    start += rows;
                }
            }
            Op::SliceRows(a, start) => {
                let (r, c) = self.shape(*a);
                let mut ga = Tensor::zeros(r, c);
                ga.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                acc(adj, *a, ga);
            }
            Op::GatherRows(a, index) => {
                let (r, c) = self.shape(*a);
                let mut ga = Tensor::zeros(r, c);
                for (k, &i) in index.iter().enumerate() {
                    for (o, v) in ga.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                acc(adj, *a, ga);
            }
            Op::Reshape(a) => {
                let (r, c) = self.shape(*a);
                acc(adj, *a, Tensor::from_vec(r, c, g.data().to_vec())?);
            }
            Op::Transpose(a) => acc(adj, *a, g.transpose()),
            Op::Tanh(a) => acc(adj, *a, g.zip_map(y, |g, y| g * (1.0 - y * y))),
            Op::Sigmoid(a) => acc(adj, *a, g.zip_map(y, |g, y| g * y * (1.0 - y))),
            Op::Exp(a) => acc(adj, *a, g.zip_map(y, |g, y| g * y)),
            Op::Log(a) => acc(adj, *a, g.zip_map(self.value(*a), |g, x| g / x)),
            Op::SoftmaxRows(a) => {
                let mut ga = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let inner = dot(yr, gr);
                    for ((o, &yv), &gv) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - inner);
                    }
                }
                acc(adj, *a, ga);
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                acc(adj, *a, Tensor::full(r, c, g.item()));
            }
            Op::Mean(a) => {
                let (r, c) = self.shape(*a);
                acc(adj, *a, Tensor::full(r, c, g.item() / (r * c).max(1) as f64));
            }
            Op::MeanRows(a) => {
                let (r, c) = self.shape(*a);
                let mut ga = Tensor::zeros(r, c);
                let n = r.max(1) as f64;
                for i in 0..r {
                    for (o, v) in ga.row_mut(i).iter_mut().zip(g.data()) {
                        *o = v / n;
                    }
                }
                acc(adj, *a, ga);
            }
            Op::CosineRows(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (r, c) = va.shape();
                let mut ga = Tensor::zeros(r, c);
                let mut gb = Tensor::zeros(r, c);
                for i in 0..r {
                    let (x, z) = (va.row(i), vb.row(i));
                    let (nx, nz) = (norm(x), norm(z));
                    if nx < NORM_FLOOR || nz < NORM_FLOOR {
                        continue;
                    }
                    let cos = y.get(i, 0);
                    let gi = g.get(i, 0);
                    for k in 0..c {
                        ga.set(i, k, gi * (z[k] / (nx * nz) - cos * x[k] / (nx * nx)));
                        gb.set(i, k, gi * (x[k] / (nx * nz) - cos * z[k] / (nz * nz)));
                    }
                }
                if self.wants(*a) {
                    acc(adj, *a, ga);
                }
                if self.wants(*b) {
                    acc(adj, *b, gb);
                }
            }
            Op::KlDivRows(p, q) => {
                let (vp, vq) = (self.value(*p), self.value(*q));
                let gp = Tensor::from_vec(
                    vp.rows(),
                    vp.cols(),
                    (0..vp.rows())
                        .flat_map(|r| {
                            let gr = g.get(r, 0);
                            vp.row(r).iter().zip(vq.row(r)).map(move |(&p, &q)| {
                                if in_prob_range(p) {
                                    gr * (p.ln() - clamp_prob(q).ln() + 1.0)
                                } else {
                                    0.0
                                }
                            })
                        })
                        .collect(),
                )?;
                let gq = Tensor::from_vec(
                    vq.rows(),
                    vq.cols(),
                    (0..vq.rows())
                        .flat_map(|r| {
                            let gr = g.get(r, 0);
                            vp.row(r).iter().zip(vq.row(r)).map(move |(&p, &q)| {
                                if in_prob_range(q) {
                                    -gr * clamp_prob(p) / q
                                } else {
                                    0.0
                                }
                            })
                        })
                        .collect(),
                )?;
                if self.wants(*p) {
                    acc(adj, *p, gp);
                }
                if self.wants(*q) {
                    acc(adj, *q, gq);
                }
            }
            Op::InfoNce(a, n_pos) => {
                let z = self.value(*a);
                let mut ga = Tensor::zeros(z.rows(), z.cols());
                for r in 0..z.rows() {
                    let zr = z.row(r);
                    let all = log_sum_exp(zr);
                    let pos = log_sum_exp(&zr[..*n_pos]);
                    let gr = g.get(r, 0);
                    for (j, o) in ga.row_mut(r).iter_mut().enumerate() {
                        let mut d = (zr[j] - all).exp();
                        if j < *n_pos {
                            d -= (zr[j] - pos).exp();
                        }
                        *o = gr * d;
                    }
                }
                acc(adj, *a, ga);
            }
            Op::BceOneHot(a, targets) => {
                let p = self.value(*a);
                let mut ga = Tensor::zeros(p.rows(), p.cols());
                for (r, &t) in targets.iter().enumerate() {
                    let gr = g.get(r, 0);
                    for (i, (o, &y)) in ga.row_mut(r).iter_mut().zip(p.row(r)).enumerate() {
                        if y <= PROB_FLOOR || y >= 1.0 - PROB_FLOOR {
                            continue;
                        }
                        *o = if i == t { -gr / y } else { gr / (1.0 - y) };
                    }
                }
                acc(adj, *a, ga);
            }
        }
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

/// Cosine similarity; zero when either vector has (near) zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na < NORM_FLOOR || nb < NORM_FLOOR {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

pub fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, 1.0)
}

fn in_prob_range(p: f64) -> bool {
    p > PROB_FLOOR && p < 1.0
}

pub(crate) fn clamp_bce(y: f64) -> f64 {
    y.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = Tape::new();
        let x = tape.var(t(&[&[1.0, -2.0], &[3.0, 0.5]]));
        let s = tape.sum(x);
        let g = tape.gradients(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &Tensor::full(2, 2, 1.0));
    }

    #[test]
    fn tanh_gradient_at_zero_is_one() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::zeros(3, 2));
        let h = tape.tanh(x);
        let s = tape.sum(h);
        let g = tape.gradients(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &Tensor::full(3, 2, 1.0));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.var(Tensor::zeros(2, 2));
        assert!(matches!(
            tape.gradients(x),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[&[0.0, 0.0]]));
        let y = tape.softmax_rows(x);
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn cosine_of_self_is_one_and_zero_vector_is_inert() {
        let mut tape = Tape::new();
        let a = tape.var(t(&[&[1.0, 2.0, -3.0], &[0.0, 0.0, 0.0]]));
        let b = tape.var(t(&[&[1.0, 2.0, -3.0], &[1.0, 1.0, 1.0]]));
        let c = tape.cosine_rows(a, b).unwrap();
        assert!((tape.value(c).get(0, 0) - 1.0).abs() < 1e-12);
        assert_eq!(tape.value(c).get(1, 0), 0.0);
        let s = tape.sum(c);
        let g = tape.gradients(s).unwrap();
        assert!(g.get(a).unwrap().row(1).iter().all(|&v| v == 0.0));
        assert!(g.get(b).unwrap().row(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn kl_of_identical_rows_is_zero() {
        let mut tape = Tape::new();
        let p = tape.constant(t(&[&[0.2, 0.3, 0.5]]));
        let k = tape.kl_div_rows(p, p).unwrap();
        assert!(tape.value(k).item().abs() < 1e-15);
    }

    #[test]
    fn identity_spmm_returns_input() {
        let mut tape = Tape::new();
        let x = tape.var(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let s = Arc::new(SparseMatrix::identity(2));
        let y = tape.spmm(&s, x).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn backward_twice_accumulates() {
        let mut store = ParamStore::new();
        let id = store.add("w", t(&[&[1.0, 2.0]])).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&store, id);
        let s = tape.sum(w);
        tape.backward(s, &mut store).unwrap();
        tape.backward(s, &mut store).unwrap();
        assert_eq!(store.get(id).grad.as_ref().unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::new();
        let a = tape.var(Tensor::zeros(2, 3));
        let b = tape.var(Tensor::zeros(3, 2));
        let err = tape.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add") && err.contains("(2, 3)") && err.contains("(3, 2)"));
    }
}
