//! Minimal reverse-mode autodiff over `ndarray` matrices.
//!
//! Every value on the tape is a dense `f64` matrix (scalars are 1x1).
//! A forward pass builds nodes, `backward` walks them in reverse and
//! returns gradients for the parameter leaves. The op set is exactly
//! what the encoders and losses need; shape violations inside the tape
//! are programmer errors and panic, while user-facing validation lives
//! in the model-level operations.

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use std::sync::Arc;

pub type Matrix = Array2<f64>;
pub type Mask = Array2<bool>;

/// Index of a parameter tensor inside a [`ParamStore`].
pub type ParamId = usize;

/// Named parameter tensors plus cheap shared access for forward passes.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    tensors: Vec<Arc<Matrix>>,
    names: Vec<String>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        self.tensors.push(Arc::new(value));
        self.names.push(name.into());
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.tensors[id]
    }

    pub fn shared(&self, id: ParamId) -> Arc<Matrix> {
        Arc::clone(&self.tensors[id])
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        Arc::make_mut(&mut self.tensors[id])
    }

    pub fn set(&mut self, id: ParamId, value: Matrix) {
        assert_eq!(self.tensors[id].dim(), value.dim(), "param shape is fixed");
        self.tensors[id] = Arc::new(value);
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix)> {
        self.names
            .iter()
            .zip(self.tensors.iter())
            .enumerate()
            .map(|(id, (name, t))| (id, name.as_str(), t.as_ref()))
    }

    /// SHA-256 over the little-endian bytes of the listed tensors, in order.
    pub fn digest(&self, ids: &[ParamId]) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for &id in ids {
            for v in self.tensors[id].iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher.finalize().into()
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }
}

/// Per-parameter gradient accumulator aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn zeros(n_params: usize) -> Self {
        Self {
            grads: vec![None; n_params],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.grads[id].as_ref()
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        assert_eq!(self.grads.len(), other.grads.len());
        for (dst, src) in self.grads.iter_mut().zip(other.grads.iter()) {
            if let Some(s) = src {
                match dst {
                    Some(d) => *d += s,
                    None => *dst = Some(s.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.mapv_inplace(|v| v * factor);
        }
    }

    fn add_at(&mut self, id: ParamId, delta: &Matrix) {
        match &mut self.grads[id] {
            Some(g) => *g += delta,
            slot => *slot = Some(delta.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Constant,
    Param(ParamId),
    Add(NodeId, NodeId),
    /// Broadcast-add a 1 x d row onto every row of an n x d matrix.
    AddRow(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    MatMul(NodeId, NodeId),
    /// a @ b.T without materializing the transpose.
    MatMulTb(NodeId, NodeId),
    Relu(NodeId),
    // Masked entries are exactly zero in the output, so the backward pass
    // needs no mask: their gradient contribution vanishes with them.
    SoftmaxRows(NodeId),
    /// Row-wise log-sum-exp over masked entries; output n x 1.
    LogSumExpRows(NodeId, Arc<Mask>),
    LayerNormRows {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    },
    L2NormalizeRows(NodeId),
    ConcatCols(Vec<NodeId>),
    SliceCols {
        x: NodeId,
        start: usize,
        end: usize,
    },
    GatherRows(NodeId, Arc<Vec<usize>>),
    SumAll(NodeId),
    MulConst(NodeId, Arc<Matrix>),
    /// Mean over rows of -log softmax(logits)[label]; output 1 x 1.
    CrossEntropyMean(NodeId, Arc<Vec<usize>>),
}

struct Node {
    value: Arc<Matrix>,
    op: Op,
}

const LN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;

/// Forward tape. Build ops, then call [`Tape::backward`] on a scalar node.
pub struct Tape<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
}

impl<'a> Tape<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(256),
        }
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        self.push_shared(Arc::new(value), op)
    }

    fn push_shared(&mut self, value: Arc<Matrix>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn store_ref(&self) -> &ParamStore {
        self.store
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.dim(), (1, 1), "node is not a scalar");
        v[(0, 0)]
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Constant)
    }

    pub fn constant_arc(&mut self, value: Arc<Matrix>) -> NodeId {
        self.push_shared(value, Op::Constant)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        self.push_shared(self.store.shared(id), Op::Param(id))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let r = self.value(row);
        assert_eq!(r.nrows(), 1, "bias must be a single row");
        let v = self.value(a) + &r.row(0);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let v = self.value(a) * factor;
        self.push(v, Op::Scale(a, factor))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_tb(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulTb(a, b))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    /// Row-wise softmax; masked-out logits get exactly zero weight.
    ///
    /// Callers must guarantee every row keeps at least one allowed key;
    /// model-level code validates masks before reaching the tape.
    pub fn softmax_rows(&mut self, a: NodeId, mask: Option<Arc<Mask>>) -> NodeId {
        let x = self.value(a);
        if let Some(m) = &mask {
            assert_eq!(m.dim(), x.dim(), "mask shape must match logits");
        }
        let v = masked_softmax(x, mask.as_deref());
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn logsumexp_rows(&mut self, a: NodeId, mask: Arc<Mask>) -> NodeId {
        let x = self.value(a);
        assert_eq!(mask.dim(), x.dim());
        let mut out = Matrix::zeros((x.nrows(), 1));
        for (i, row) in x.axis_iter(Axis(0)).enumerate() {
            let mut max = f64::NEG_INFINITY;
            let mut allowed = 0usize;
            let mut finite = true;
            for (j, &v) in row.iter().enumerate() {
                if mask[(i, j)] {
                    allowed += 1;
                    if !v.is_finite() {
                        finite = false;
                    } else if v > max {
                        max = v;
                    }
                }
            }
            assert!(allowed > 0, "logsumexp row {i} has no allowed entry");
            if !finite || max == f64::NEG_INFINITY {
                out[(i, 0)] = f64::NAN;
                continue;
            }
            let mut sum = 0.0;
            for (j, &v) in row.iter().enumerate() {
                if mask[(i, j)] {
                    sum += (v - max).exp();
                }
            }
            out[(i, 0)] = max + sum.ln();
        }
        self.push(out, Op::LogSumExpRows(a, mask))
    }

    pub fn layer_norm_rows(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let xv = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        assert_eq!(g.nrows(), 1);
        assert_eq!(b.nrows(), 1);
        assert_eq!(g.ncols(), xv.ncols());
        let mut out = xv.clone();
        for mut row in out.axis_iter_mut(Axis(0)) {
            let d = row.len() as f64;
            let mu = row.sum() / d;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d;
            let s = (var + LN_EPS).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mu) / s * g[(0, j)] + b[(0, j)];
            }
        }
        self.push(out, Op::LayerNormRows { x, gamma, beta })
    }

    pub fn l2_normalize_rows(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let mut out = xv.clone();
        for mut row in out.axis_iter_mut(Axis(0)) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
            row.mapv_inplace(|v| v / norm);
        }
        self.push(out, Op::L2NormalizeRows(x))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let nrows = self.value(parts[0]).nrows();
        let ncols: usize = parts.iter().map(|&p| self.value(p).ncols()).sum();
        let mut out = Matrix::zeros((nrows, ncols));
        let mut offset = 0;
        for &p in parts {
            let v = self.value(p);
            assert_eq!(v.nrows(), nrows, "concat_cols row mismatch");
            out.slice_mut(ndarray::s![.., offset..offset + v.ncols()])
                .assign(v);
            offset += v.ncols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> NodeId {
        let v = self.value(x).slice(ndarray::s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols { x, start, end })
    }

    pub fn gather_rows(&mut self, x: NodeId, idx: Arc<Vec<usize>>) -> NodeId {
        let xv = self.value(x);
        let mut out = Matrix::zeros((idx.len(), xv.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).assign(&xv.row(i));
        }
        self.push(out, Op::GatherRows(x, idx))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).sum();
        self.push(Matrix::from_elem((1, 1), s), Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    pub fn mul_const(&mut self, x: NodeId, c: Arc<Matrix>) -> NodeId {
        let v = self.value(x) * c.as_ref();
        self.push(v, Op::MulConst(x, c))
    }

    /// Mean cross-entropy of row-wise softmax against integer labels.
    pub fn cross_entropy_mean(&mut self, logits: NodeId, labels: Arc<Vec<usize>>) -> NodeId {
        let x = self.value(logits);
        assert_eq!(x.nrows(), labels.len(), "one label per logit row");
        let probs = masked_softmax(x, None);
        let n = labels.len() as f64;
        let mut loss = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            assert!(label < x.ncols(), "label out of range");
            let p = probs[(i, label)];
            if p.is_nan() {
                loss = f64::NAN;
                break;
            }
            loss -= p.max(1e-300).ln();
        }
        self.push(
            Matrix::from_elem((1, 1), loss / n),
            Op::CrossEntropyMean(logits, labels),
        )
    }

    /// Linear layer helper: x @ w + b.
    pub fn linear(&mut self, x: NodeId, w: ParamId, b: ParamId) -> NodeId {
        let wn = self.param(w);
        let bn = self.param(b);
        let xw = self.matmul(x, wn);
        self.add_row(xw, bn)
    }

    /// Reverse pass from a scalar node; returns parameter gradients.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(self.value(loss).dim(), (1, 1), "loss must be scalar");
        let seed = Matrix::from_elem((1, 1), 1.0);
        self.backward_seeded(&[(loss, seed)], &[]).0
    }

    /// Reverse pass from a scalar, also returning d(loss)/d(node) for the
    /// requested nodes (used to chain gradients across tapes).
    pub fn backward_collect(&self, loss: NodeId, wrt: &[NodeId]) -> (Gradients, Vec<Matrix>) {
        assert_eq!(self.value(loss).dim(), (1, 1), "loss must be scalar");
        let seed = Matrix::from_elem((1, 1), 1.0);
        self.backward_seeded(&[(loss, seed)], wrt)
    }

    /// Reverse pass seeded with explicit upstream gradients at arbitrary
    /// nodes. Seeds at the same node accumulate. Returns parameter
    /// gradients plus d/d(node) for each node in `wrt` (zeros when a node
    /// receives no gradient).
    pub fn backward_seeded(
        &self,
        seeds: &[(NodeId, Matrix)],
        wrt: &[NodeId],
    ) -> (Gradients, Vec<Matrix>) {
        let mut node_grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        for (node, seed) in seeds {
            assert_eq!(
                self.value(*node).dim(),
                seed.dim(),
                "seed shape must match node shape"
            );
            acc(&mut node_grads, *node, seed.clone());
        }
        let mut out = Gradients::zeros(self.store.len());

        let mut collected: Vec<Option<Matrix>> = vec![None; wrt.len()];
        for i in (0..self.nodes.len()).rev() {
            let Some(grad) = node_grads[i].take() else {
                continue;
            };
            for (slot, target) in collected.iter_mut().zip(wrt.iter()) {
                if target.0 == i {
                    *slot = Some(grad.clone());
                }
            }
            match &self.nodes[i].op {
                Op::Constant => {}
                Op::Param(pid) => out.add_at(*pid, &grad),
                Op::Add(a, b) => {
                    acc(&mut node_grads, *a, grad.clone());
                    acc(&mut node_grads, *b, grad);
                }
                Op::AddRow(a, row) => {
                    let row_grad = grad.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut node_grads, *a, grad);
                    acc(&mut node_grads, *row, row_grad);
                }
                Op::Sub(a, b) => {
                    acc(&mut node_grads, *a, grad.clone());
                    acc(&mut node_grads, *b, -grad);
                }
                Op::Mul(a, b) => {
                    let ga = &grad * self.value(*b);
                    let gb = &grad * self.value(*a);
                    acc(&mut node_grads, *a, ga);
                    acc(&mut node_grads, *b, gb);
                }
                Op::Scale(a, f) => acc(&mut node_grads, *a, grad * *f),
                Op::MatMul(a, b) => {
                    let ga = grad.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&grad);
                    acc(&mut node_grads, *a, ga);
                    acc(&mut node_grads, *b, gb);
                }
                Op::MatMulTb(a, b) => {
                    let ga = grad.dot(self.value(*b));
                    let gb = grad.t().dot(self.value(*a));
                    acc(&mut node_grads, *a, ga);
                    acc(&mut node_grads, *b, gb);
                }
                Op::Relu(a) => {
                    let gate = self.value(*a).mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    acc(&mut node_grads, *a, grad * gate);
                }
                Op::SoftmaxRows(a) => {
                    let y = self.value(i_node(i));
                    let mut gx = &grad * y;
                    for (mut grow, yrow) in
                        gx.axis_iter_mut(Axis(0)).zip(y.axis_iter(Axis(0)))
                    {
                        let dot: f64 = grow.sum();
                        for (g, &yv) in grow.iter_mut().zip(yrow.iter()) {
                            *g -= dot * yv;
                        }
                    }
                    acc(&mut node_grads, *a, gx);
                }
                Op::LogSumExpRows(a, mask) => {
                    let x = self.value(*a);
                    let lse = self.value(i_node(i));
                    let mut gx = Matrix::zeros(x.dim());
                    for r in 0..x.nrows() {
                        let g = grad[(r, 0)];
                        for c in 0..x.ncols() {
                            if mask[(r, c)] {
                                gx[(r, c)] = g * (x[(r, c)] - lse[(r, 0)]).exp();
                            }
                        }
                    }
                    acc(&mut node_grads, *a, gx);
                }
                Op::LayerNormRows { x, gamma, beta } => {
                    let xv = self.value(*x);
                    let g = self.value(*gamma);
                    let d = xv.ncols() as f64;
                    let mut gx = Matrix::zeros(xv.dim());
                    let mut ggamma = Matrix::zeros((1, xv.ncols()));
                    let mut gbeta = Matrix::zeros((1, xv.ncols()));
                    for r in 0..xv.nrows() {
                        let row = xv.row(r);
                        let mu = row.sum() / d;
                        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d;
                        let s = (var + LN_EPS).sqrt();
                        // dy/dxhat = gamma; standard layernorm backward per row.
                        let mut sum_gy = 0.0;
                        let mut sum_gy_xhat = 0.0;
                        for c in 0..xv.ncols() {
                            let xhat = (row[c] - mu) / s;
                            let gy = grad[(r, c)] * g[(0, c)];
                            sum_gy += gy;
                            sum_gy_xhat += gy * xhat;
                            ggamma[(0, c)] += grad[(r, c)] * xhat;
                            gbeta[(0, c)] += grad[(r, c)];
                        }
                        for c in 0..xv.ncols() {
                            let xhat = (row[c] - mu) / s;
                            let gy = grad[(r, c)] * g[(0, c)];
                            gx[(r, c)] = (gy - sum_gy / d - xhat * sum_gy_xhat / d) / s;
                        }
                    }
                    acc(&mut node_grads, *x, gx);
                    acc(&mut node_grads, *gamma, ggamma);
                    acc(&mut node_grads, *beta, gbeta);
                }
                Op::L2NormalizeRows(a) => {
                    let xv = self.value(*a);
                    let y = self.value(i_node(i));
                    let mut gx = Matrix::zeros(xv.dim());
                    for r in 0..xv.nrows() {
                        let norm = xv
                            .row(r)
                            .iter()
                            .map(|v| v * v)
                            .sum::<f64>()
                            .sqrt()
                            .max(NORM_EPS);
                        let dot: f64 = grad
                            .row(r)
                            .iter()
                            .zip(y.row(r).iter())
                            .map(|(a, b)| a * b)
                            .sum();
                        for c in 0..xv.ncols() {
                            gx[(r, c)] = (grad[(r, c)] - y[(r, c)] * dot) / norm;
                        }
                    }
                    acc(&mut node_grads, *a, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        let slice = grad.slice(ndarray::s![.., offset..offset + w]).to_owned();
                        acc(&mut node_grads, p, slice);
                        offset += w;
                    }
                }
                Op::SliceCols { x, start, end } => {
                    let xv = self.value(*x);
                    let mut gx = Matrix::zeros(xv.dim());
                    gx.slice_mut(ndarray::s![.., *start..*end]).assign(&grad);
                    acc(&mut node_grads, *x, gx);
                }
                Op::GatherRows(x, idx) => {
                    let xv = self.value(*x);
                    let mut gx = Matrix::zeros(xv.dim());
                    for (r, &src) in idx.iter().enumerate() {
                        let mut dst = gx.row_mut(src);
                        dst += &grad.row(r);
                    }
                    acc(&mut node_grads, *x, gx);
                }
                Op::SumAll(x) => {
                    let g = grad[(0, 0)];
                    acc(
                        &mut node_grads,
                        *x,
                        Matrix::from_elem(self.value(*x).dim(), g),
                    );
                }
                Op::MulConst(x, c) => {
                    acc(&mut node_grads, *x, grad * c.as_ref());
                }
                Op::CrossEntropyMean(logits, labels) => {
                    let x = self.value(*logits);
                    let mut gx = masked_softmax(x, None);
                    let n = labels.len() as f64;
                    for (r, &label) in labels.iter().enumerate() {
                        gx[(r, label)] -= 1.0;
                    }
                    gx *= grad[(0, 0)] / n;
                    acc(&mut node_grads, *logits, gx);
                }
            }
        }
        let collected = collected
            .into_iter()
            .zip(wrt.iter())
            .map(|(g, &node)| g.unwrap_or_else(|| Matrix::zeros(self.value(node).dim())))
            .collect();
        (out, collected)
    }
}

fn i_node(i: usize) -> NodeId {
    NodeId(i)
}

fn acc(grads: &mut [Option<Matrix>], id: NodeId, delta: Matrix) {
    match &mut grads[id.0] {
        Some(g) => *g += &delta,
        slot => *slot = Some(delta),
    }
}

/// Row-wise masked softmax on plain values (no tape).
pub fn softmax_matrix(x: &Matrix, mask: Option<&Mask>) -> Matrix {
    masked_softmax(x, mask)
}

fn masked_softmax(x: &Matrix, mask: Option<&Mask>) -> Matrix {
    let mut out = Matrix::zeros(x.dim());
    for i in 0..x.nrows() {
        let mut max = f64::NEG_INFINITY;
        let mut allowed_count = 0usize;
        let mut finite = true;
        for j in 0..x.ncols() {
            let allowed = mask.map_or(true, |m| m[(i, j)]);
            if allowed {
                allowed_count += 1;
                let v = x[(i, j)];
                if !v.is_finite() {
                    finite = false;
                } else if v > max {
                    max = v;
                }
            }
        }
        assert!(allowed_count > 0, "softmax row {i} has no allowed entry");
        // Non-finite logits (a diverged model) propagate as NaN so the
        // loss-level checks can reject the step instead of panicking here.
        if !finite || max == f64::NEG_INFINITY {
            for j in 0..x.ncols() {
                if mask.map_or(true, |m| m[(i, j)]) {
                    out[(i, j)] = f64::NAN;
                }
            }
            continue;
        }
        let mut sum = 0.0;
        for j in 0..x.ncols() {
            let allowed = mask.map_or(true, |m| m[(i, j)]);
            if allowed {
                let e = (x[(i, j)] - max).exp();
                out[(i, j)] = e;
                sum += e;
            }
        }
        for j in 0..x.ncols() {
            out[(i, j)] /= sum;
        }
    }
    out
}

/// Xavier/Glorot-uniform init for a rows x cols weight matrix.
pub fn xavier_init<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

/// Standard-normal matrix scaled by `std`.
pub fn gaussian_init<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Matrix {
    let dist = StandardNormal;
    Matrix::from_shape_fn((rows, cols), |_| {
        let z: f64 = dist.sample(rng);
        z * std
    })
}

pub fn zeros(rows: usize, cols: usize) -> Matrix {
    Matrix::zeros((rows, cols))
}

pub fn ones(rows: usize, cols: usize) -> Matrix {
    Matrix::from_elem((rows, cols), 1.0)
}

/// Central finite difference of `f` w.r.t. one parameter entry.
pub fn finite_diff<F>(store: &mut ParamStore, id: ParamId, r: usize, c: usize, h: f64, f: F) -> f64
where
    F: Fn(&ParamStore) -> f64,
{
    let orig = store.value(id)[(r, c)];
    store.value_mut(id)[(r, c)] = orig + h;
    let plus = f(store);
    store.value_mut(id)[(r, c)] = orig - h;
    let minus = f(store);
    store.value_mut(id)[(r, c)] = orig;
    (plus - minus) / (2.0 * h)
}

/// Relative error between an analytic and a finite-difference gradient.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-5);
    (analytic - numeric).abs() / denom
}
