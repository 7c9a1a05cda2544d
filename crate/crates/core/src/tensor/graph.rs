//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Nodes are appended in construction order, so the tape is topologically
//! sorted by construction. [`Graph::backward`] walks it once in reverse,
//! which fixes the gradient accumulation order and makes repeated passes
//! bit-identical.

use super::Tensor;
use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, T),
    Shift(NodeId),
    SoftmaxRows(NodeId),
    Softplus(NodeId),
    MeanRows(NodeId),
    L2NormalizeRows(NodeId, Vec<T>),
    LayerNormRows(NodeId, Vec<T>),
    ConcatCols(Vec<NodeId>),
    StackRows(Vec<NodeId>),
    SqDist(NodeId, NodeId),
    CrossEntropy(NodeId, Vec<usize>, Vec<T>),
    Sum(NodeId),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// The computation tape.
#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by one backward pass, indexed by [`NodeId`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `id`, zero when unreachable.
    pub fn get(&self, id: NodeId) -> Tensor<T> {
        let shape = self.shapes[id.0].clone();
        match &self.grads[id.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn wrt(&self, ids: &[NodeId]) -> Vec<Tensor<T>> {
        ids.iter().map(|id| self.get(*id)).collect()
    }
}

fn mm<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o = *o + av * *bv;
            }
        }
    }
    out
}

// a: m×k, b: n×k  ->  a·bᵀ : m×n
fn mm_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow
                .iter()
                .zip(brow)
                .fold(T::zero(), |acc, (x, y)| acc + *x * *y);
        }
    }
    out
}

// a: k×m, b: k×n  ->  aᵀ·b : m×n
fn mm_tn<T: Scalar>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, av) in arow.iter().enumerate() {
            if *av == T::zero() {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o = *o + *av * *bv;
            }
        }
    }
    out
}

fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Row-wise softmax with per-row max subtraction.
pub(crate) fn softmax_row<T: Scalar>(row: &[T], out: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (o, v) in out.iter_mut().zip(row) {
        *o = (*v - max).exp();
        total = total + *o;
    }
    for o in out.iter_mut() {
        *o = *o / total;
    }
}

/// `logsumexp(row) - row[target]`, evaluated stably.
pub(crate) fn nll_row<T: Scalar>(row: &[T], target: usize) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let total: T = row.iter().map(|v| (*v - max).exp()).sum();
    max + total.ln() - row[target]
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, op_name: &'static str) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op_name));
        }
        let requires_grad = match &op {
            Op::Leaf => value.requires_grad(),
            _ => self.parents(&op).iter().any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn parents(&self, op: &Op<T>) -> Vec<NodeId> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::SqDist(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Shift(a)
            | Op::SoftmaxRows(a)
            | Op::Softplus(a)
            | Op::MeanRows(a)
            | Op::L2NormalizeRows(a, _)
            | Op::LayerNormRows(a, _)
            | Op::CrossEntropy(a, _, _)
            | Op::Sum(a) => vec![*a],
            Op::ConcatCols(xs) | Op::StackRows(xs) => xs.clone(),
        }
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.try_leaf(value.with_requires_grad(false))
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.try_leaf(value.with_requires_grad(true))
    }

    fn try_leaf(&mut self, value: Tensor<T>) -> NodeId {
        let requires_grad = value.requires_grad();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn dims(&self, id: NodeId) -> Result<(usize, usize)> {
        self.nodes[id.0].value.matrix_dims()
    }

    /// Matrix product. A rank-1 left operand yields a rank-1 result.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.dims(a)?;
        let (k2, n) = self.dims(b)?;
        if k != k2 {
            return Err(dim_err("matmul", format!("{m}x{k} · {k2}x{n}")));
        }
        let data = mm(self.value(a).data(), self.value(b).data(), m, k, n);
        let shape = if self.value(a).rank() <= 1 { vec![n] } else { vec![m, n] };
        self.push(Tensor::new(shape, data)?, Op::MatMul(a, b), "matmul")
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims(a)?;
        let src = self.value(a).data();
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        self.push(Tensor::new(vec![c, r], data)?, Op::Transpose(a), "transpose")
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(dim_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_with(
        &mut self,
        a: NodeId,
        b: NodeId,
        op: Op<T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<NodeId> {
        self.same_shape(name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push(value, op, name)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    /// Adds the vector `row` to every row of `x`.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let (_, c) = self.dims(x)?;
        let n = self.value(row).numel();
        if n != c {
            return Err(dim_err("add_row", format!("{c} columns, bias of {n}")));
        }
        let b = self.value(row).data().to_vec();
        let vx = self.value(x);
        let data = vx
            .data()
            .chunks(c.max(1))
            .flat_map(|r| r.iter().zip(&b).map(|(x, y)| *x + *y).collect::<Vec<_>>())
            .collect();
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        self.push(value, Op::AddRow(x, row), "add_row")
    }

    pub fn scale(&mut self, a: NodeId, factor: T) -> Result<NodeId> {
        let va = self.value(a);
        let data = va.data().iter().map(|v| *v * factor).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push(value, Op::Scale(a, factor), "scale")
    }

    /// Adds a constant to every element.
    pub fn shift(&mut self, a: NodeId, offset: T) -> Result<NodeId> {
        let va = self.value(a);
        let data = va.data().iter().map(|v| *v + offset).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push(value, Op::Shift(a), "shift")
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims(x)?;
        let vx = self.value(x);
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            softmax_row(&vx.data()[i * c..(i + 1) * c], &mut data[i * c..(i + 1) * c]);
        }
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        self.push(value, Op::SoftmaxRows(x), "softmax_rows")
    }

    /// `ln(1 + e^x)` elementwise.
    pub fn softplus(&mut self, x: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        let data = vx.data().iter().map(|v| softplus(*v)).collect();
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        self.push(value, Op::Softplus(x), "softplus")
    }

    /// Mean over the sequence (row) axis: `L × D -> D`.
    pub fn mean_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims(x)?;
        if r == 0 {
            return Err(Error::EmptySequence("mean_pool"));
        }
        let vx = self.value(x);
        let inv = T::one() / T::from_usize_lossy(r);
        let mut data = vec![T::zero(); c];
        for row in vx.data().chunks(c.max(1)) {
            for (o, v) in data.iter_mut().zip(row) {
                *o = *o + *v;
            }
        }
        for o in data.iter_mut() {
            *o = *o * inv;
        }
        self.push(Tensor::vector(data), Op::MeanRows(x), "mean_pool")
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims(x)?;
        let vx = self.value(x);
        let mut norms = Vec::with_capacity(r);
        let mut data = Vec::with_capacity(r * c);
        for row in vx.data().chunks(c.max(1)) {
            let norm = row.iter().map(|v| *v * *v).sum::<T>().sqrt();
            if norm <= T::zero() {
                return Err(Error::Degenerate {
                    op: "l2_normalize",
                    detail: "zero vector".into(),
                });
            }
            data.extend(row.iter().map(|v| *v / norm));
            norms.push(norm);
        }
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        self.push(value, Op::L2NormalizeRows(x, norms), "l2_normalize")
    }

    /// Parameter-free layer normalization of each row.
    pub fn layer_norm_rows(&mut self, x: NodeId, eps: T) -> Result<NodeId> {
        let (r, c) = self.dims(x)?;
        let vx = self.value(x);
        let n = T::from_usize_lossy(c);
        let mut inv_std = Vec::with_capacity(r);
        let mut data = Vec::with_capacity(r * c);
        for row in vx.data().chunks(c.max(1)) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            data.extend(row.iter().map(|v| (*v - mean) * inv));
            inv_std.push(inv);
        }
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        self.push(value, Op::LayerNormRows(x, inv_std), "layer_norm_rows")
    }

    /// Concatenates matrices with equal row counts along the feature axis.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts.first().ok_or(Error::EmptySequence("concat_cols"))?;
        let (r, _) = self.dims(first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pr, pc) = self.dims(*p)?;
            if pr != r {
                return Err(dim_err("concat_cols", format!("{pr} rows vs {r}")));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (p, w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(*p).data()[i * w..(i + 1) * w]);
            }
        }
        let shape = if self.value(first).rank() <= 1 { vec![total] } else { vec![r, total] };
        self.push(Tensor::new(shape, data)?, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    /// Stacks equally sized vectors into an `N × D` matrix.
    pub fn stack_rows(&mut self, rows: &[NodeId]) -> Result<NodeId> {
        let first = *rows.first().ok_or(Error::EmptyBatch("stack_rows"))?;
        let d = self.value(first).numel();
        let mut data = Vec::with_capacity(rows.len() * d);
        for r in rows {
            let v = self.value(*r);
            if v.numel() != d {
                return Err(dim_err("stack_rows", format!("{} vs {d}", v.numel())));
            }
            data.extend_from_slice(v.data());
        }
        let value = Tensor::new(vec![rows.len(), d], data)?;
        self.push(value, Op::StackRows(rows.to_vec()), "stack_rows")
    }

    /// Pairwise squared Euclidean distances between the rows of `a`
    /// (`N × D`) and the rows of `b` (`M × D`).
    pub fn sq_dist(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, d) = self.dims(a)?;
        let (m, d2) = self.dims(b)?;
        if d != d2 {
            return Err(dim_err("sq_dist", format!("{d} vs {d2}")));
        }
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(n * m);
        for i in 0..n {
            let ra = &va[i * d..(i + 1) * d];
            for j in 0..m {
                let rb = &vb[j * d..(j + 1) * d];
                data.push(ra.iter().zip(rb).map(|(x, y)| (*x - *y) * (*x - *y)).sum());
            }
        }
        self.push(Tensor::new(vec![n, m], data)?, Op::SqDist(a, b), "sq_dist")
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`. Produces a scalar.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let (r, c) = self.dims(logits)?;
        if r == 0 {
            return Err(Error::EmptyBatch("cross_entropy"));
        }
        if targets.len() != r {
            return Err(dim_err("cross_entropy", format!("{r} rows, {} targets", targets.len())));
        }
        if let Some(t) = targets.iter().find(|t| **t >= c) {
            return Err(dim_err("cross_entropy", format!("target {t} with {c} classes")));
        }
        let vx = self.value(logits).data();
        let mut probs = vec![T::zero(); r * c];
        let mut total = T::zero();
        for (i, t) in targets.iter().enumerate() {
            let row = &vx[i * c..(i + 1) * c];
            softmax_row(row, &mut probs[i * c..(i + 1) * c]);
            total = total + nll_row(row, *t);
        }
        let value = Tensor::scalar(total / T::from_usize_lossy(r));
        self.push(value, Op::CrossEntropy(logits, targets.to_vec(), probs), "cross_entropy")
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let total = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum(x), "sum")
    }

    /// Dense layer `x·W + b`.
    pub fn linear(&mut self, x: NodeId, weight: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let y = self.matmul(x, weight)?;
        match bias {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Reverse pass from a one-element `loss` node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let loss_value = self.value(loss);
        if loss_value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads)?;
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let mut acc = |id: NodeId, contribution: Vec<T>| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contribution) {
                        *e = *e + c;
                    }
                }
                slot @ None => *slot = Some(contribution),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a)?;
                let (_, n) = self.dims(*b)?;
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, mm_nt(g, vb, m, n, k));
                acc(*b, mm_tn(va, g, m, k, n));
            }
            Op::Transpose(a) => {
                let (r, c) = self.dims(*a)?;
                let mut out = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        out[i * c + j] = g[j * r + i];
                    }
                }
                acc(*a, out);
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|v| -*v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, g.iter().zip(vb).map(|(x, y)| *x * *y).collect());
                acc(*b, g.iter().zip(va).map(|(x, y)| *x * *y).collect());
            }
            Op::AddRow(x, row) => {
                let c = self.value(*row).numel();
                let mut gb = vec![T::zero(); c];
                for r in g.chunks(c.max(1)) {
                    for (o, v) in gb.iter_mut().zip(r) {
                        *o = *o + *v;
                    }
                }
                acc(*x, g.to_vec());
                acc(*row, gb);
            }
            Op::Scale(a, f) => acc(*a, g.iter().map(|v| *v * *f).collect()),
            Op::Shift(a) => acc(*a, g.to_vec()),
            Op::SoftmaxRows(x) => {
                let (_, c) = self.dims(*x)?;
                let y = node.value.data();
                let mut out = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(c.max(1)).zip(g.chunks(c.max(1))) {
                    let dot: T = yr.iter().zip(gr).map(|(a, b)| *a * *b).sum();
                    out.extend(yr.iter().zip(gr).map(|(yv, gv)| *yv * (*gv - dot)));
                }
                acc(*x, out);
            }
            Op::Softplus(x) => {
                let vx = self.value(*x).data();
                acc(*x, g.iter().zip(vx).map(|(gv, xv)| *gv * sigmoid(*xv)).collect());
            }
            Op::MeanRows(x) => {
                let (r, c) = self.dims(*x)?;
                let inv = T::one() / T::from_usize_lossy(r);
                let mut out = Vec::with_capacity(r * c);
                for _ in 0..r {
                    out.extend(g.iter().map(|v| *v * inv));
                }
                acc(*x, out);
            }
            Op::L2NormalizeRows(x, norms) => {
                let (_, c) = self.dims(*x)?;
                let y = node.value.data();
                let mut out = Vec::with_capacity(y.len());
                for ((yr, gr), norm) in y.chunks(c.max(1)).zip(g.chunks(c.max(1))).zip(norms) {
                    let dot: T = yr.iter().zip(gr).map(|(a, b)| *a * *b).sum();
                    out.extend(yr.iter().zip(gr).map(|(yv, gv)| (*gv - *yv * dot) / *norm));
                }
                acc(*x, out);
            }
            Op::LayerNormRows(x, inv_std) => {
                let (_, c) = self.dims(*x)?;
                let n = T::from_usize_lossy(c);
                let y = node.value.data();
                let mut out = Vec::with_capacity(y.len());
                for ((yr, gr), inv) in y.chunks(c.max(1)).zip(g.chunks(c.max(1))).zip(inv_std) {
                    let mean_g = gr.iter().copied().sum::<T>() / n;
                    let mean_gy = yr.iter().zip(gr).map(|(a, b)| *a * *b).sum::<T>() / n;
                    out.extend(
                        yr.iter()
                            .zip(gr)
                            .map(|(yv, gv)| *inv * (*gv - mean_g - *yv * mean_gy)),
                    );
                }
                acc(*x, out);
            }
            Op::ConcatCols(parts) => {
                let (r, total) = node.value.matrix_dims()?;
                let mut offset = 0;
                for p in parts {
                    let (_, w) = self.dims(*p)?;
                    let mut out = Vec::with_capacity(r * w);
                    for i in 0..r {
                        out.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                    }
                    acc(*p, out);
                    offset += w;
                }
            }
            Op::StackRows(rows) => {
                let d = node.value.matrix_dims()?.1;
                for (i, r) in rows.iter().enumerate() {
                    acc(*r, g[i * d..(i + 1) * d].to_vec());
                }
            }
            Op::SqDist(a, b) => {
                let (n, d) = self.dims(*a)?;
                let (m, _) = self.dims(*b)?;
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let two = T::lit(2.0);
                let mut ga = vec![T::zero(); n * d];
                let mut gb = vec![T::zero(); m * d];
                for i in 0..n {
                    for j in 0..m {
                        let w = two * g[i * m + j];
                        if w == T::zero() {
                            continue;
                        }
                        for k in 0..d {
                            let diff = w * (va[i * d + k] - vb[j * d + k]);
                            ga[i * d + k] = ga[i * d + k] + diff;
                            gb[j * d + k] = gb[j * d + k] - diff;
                        }
                    }
                }
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::CrossEntropy(x, targets, probs) => {
                let (r, c) = self.dims(*x)?;
                let scale = g[0] / T::from_usize_lossy(r);
                let mut out: Vec<T> = probs.iter().map(|p| *p * scale).collect();
                for (i, t) in targets.iter().enumerate() {
                    out[i * c + t] = out[i * c + t] - scale;
                }
                acc(*x, out);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                acc(*x, vec![g[0]; n]);
            }
        }
        Ok(())
    }
}

/// Per-row `-log softmax(logits)[target]` without building a graph.
pub fn cross_entropy_terms<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> Result<Vec<T>> {
    let (r, c) = logits.matrix_dims()?;
    if targets.len() != r {
        return Err(dim_err("cross_entropy_terms", "target count"));
    }
    Ok(targets
        .iter()
        .enumerate()
        .map(|(i, t)| nll_row(&logits.data()[i * c..(i + 1) * c], *t))
        .collect())
}
