//! Reverse-mode differentiation over a dynamically recorded tape.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Calling
//! [`Tape::backward`] walks the tape in reverse, accumulating gradients into
//! every node that (transitively) depends on a differentiable leaf. Reduction
//! order is fixed by node order, so gradients are bit-reproducible.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use super::params::ParameterSet;
use super::tensor::{log_sum_exp, softmax_in_place, Tensor};
use crate::error::{Error, Result};

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulCol(usize, usize),
    Scale(usize, f64),
    Sigmoid(usize),
    Tanh(usize),
    LeakyRelu(usize, f64),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    Gather(usize, Vec<usize>),
    MeanRows(usize),
    Sum(usize),
    Softmax(usize),
    MaskedFill(usize, Arc<Vec<bool>>),
    CrossEntropy(usize, Vec<usize>, Tensor),
    LayerNorm(usize, Vec<f64>),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recording context for one forward/backward pass. Single-threaded.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    bound: RefCell<HashMap<usize, usize>>,
    frozen: bool,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape whose parameter bindings never require gradients.
    pub fn inference() -> Self {
        Self {
            frozen: true,
            ..Self::default()
        }
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        self.push_arc(Arc::new(value), op, requires_grad)
    }

    fn push_arc(&self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn value_of(&self, id: usize) -> Arc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A non-differentiable input.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable input whose gradient can be read with [`Gradients::wrt`].
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a parameter; repeated bindings of the same index share one node.
    pub fn param(&self, params: &ParameterSet, name: &str) -> Result<Var<'_>> {
        let index = params
            .index_of(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        if let Some(&id) = self.bound.borrow().get(&index) {
            return Ok(Var { tape: self, id });
        }
        let var = self.push_arc(params.value_arc(index), Op::Param(index), !self.frozen);
        self.bound.borrow_mut().insert(index, var.id);
        Ok(var)
    }

    /// Back-propagates from a `1 x 1` output.
    pub fn backward(&self, output: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        let out_value = &nodes[output.id].value;
        grads[output.id] = Some(Tensor::filled(out_value.rows(), out_value.cols(), 1.0));

        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }

        let params = nodes
            .iter()
            .enumerate()
            .filter_map(|(id, n)| match n.op {
                Op::Param(index) => grads[id].clone().map(|g| (index, g)),
                _ => None,
            })
            .collect();
        Gradients { nodes: grads, params }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: usize, delta: Tensor) {
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}

fn backprop_node(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |i: usize| -> &Tensor { &nodes[i].value };
    let req = |i: usize| nodes[i].requires_grad;
    match &node.op {
        Op::Leaf | Op::Param(_) => {}
        Op::MatMul(a, b) => {
            if req(*a) {
                accumulate(grads, *a, g.matmul_t(val(*b)).expect("matmul grad"));
            }
            if req(*b) {
                accumulate(grads, *b, val(*a).t_matmul(g).expect("matmul grad"));
            }
        }
        Op::Transpose(a) => accumulate(grads, *a, g.transpose()),
        Op::Add(a, b) => {
            if req(*a) {
                accumulate(grads, *a, g.clone());
            }
            if req(*b) {
                accumulate(grads, *b, g.clone());
            }
        }
        Op::Sub(a, b) => {
            if req(*a) {
                accumulate(grads, *a, g.clone());
            }
            if req(*b) {
                accumulate(grads, *b, g.map(|v| -v));
            }
        }
        Op::Mul(a, b) => {
            if req(*a) {
                accumulate(grads, *a, g.zip_with(val(*b), "mul", |x, y| x * y).unwrap());
            }
            if req(*b) {
                accumulate(grads, *b, g.zip_with(val(*a), "mul", |x, y| x * y).unwrap());
            }
        }
        Op::AddRow(a, row) => {
            if req(*a) {
                accumulate(grads, *a, g.clone());
            }
            if req(*row) {
                let mut sums = Tensor::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (s, v) in sums.data_mut().iter_mut().zip(g.row(r)) {
                        *s += v;
                    }
                }
                accumulate(grads, *row, sums);
            }
        }
        Op::MulCol(a, col) => {
            let av = val(*a);
            let cv = val(*col);
            if req(*a) {
                let mut d = g.clone();
                for r in 0..d.rows() {
                    let s = cv.get(r, 0);
                    d.row_mut(r).iter_mut().for_each(|v| *v *= s);
                }
                accumulate(grads, *a, d);
            }
            if req(*col) {
                let d: Vec<f64> = (0..g.rows())
                    .map(|r| super::tensor::dot(g.row(r), av.row(r)))
                    .collect();
                accumulate(grads, *col, Tensor::column_vector(d));
            }
        }
        Op::Scale(a, s) => accumulate(grads, *a, g.map(|v| v * s)),
        Op::Sigmoid(a) => {
            let y = &node.value;
            accumulate(grads, *a, g.zip_with(y, "sigmoid", |gv, yv| gv * yv * (1.0 - yv)).unwrap());
        }
        Op::Tanh(a) => {
            let y = &node.value;
            accumulate(grads, *a, g.zip_with(y, "tanh", |gv, yv| gv * (1.0 - yv * yv)).unwrap());
        }
        Op::LeakyRelu(a, slope) => {
            let x = val(*a);
            let s = *slope;
            accumulate(
                grads,
                *a,
                g.zip_with(x, "leaky_relu", |gv, xv| if xv > 0.0 { gv } else { gv * s })
                    .unwrap(),
            );
        }
        Op::ConcatRows(parts) => {
            let mut start = 0;
            for &p in parts {
                let rows = val(p).rows();
                if req(p) {
                    let cols = g.cols();
                    let data = g.data()[start * cols..(start + rows) * cols].to_vec();
                    accumulate(grads, p, Tensor::new(rows, cols, data).unwrap());
                }
                start += rows;
            }
        }
        Op::ConcatCols(parts) => {
            let mut start = 0;
            for &p in parts {
                let cols = val(p).cols();
                if req(p) {
                    let mut d = Tensor::zeros(g.rows(), cols);
                    for r in 0..g.rows() {
                        d.row_mut(r).copy_from_slice(&g.row(r)[start..start + cols]);
                    }
                    accumulate(grads, p, d);
                }
                start += cols;
            }
        }
        Op::SliceRows(a, start) => {
            let src = val(*a);
            let mut d = Tensor::zeros(src.rows(), src.cols());
            for r in 0..g.rows() {
                d.row_mut(start + r).copy_from_slice(g.row(r));
            }
            accumulate(grads, *a, d);
        }
        Op::SliceCols(a, start) => {
            let src = val(*a);
            let mut d = Tensor::zeros(src.rows(), src.cols());
            for r in 0..g.rows() {
                d.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
            }
            accumulate(grads, *a, d);
        }
        Op::Gather(table, indices) => {
            let src = val(*table);
            let mut d = Tensor::zeros(src.rows(), src.cols());
            for (r, &i) in indices.iter().enumerate() {
                for (dv, gv) in d.row_mut(i).iter_mut().zip(g.row(r)) {
                    *dv += gv;
                }
            }
            accumulate(grads, *table, d);
        }
        Op::MeanRows(a) => {
            let src = val(*a);
            let inv = 1.0 / src.rows() as f64;
            let mut d = Tensor::zeros(src.rows(), src.cols());
            for r in 0..src.rows() {
                for (dv, gv) in d.row_mut(r).iter_mut().zip(g.row(0)) {
                    *dv = gv * inv;
                }
            }
            accumulate(grads, *a, d);
        }
        Op::Sum(a) => {
            let src = val(*a);
            accumulate(grads, *a, Tensor::filled(src.rows(), src.cols(), g.item()));
        }
        Op::Softmax(a) => {
            let y = &node.value;
            let mut d = Tensor::zeros(y.rows(), y.cols());
            for r in 0..y.rows() {
                let yr = y.row(r);
                let gr = g.row(r);
                let inner = super::tensor::dot(yr, gr);
                for ((dv, &yv), &gv) in d.row_mut(r).iter_mut().zip(yr).zip(gr) {
                    *dv = yv * (gv - inner);
                }
            }
            accumulate(grads, *a, d);
        }
        Op::MaskedFill(a, mask) => {
            let mut d = g.clone();
            for (v, &m) in d.data_mut().iter_mut().zip(mask.iter()) {
                if m {
                    *v = 0.0;
                }
            }
            accumulate(grads, *a, d);
        }
        Op::CrossEntropy(a, targets, probs) => {
            let scale = g.item();
            let mut d = probs.clone();
            for (r, &t) in targets.iter().enumerate() {
                let row = d.row_mut(r);
                row[t] -= 1.0;
                row.iter_mut().for_each(|v| *v *= scale);
            }
            accumulate(grads, *a, d);
        }
        Op::LayerNorm(a, inv_std) => {
            let y = &node.value;
            let n = y.cols() as f64;
            let mut d = Tensor::zeros(y.rows(), y.cols());
            for (r, &inv) in inv_std.iter().enumerate() {
                let yr = y.row(r);
                let gr = g.row(r);
                let mean_g = gr.iter().sum::<f64>() / n;
                let mean_gy = super::tensor::dot(gr, yr) / n;
                for ((dv, &yv), &gv) in d.row_mut(r).iter_mut().zip(yr).zip(gr) {
                    *dv = inv * (gv - mean_g - yv * mean_gy);
                }
            }
            accumulate(grads, *a, d);
        }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: Vec<(usize, Tensor)>,
}

impl Gradients {
    /// Gradient with respect to a recorded value, if it was reached.
    pub fn wrt(&self, var: Var<'_>) -> Option<&Tensor> {
        self.nodes[var.id].as_ref()
    }

    /// `(parameter index, gradient)` pairs in binding order.
    pub fn params(&self) -> &[(usize, Tensor)] {
        &self.params
    }

    pub fn into_params(self) -> Vec<(usize, Tensor)> {
        self.params
    }
}

// Fallible shape-checked arithmetic, so the std operator traits do not fit.
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> [usize; 2] {
        self.tape.nodes.borrow()[self.id].value.shape()
    }

    pub fn rows(&self) -> usize {
        self.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.shape()[1]
    }

    /// Scalar value of a `1 x 1` result.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn unary(self, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.tape.needs(&[self.id]);
        self.tape.push(value, op, rg)
    }

    fn binary(self, other: Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.tape.needs(&[self.id, other.id]);
        self.tape.push(value, op, rg)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.value().matmul(&other.value())?;
        Ok(self.binary(other, v, Op::MatMul(self.id, other.id)))
    }

    pub fn transpose(self) -> Var<'t> {
        let v = self.value().transpose();
        self.unary(v, Op::Transpose(self.id))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.value().zip_with(&other.value(), "add", |a, b| a + b)?;
        Ok(self.binary(other, v, Op::Add(self.id, other.id)))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.value().zip_with(&other.value(), "sub", |a, b| a - b)?;
        Ok(self.binary(other, v, Op::Sub(self.id, other.id)))
    }

    /// Elementwise product.
    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.value().zip_with(&other.value(), "mul", |a, b| a * b)?;
        Ok(self.binary(other, v, Op::Mul(self.id, other.id)))
    }

    /// Adds a `1 x n` row to every row.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let b = row.value();
        if b.rows() != 1 || b.cols() != a.cols() {
            return Err(Error::Shape {
                op: "add_row",
                left: a.shape(),
                right: b.shape(),
            });
        }
        let mut v = (*a).clone();
        for r in 0..v.rows() {
            for (x, y) in v.row_mut(r).iter_mut().zip(b.row(0)) {
                *x += y;
            }
        }
        Ok(self.binary(row, v, Op::AddRow(self.id, row.id)))
    }

    /// Scales row `i` by `col[i]` for an `m x 1` column.
    pub fn mul_col(self, col: Var<'t>) -> Result<Var<'t>> {
        let a = self.value();
        let c = col.value();
        if c.cols() != 1 || c.rows() != a.rows() {
            return Err(Error::Shape {
                op: "mul_col",
                left: a.shape(),
                right: c.shape(),
            });
        }
        let mut v = (*a).clone();
        for r in 0..v.rows() {
            let s = c.get(r, 0);
            v.row_mut(r).iter_mut().for_each(|x| *x *= s);
        }
        Ok(self.binary(col, v, Op::MulCol(self.id, col.id)))
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let v = self.value().map(|x| x * s);
        self.unary(v, Op::Scale(self.id, s))
    }

    pub fn sigmoid(self) -> Var<'t> {
        let v = self.value().map(|x| 1.0 / (1.0 + (-x).exp()));
        self.unary(v, Op::Sigmoid(self.id))
    }

    pub fn tanh(self) -> Var<'t> {
        let v = self.value().map(f64::tanh);
        self.unary(v, Op::Tanh(self.id))
    }

    /// Leaky rectifier; `slope = 0` gives a plain rectifier and `slope = 1` the identity.
    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        let v = self.value().map(|x| if x > 0.0 { x } else { slope * x });
        self.unary(v, Op::LeakyRelu(self.id, slope))
    }

    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or(Error::Empty("concat_rows"))?;
        let tape = first.tape;
        let cols = first.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = p.value();
            if v.cols() != cols {
                return Err(Error::Shape {
                    op: "concat_rows",
                    left: first.shape(),
                    right: v.shape(),
                });
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = tape.needs(&ids);
        Ok(tape.push(Tensor::new(rows, cols, data)?, Op::ConcatRows(ids), rg))
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts.first().ok_or(Error::Empty("concat_cols"))?;
        let tape = first.tape;
        let rows = first.rows();
        let values: Vec<Arc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        for v in &values {
            if v.rows() != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    left: first.shape(),
                    right: v.shape(),
                });
            }
        }
        let cols: usize = values.iter().map(|v| v.cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for v in &values {
                data.extend_from_slice(v.row(r));
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let rg = tape.needs(&ids);
        Ok(tape.push(Tensor::new(rows, cols, data)?, Op::ConcatCols(ids), rg))
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Result<Var<'t>> {
        let a = self.value();
        if start + len > a.rows() {
            return Err(Error::Index {
                op: "slice_rows",
                index: start + len,
                len: a.rows(),
            });
        }
        let cols = a.cols();
        let v = Tensor::new(len, cols, a.data()[start * cols..(start + len) * cols].to_vec())?;
        Ok(self.unary(v, Op::SliceRows(self.id, start)))
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'t>> {
        let a = self.value();
        if start + len > a.cols() {
            return Err(Error::Index {
                op: "slice_cols",
                index: start + len,
                len: a.cols(),
            });
        }
        let mut data = Vec::with_capacity(a.rows() * len);
        for r in 0..a.rows() {
            data.extend_from_slice(&a.row(r)[start..start + len]);
        }
        let v = Tensor::new(a.rows(), len, data)?;
        Ok(self.unary(v, Op::SliceCols(self.id, start)))
    }

    pub fn row(self, r: usize) -> Result<Var<'t>> {
        self.slice_rows(r, 1)
    }

    /// Embedding lookup: row `indices[i]` of `self` becomes output row `i`.
    pub fn gather(self, indices: &[usize]) -> Result<Var<'t>> {
        let table = self.value();
        let mut data = Vec::with_capacity(indices.len() * table.cols());
        for &i in indices {
            if i >= table.rows() {
                return Err(Error::Index {
                    op: "gather",
                    index: i,
                    len: table.rows(),
                });
            }
            data.extend_from_slice(table.row(i));
        }
        let v = Tensor::new(indices.len(), table.cols(), data)?;
        Ok(self.unary(v, Op::Gather(self.id, indices.to_vec())))
    }

    /// Mean over rows, producing `1 x cols`.
    pub fn mean_rows(self) -> Result<Var<'t>> {
        let a = self.value();
        if a.rows() == 0 {
            return Err(Error::Empty("mean_rows"));
        }
        let mut out = vec![0.0; a.cols()];
        for r in 0..a.rows() {
            for (o, x) in out.iter_mut().zip(a.row(r)) {
                *o += x;
            }
        }
        let inv = 1.0 / a.rows() as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        Ok(self.unary(Tensor::row_vector(out), Op::MeanRows(self.id)))
    }

    pub fn sum(self) -> Var<'t> {
        let v = Tensor::scalar(self.value().sum());
        self.unary(v, Op::Sum(self.id))
    }

    /// Row-wise softmax.
    pub fn softmax(self) -> Var<'t> {
        let v = self.value().softmax_rows();
        self.unary(v, Op::Softmax(self.id))
    }

    /// Replaces entries where `mask` is true with `fill`; no gradient flows there.
    pub fn masked_fill(self, mask: Arc<Vec<bool>>, fill: f64) -> Result<Var<'t>> {
        let a = self.value();
        if mask.len() != a.len() {
            return Err(Error::Shape {
                op: "masked_fill",
                left: a.shape(),
                right: [mask.len(), 1],
            });
        }
        let mut v = (*a).clone();
        for (x, &m) in v.data_mut().iter_mut().zip(mask.iter()) {
            if m {
                *x = fill;
            }
        }
        Ok(self.unary(v, Op::MaskedFill(self.id, mask)))
    }

    /// Summed negative log-likelihood of `targets[r]` under `softmax(self[r])`.
    pub fn cross_entropy(self, targets: &[usize]) -> Result<Var<'t>> {
        let logits = self.value();
        if targets.len() != logits.rows() {
            return Err(Error::Shape {
                op: "cross_entropy",
                left: logits.shape(),
                right: [targets.len(), 1],
            });
        }
        let mut total = 0.0;
        let mut probs = (*logits).clone();
        for (r, &t) in targets.iter().enumerate() {
            if t >= logits.cols() {
                return Err(Error::Index {
                    op: "cross_entropy",
                    index: t,
                    len: logits.cols(),
                });
            }
            let row = logits.row(r);
            total += log_sum_exp(row) - row[t];
            softmax_in_place(probs.row_mut(r));
        }
        Ok(self.unary(
            Tensor::scalar(total),
            Op::CrossEntropy(self.id, targets.to_vec(), probs),
        ))
    }

    /// Per-row standardization `(x - mean) / sqrt(var + eps)`, without affine terms.
    pub fn layer_norm(self, eps: f64) -> Var<'t> {
        let a = self.value();
        let n = a.cols() as f64;
        let mut out = (*a).clone();
        let mut inv_std = Vec::with_capacity(a.rows());
        for r in 0..a.rows() {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * inv);
            inv_std.push(inv);
        }
        self.unary(out, Op::LayerNorm(self.id, inv_std))
    }
}
