//! Reverse-mode differentiation over a tape of tensor operations.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order: an op can only reference nodes created before it.
//! [`Graph::backward`] walks the tape once in reverse and applies each node's
//! local gradient rule.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::ndiff::tensor::gemm;
use crate::ndiff::{ParamId, ParamStore, Tensor};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRowBias(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    ScaleRows(NodeId, NodeId),
    Concat { inputs: Vec<NodeId>, axis: usize },
    SliceCols { input: NodeId, start: usize },
    GatherRows { input: NodeId, ids: Vec<Option<usize>> },
    RowSoftmax(NodeId),
    MaskedRowSoftmax(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Log { input: NodeId, floor: f64 },
    Sum(NodeId),
    Mean(NodeId),
    RowSum(NodeId),
    SumSquares(NodeId),
    Pick { input: NodeId, cols: Vec<usize> },
    Dropout { input: NodeId, keep: Vec<f64> },
    Map { input: NodeId, deriv: fn(f64) -> f64 },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddRowBias(..) => "add_row_bias",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::ScaleRows(..) => "scale_rows",
            Op::Concat { .. } => "concat",
            Op::SliceCols { .. } => "slice_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::RowSoftmax(_) => "row_softmax",
            Op::MaskedRowSoftmax(_) => "masked_row_softmax",
            Op::Sigmoid(_) => "sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Log { .. } => "log",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::RowSum(_) => "row_sum",
            Op::SumSquares(_) => "sum_squares",
            Op::Pick { .. } => "pick",
            Op::Dropout { .. } => "dropout",
            Op::Map { .. } => "map",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf | Op::Param(_) => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRowBias(a, b) | Op::Mul(a, b) | Op::ScaleRows(a, b) => {
                vec![*a, *b]
            }
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::RowSoftmax(a)
            | Op::MaskedRowSoftmax(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::RowSum(a)
            | Op::SumSquares(a) => vec![*a],
            Op::SliceCols { input, .. }
            | Op::GatherRows { input, .. }
            | Op::Log { input, .. }
            | Op::Pick { input, .. }
            | Op::Dropout { input, .. }
            | Op::Map { input, .. } => vec![*input],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one backward pass, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, node: NodeId) -> Option<&Tensor> {
        self.grads[node.0].as_ref()
    }
}

/// The computation record: an append-only tape of nodes.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_matrix() {
        Ok(())
    } else {
        Err(Error::shape(op, format!("expected a matrix, got {:?}", t.shape())))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())))
    }
}

impl Graph {
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

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        debug_assert!(
            value.is_finite(),
            "non-finite output from {} with shape {:?}",
            op.name(),
            value.shape()
        );
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::Param(_) => true,
            other => other.inputs().iter().any(|i| self.nodes[i.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Trainable leaf holding a copy of the parameter's current value.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        self.push(store.get(id).value.clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        require_matrix("matmul", ta)?;
        require_matrix("matmul", tb)?;
        if ta.cols() != tb.rows() {
            return Err(Error::shape("matmul", format!("{:?} x {:?}", ta.shape(), tb.shape())));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, 0.0, &mut out);
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("add", ta, tb)?;
        let mut v = ta.clone();
        v.add_assign(tb);
        Ok(self.push(v, Op::Add(a, b)))
    }

    /// Sum of several same-shaped nodes.
    pub fn add_all(&mut self, items: &[NodeId]) -> Result<NodeId> {
        let (&first, rest) = items
            .split_first()
            .ok_or(Error::Empty("add_all needs at least one input"))?;
        rest.iter().try_fold(first, |acc, &x| self.add(acc, x))
    }

    /// `a [m x n] + bias [1 x n]` broadcast over rows.
    pub fn add_row_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(bias));
        require_matrix("add_row_bias", ta)?;
        if tb.shape() != [1, ta.cols()] {
            return Err(Error::shape(
                "add_row_bias",
                format!("{:?} + bias {:?}", ta.shape(), tb.shape()),
            ));
        }
        let n = ta.cols();
        let mut v = ta.clone();
        for (i, x) in v.data_mut().iter_mut().enumerate() {
            *x += tb.data()[i % n];
        }
        Ok(self.push(v, Op::AddRowBias(a, bias)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("mul", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let v = Tensor::from_vec(ta.shape().to_vec(), data)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| c * x);
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: NodeId) -> NodeId {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    /// Multiply row `i` of `a [m x n]` by `s[i]` where `s` is `[m x 1]`.
    pub fn scale_rows(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        let (ta, ts) = (self.value(a), self.value(s));
        require_matrix("scale_rows", ta)?;
        if ts.shape() != [ta.rows(), 1] {
            return Err(Error::shape(
                "scale_rows",
                format!("{:?} by {:?}", ta.shape(), ts.shape()),
            ));
        }
        let n = ta.cols();
        let mut v = ta.clone();
        for (i, x) in v.data_mut().iter_mut().enumerate() {
            *x *= ts.data()[i / n.max(1)];
        }
        Ok(self.push(v, Op::ScaleRows(a, s)))
    }

    /// Concatenate matrices along rows (`axis = 0`) or columns (`axis = 1`).
    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::Empty("concat needs at least one input"));
        }
        for &i in inputs {
            require_matrix("concat", self.value(i))?;
        }
        let first = self.value(inputs[0]);
        let value = match axis {
            0 => {
                let cols = first.cols();
                let mut data = Vec::new();
                let mut rows = 0;
                for &i in inputs {
                    let t = self.value(i);
                    if t.cols() != cols {
                        return Err(Error::shape(
                            "concat",
                            format!("row concat of {cols} and {} columns", t.cols()),
                        ));
                    }
                    rows += t.rows();
                    data.extend_from_slice(t.data());
                }
                Tensor::matrix(rows, cols, data)?
            }
            1 => {
                let rows = first.rows();
                let mut cols = 0;
                for &i in inputs {
                    let t = self.value(i);
                    if t.rows() != rows {
                        return Err(Error::shape(
                            "concat",
                            format!("column concat of {rows} and {} rows", t.rows()),
                        ));
                    }
                    cols += t.cols();
                }
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for &i in inputs {
                        data.extend_from_slice(self.value(i).row_slice(r));
                    }
                }
                Tensor::matrix(rows, cols, data)?
            }
            _ => return Err(Error::shape("concat", format!("axis {axis} unsupported"))),
        };
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let ta = self.value(a);
        require_matrix("slice_cols", ta)?;
        if start > end || end > ta.cols() {
            return Err(Error::shape(
                "slice_cols",
                format!("{start}..{end} of {:?}", ta.shape()),
            ));
        }
        let mut data = Vec::with_capacity(ta.rows() * (end - start));
        for r in 0..ta.rows() {
            data.extend_from_slice(&ta.row_slice(r)[start..end]);
        }
        let v = Tensor::matrix(ta.rows(), end - start, data)?;
        Ok(self.push(v, Op::SliceCols { input: a, start }))
    }

    /// Row lookup. `None` yields a row of zeros (padding).
    pub fn gather_rows(&mut self, a: NodeId, ids: &[Option<usize>]) -> Result<NodeId> {
        let ta = self.value(a);
        require_matrix("gather_rows", ta)?;
        let cols = ta.cols();
        let mut data = Vec::with_capacity(ids.len() * cols);
        for id in ids {
            match id {
                Some(r) if *r < ta.rows() => data.extend_from_slice(ta.row_slice(*r)),
                Some(r) => return Err(Error::shape("gather_rows", format!("row {r} of {:?}", ta.shape()))),
                None => data.extend(std::iter::repeat_n(0.0, cols)),
            }
        }
        let v = Tensor::matrix(ids.len(), cols, data)?;
        Ok(self.push(
            v,
            Op::GatherRows {
                input: a,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Row lookup with every index present.
    pub fn gather(&mut self, a: NodeId, ids: &[usize]) -> Result<NodeId> {
        let ids: Vec<Option<usize>> = ids.iter().copied().map(Some).collect();
        self.gather_rows(a, &ids)
    }

    /// Softmax along each row, with per-row max subtraction.
    pub fn row_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = self.value(a);
        require_matrix("row_softmax", ta)?;
        let cols = ta.cols();
        let mut v = ta.clone();
        for row in v.data_mut().chunks_mut(cols.max(1)) {
            softmax_in_place(row, None);
        }
        Ok(self.push(v, Op::RowSoftmax(a)))
    }

    /// Softmax along rows over the entries where `mask` is true. Masked entries
    /// are exactly zero; a row with no unmasked entry is all zeros.
    pub fn masked_row_softmax(&mut self, a: NodeId, mask: &[bool]) -> Result<NodeId> {
        let ta = self.value(a);
        require_matrix("masked_row_softmax", ta)?;
        if mask.len() != ta.len() {
            return Err(Error::shape(
                "masked_row_softmax",
                format!("mask of {} for {:?}", mask.len(), ta.shape()),
            ));
        }
        let cols = ta.cols().max(1);
        let mut v = ta.clone();
        for (row, m) in v.data_mut().chunks_mut(cols).zip(mask.chunks(cols)) {
            softmax_in_place(row, Some(m));
        }
        Ok(self.push(v, Op::MaskedRowSoftmax(a)))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log(&mut self, a: NodeId, floor: f64) -> NodeId {
        let v = self.value(a).map(|x| x.max(floor).ln());
        self.push(v, Op::Log { input: a, floor })
    }

    /// Sum of all entries, as a `1 x 1` tensor.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        Ok(self.push(v, Op::Mean(a)))
    }

    /// Per-row sums: `[m x n] -> [m x 1]`.
    pub fn row_sum(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = self.value(a);
        require_matrix("row_sum", ta)?;
        let cols = ta.cols();
        let data = (0..ta.rows())
            .map(|r| ta.data()[r * cols..(r + 1) * cols].iter().sum())
            .collect();
        Ok(self.push(Tensor::column(data), Op::RowSum(a)))
    }

    /// Sum of squared entries, as a `1 x 1` tensor.
    pub fn sum_squares(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum_squares());
        self.push(v, Op::SumSquares(a))
    }

    /// Entry `cols[i]` of each row `i`: `[m x n] -> [m x 1]`.
    pub fn pick(&mut self, a: NodeId, cols: &[usize]) -> Result<NodeId> {
        let ta = self.value(a);
        require_matrix("pick", ta)?;
        if cols.len() != ta.rows() || cols.iter().any(|&c| c >= ta.cols()) {
            return Err(Error::shape(
                "pick",
                format!("{} column picks from {:?}", cols.len(), ta.shape()),
            ));
        }
        let data = cols.iter().enumerate().map(|(r, &c)| ta.get(r, c)).collect();
        Ok(self.push(
            Tensor::column(data),
            Op::Pick {
                input: a,
                cols: cols.to_vec(),
            },
        ))
    }

    /// Inverted dropout. Identity (the same node) when not training or `p == 0`.
    pub fn dropout(&mut self, a: NodeId, p: f64, train: bool, rng: &mut RngStream) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout rate {p} outside [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(a);
        }
        let scale = 1.0 / (1.0 - p);
        let ta = self.value(a);
        let keep: Vec<f64> = (0..ta.len())
            .map(|_| if rng.bernoulli(p) { 0.0 } else { scale })
            .collect();
        let data = ta.data().iter().zip(&keep).map(|(x, k)| x * k).collect();
        let v = Tensor::from_vec(ta.shape().to_vec(), data)?;
        Ok(self.push(v, Op::Dropout { input: a, keep }))
    }

    /// Elementwise `f` with a caller-supplied derivative `df`, evaluated at the input.
    pub fn map(&mut self, a: NodeId, f: fn(f64) -> f64, df: fn(f64) -> f64) -> NodeId {
        let v = self.value(a).map(f);
        self.push(v, Op::Map { input: a, deriv: df })
    }

    /// Backpropagate from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Zero the store's gradients, backpropagate, and write every parameter
    /// node's gradient into the store.
    pub fn backward_into(&self, loss: NodeId, store: &mut ParamStore) -> Result<()> {
        store.zero_grad();
        let grads = self.backward(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(pid), Some(g)) = (&node.op, &grads.grads[i]) {
                store.get_mut(*pid).grad.add_assign(g);
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], target: NodeId, g: Tensor) {
        if !self.nodes[target.0].needs_grad {
            return;
        }
        match &mut grads[target.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.nodes[a.0].needs_grad {
                    // dA = dC B^T : [m x n][n x k]
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, tb.data(), true, 0.0, &mut da);
                    self.accumulate(grads, *a, Tensor::matrix(m, k, da).unwrap());
                }
                if self.nodes[b.0].needs_grad {
                    // dB = A^T dC : [k x m][m x n]
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), true, g.data(), false, 0.0, &mut db);
                    self.accumulate(grads, *b, Tensor::matrix(k, n, db).unwrap());
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRowBias(a, bias) => {
                self.accumulate(grads, *a, g.clone());
                let n = g.cols();
                let mut gb = vec![0.0; n];
                for (i, v) in g.data().iter().enumerate() {
                    gb[i % n] += v;
                }
                self.accumulate(grads, *bias, Tensor::row(gb));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ga = zip_map(g, tb, |x, y| x * y);
                let gb = zip_map(g, ta, |x, y| x * y);
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|x| c * x)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::ScaleRows(a, s) => {
                let (ta, ts) = (self.value(*a), self.value(*s));
                let n = ta.cols().max(1);
                let mut ga = g.clone();
                for (i, x) in ga.data_mut().iter_mut().enumerate() {
                    *x *= ts.data()[i / n];
                }
                let mut gs = vec![0.0; ta.rows()];
                for (i, (x, y)) in g.data().iter().zip(ta.data()).enumerate() {
                    gs[i / n] += x * y;
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *s, Tensor::column(gs));
            }
            Op::Concat { inputs, axis } => {
                if *axis == 0 {
                    let cols = g.cols();
                    let mut offset = 0;
                    for &i in inputs {
                        let rows = self.value(i).rows();
                        let part = g.data()[offset * cols..(offset + rows) * cols].to_vec();
                        offset += rows;
                        self.accumulate(grads, i, Tensor::matrix(rows, cols, part).unwrap());
                    }
                } else {
                    let mut offset = 0;
                    for &i in inputs {
                        let t = self.value(i);
                        let (rows, cols) = (t.rows(), t.cols());
                        let mut part = Vec::with_capacity(rows * cols);
                        for r in 0..rows {
                            part.extend_from_slice(&g.row_slice(r)[offset..offset + cols]);
                        }
                        offset += cols;
                        self.accumulate(grads, i, Tensor::matrix(rows, cols, part).unwrap());
                    }
                }
            }
            Op::SliceCols { input, start } => {
                let t = self.value(*input);
                let mut gi = Tensor::zeros(t.shape().to_vec());
                let width = g.cols();
                let cols = t.cols();
                for r in 0..t.rows() {
                    let dst = &mut gi.data_mut()[r * cols + start..r * cols + start + width];
                    dst.copy_from_slice(g.row_slice(r));
                }
                self.accumulate(grads, *input, gi);
            }
            Op::GatherRows { input, ids } => {
                let t = self.value(*input);
                let cols = t.cols();
                let mut gi = Tensor::zeros(t.shape().to_vec());
                for (r, id) in ids.iter().enumerate() {
                    if let Some(src) = id {
                        let dst = &mut gi.data_mut()[src * cols..(src + 1) * cols];
                        for (d, v) in dst.iter_mut().zip(g.row_slice(r)) {
                            *d += v;
                        }
                    }
                }
                self.accumulate(grads, *input, gi);
            }
            Op::RowSoftmax(a) | Op::MaskedRowSoftmax(a) => {
                // dx = y * (dy - <dy, y>) per row; masked entries have y = 0.
                let cols = out.cols().max(1);
                let mut gi = Vec::with_capacity(out.len());
                for (y, dy) in out.data().chunks(cols).zip(g.data().chunks(cols)) {
                    let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
                    gi.extend(y.iter().zip(dy).map(|(yi, di)| yi * (di - dot)));
                }
                let gi = Tensor::from_vec(out.shape().to_vec(), gi).unwrap();
                self.accumulate(grads, *a, gi);
            }
            Op::Sigmoid(a) => self.accumulate(grads, *a, zip_map(g, out, |d, y| d * y * (1.0 - y))),
            Op::Tanh(a) => self.accumulate(grads, *a, zip_map(g, out, |d, y| d * (1.0 - y * y))),
            Op::Log { input, floor } => {
                let x = self.value(*input);
                let floor = *floor;
                let gi = zip_map(g, x, |d, x| if x > floor { d / x } else { 0.0 });
                self.accumulate(grads, *input, gi);
            }
            Op::Sum(a) => {
                let t = self.value(*a);
                self.accumulate(grads, *a, Tensor::full(t.shape().to_vec(), g.item()));
            }
            Op::Mean(a) => {
                let t = self.value(*a);
                let v = g.item() / t.len() as f64;
                self.accumulate(grads, *a, Tensor::full(t.shape().to_vec(), v));
            }
            Op::RowSum(a) => {
                let t = self.value(*a);
                let cols = t.cols().max(1);
                let data = (0..t.len()).map(|i| g.data()[i / cols]).collect();
                self.accumulate(grads, *a, Tensor::from_vec(t.shape().to_vec(), data).unwrap());
            }
            Op::SumSquares(a) => {
                let t = self.value(*a);
                let s = 2.0 * g.item();
                self.accumulate(grads, *a, t.map(|x| s * x));
            }
            Op::Pick { input, cols } => {
                let t = self.value(*input);
                let mut gi = Tensor::zeros(t.shape().to_vec());
                for (r, &c) in cols.iter().enumerate() {
                    gi.set(r, c, g.data()[r]);
                }
                self.accumulate(grads, *input, gi);
            }
            Op::Dropout { input, keep } => {
                let data = g.data().iter().zip(keep).map(|(d, k)| d * k).collect();
                let gi = Tensor::from_vec(g.shape().to_vec(), data).unwrap();
                self.accumulate(grads, *input, gi);
            }
            Op::Map { input, deriv } => {
                let x = self.value(*input);
                self.accumulate(grads, *input, zip_map(g, x, |d, x| d * deriv(x)));
            }
        }
    }

    /// Text rendering of the tape, one node per line.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for (i, n) in self.nodes.iter().enumerate() {
            let inputs: Vec<String> = n.op.inputs().iter().map(|x| format!("%{}", x.0)).collect();
            let _ = writeln!(
                s,
                "%{i} = {}({}) : {:?}{}",
                n.op.name(),
                inputs.join(", "),
                n.value.shape(),
                if n.needs_grad { "" } else { " const" }
            );
        }
        s
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.shape().to_vec(), data).unwrap()
}

fn softmax_in_place(row: &mut [f64], mask: Option<&[bool]>) {
    let on = |j: usize| mask.is_none_or(|m| m[j]);
    let max = row
        .iter()
        .enumerate()
        .filter(|(j, _)| on(*j))
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        row.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let mut total = 0.0;
    for (j, v) in row.iter_mut().enumerate() {
        if on(j) {
            *v = (*v - max).exp();
            total += *v;
        } else {
            *v = 0.0;
        }
    }
    row.iter_mut().for_each(|v| *v /= total);
}
