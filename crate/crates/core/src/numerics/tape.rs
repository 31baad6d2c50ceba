//! A small reverse-mode tape over [`Matrix`] values.
//!
//! Each recorded op keeps the inputs its backward rule needs. `backward`
//! walks the tape in reverse and accumulates gradients per node. The op set
//! is exactly what a per-token MoE layer and its auxiliary losses need; the
//! tape backs the naive reference path that the fused layer backward is
//! checked against.

use super::matrix::{Matrix, Real};
use super::ops;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`GradTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// `a · bᵀ`
    MatMulBt(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// 1×1 scalar times matrix
    ScaleBy(NodeId, NodeId),
    Silu(NodeId),
    SoftmaxRows(NodeId),
    SelectCols(NodeId, Vec<usize>),
    /// picks `(row, col)` entries into a 1×n row
    Gather(NodeId, Vec<(usize, usize)>),
    NormalizeRows(NodeId),
    GatherRows(NodeId, Vec<usize>),
    StackRows(Vec<NodeId>),
    /// `Σ a ⊙ w` with constant `w`
    WeightedSum(NodeId, Matrix),
    LogSumExpRows(NodeId),
    Square(NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Ordered record of ops with their saved inputs.
#[derive(Debug, Default, Clone)]
pub struct GradTape {
    nodes: Vec<Node>,
}

/// Gradients per node, produced by [`GradTape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = ops::matmul_bt(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMulBt(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn scale_by(&mut self, scalar: NodeId, a: NodeId) -> Result<NodeId> {
        let s = self.value(scalar);
        if s.shape() != (1, 1) {
            return Err(Error::shape("tape::scale_by", "scalar must be 1x1"));
        }
        let s = s.get(0, 0);
        let mut v = self.value(a).clone();
        v.scale(s);
        Ok(self.push(v, Op::ScaleBy(scalar, a)))
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let v = ops::silu(self.value(a));
        self.push(v, Op::Silu(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let v = ops::softmax_rows(self.value(a))?;
        Ok(self.push(v, Op::SoftmaxRows(a)))
    }

    /// Column selection; indices may repeat.
    pub fn select_cols(&mut self, a: NodeId, cols: Vec<usize>) -> Result<NodeId> {
        let src = self.value(a);
        let mut v = Matrix::zeros(src.rows(), cols.len());
        for r in 0..src.rows() {
            for (j, &c) in cols.iter().enumerate() {
                if c >= src.cols() {
                    return Err(Error::shape("tape::select_cols", format!("column {c}")));
                }
                v.set(r, j, src.get(r, c));
            }
        }
        Ok(self.push(v, Op::SelectCols(a, cols)))
    }

    pub fn gather(&mut self, a: NodeId, at: Vec<(usize, usize)>) -> Result<NodeId> {
        let src = self.value(a);
        let mut data = Vec::with_capacity(at.len());
        for &(r, c) in &at {
            if r >= src.rows() || c >= src.cols() {
                return Err(Error::shape("tape::gather", format!("entry ({r}, {c})")));
            }
            data.push(src.get(r, c));
        }
        let v = Matrix::new(1, at.len(), data)?;
        Ok(self.push(v, Op::Gather(a, at)))
    }

    /// Divides each row by its sum.
    pub fn normalize_rows(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let s: Real = row.iter().sum();
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        self.push(v, Op::NormalizeRows(a))
    }

    pub fn gather_rows(&mut self, a: NodeId, rows: Vec<usize>) -> Result<NodeId> {
        let v = ops::gather_rows(self.value(a), &rows)?;
        Ok(self.push(v, Op::GatherRows(a, rows)))
    }

    /// Vertically stacks 1×c rows.
    pub fn stack_rows(&mut self, parts: Vec<NodeId>) -> Result<NodeId> {
        let cols = parts.first().map_or(0, |&p| self.value(p).cols());
        let mut data = Vec::with_capacity(parts.len() * cols);
        for &p in &parts {
            let v = self.value(p);
            if v.shape() != (1, cols) {
                return Err(Error::shape("tape::stack_rows", format!("{:?}", v.shape())));
            }
            data.extend_from_slice(v.data());
        }
        let v = Matrix::new(parts.len(), cols, data)?;
        Ok(self.push(v, Op::StackRows(parts)))
    }

    pub fn weighted_sum(&mut self, a: NodeId, weights: Matrix) -> Result<NodeId> {
        self.value(a).ensure_same_shape(&weights, "tape::weighted_sum")?;
        let s: Real = self
            .value(a)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(x, w)| x * w)
            .sum();
        Ok(self.push(Matrix::filled(1, 1, s), Op::WeightedSum(a, weights)))
    }

    pub fn log_sum_exp_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let lse = ops::log_sum_exp_rows(self.value(a))?;
        let v = Matrix::new(lse.len(), 1, lse)?;
        Ok(self.push(v, Op::LogSumExpRows(a)))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        for x in v.data_mut() {
            *x *= *x;
        }
        self.push(v, Op::Square(a))
    }

    /// Reverse sweep from `output` seeded with `seed` (same shape as output).
    pub fn backward(&self, output: NodeId, seed: Matrix) -> Result<Gradients> {
        self.value(output)
            .ensure_same_shape(&seed, "tape::backward seed")?;
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMulBt(a, b) => {
                    let da = ops::matmul(&g, self.value(*b))?;
                    let db = ops::matmul_at(&g, self.value(*a))?;
                    accumulate(&mut grads, *a, da)?;
                    accumulate(&mut grads, *b, db)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g.clone())?;
                }
                Op::ScaleBy(s, a) => {
                    let sv = self.value(*s).get(0, 0);
                    let ds: Real = g
                        .data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(x, y)| x * y)
                        .sum();
                    let mut da = g.clone();
                    da.scale(sv);
                    accumulate(&mut grads, *s, Matrix::filled(1, 1, ds))?;
                    accumulate(&mut grads, *a, da)?;
                }
                Op::Silu(a) => {
                    let da = ops::silu_backward(self.value(*a), &g)?;
                    accumulate(&mut grads, *a, da)?;
                }
                Op::SoftmaxRows(a) => {
                    let da = ops::softmax_rows_backward(&node.value, &g)?;
                    accumulate(&mut grads, *a, da)?;
                }
                Op::SelectCols(a, cols) => {
                    let src = self.value(*a);
                    let mut da = Matrix::zeros(src.rows(), src.cols());
                    for r in 0..src.rows() {
                        for (j, &c) in cols.iter().enumerate() {
                            let v = da.get(r, c) + g.get(r, j);
                            da.set(r, c, v);
                        }
                    }
                    accumulate(&mut grads, *a, da)?;
                }
                Op::Gather(a, at) => {
                    let src = self.value(*a);
                    let mut da = Matrix::zeros(src.rows(), src.cols());
                    for (j, &(r, c)) in at.iter().enumerate() {
                        let v = da.get(r, c) + g.get(0, j);
                        da.set(r, c, v);
                    }
                    accumulate(&mut grads, *a, da)?;
                }
                Op::NormalizeRows(a) => {
                    let src = self.value(*a);
                    let mut da = Matrix::zeros(src.rows(), src.cols());
                    for r in 0..src.rows() {
                        let s: Real = src.row(r).iter().sum();
                        let y = node.value.row(r);
                        let gy: Real = g.row(r).iter().zip(y).map(|(a, b)| a * b).sum();
                        for (out, &gi) in da.row_mut(r).iter_mut().zip(g.row(r)) {
                            *out = (gi - gy) / s;
                        }
                    }
                    accumulate(&mut grads, *a, da)?;
                }
                Op::GatherRows(a, rows) => {
                    let src = self.value(*a);
                    let da = ops::scatter_add(Matrix::zeros(src.rows(), src.cols()), rows, &g)?;
                    accumulate(&mut grads, *a, da)?;
                }
                Op::StackRows(parts) => {
                    for (r, &p) in parts.iter().enumerate() {
                        let dp = Matrix::new(1, g.cols(), g.row(r).to_vec())?;
                        accumulate(&mut grads, p, dp)?;
                    }
                }
                Op::WeightedSum(a, w) => {
                    let mut da = w.clone();
                    da.scale(g.get(0, 0));
                    accumulate(&mut grads, *a, da)?;
                }
                Op::LogSumExpRows(a) => {
                    let mut da = ops::softmax_rows(self.value(*a))?;
                    for r in 0..da.rows() {
                        let gr = g.get(r, 0);
                        for v in da.row_mut(r) {
                            *v *= gr;
                        }
                    }
                    accumulate(&mut grads, *a, da)?;
                }
                Op::Square(a) => {
                    let mut da = g.clone();
                    for (d, x) in da.data_mut().iter_mut().zip(self.value(*a).data()) {
                        *d *= 2.0 * x;
                    }
                    accumulate(&mut grads, *a, da)?;
                }
            }
            // keep leaf gradients for the caller
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Matrix>], id: NodeId, g: Matrix) -> Result<()> {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}
