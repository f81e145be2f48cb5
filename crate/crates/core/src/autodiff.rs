//! Tape-based reverse-mode differentiation over [`Matrix`] values, and a
//! central finite-difference oracle to check it against.
//!
//! Nodes are appended in evaluation order, so the tape is topologically
//! sorted by construction. [`Tape::backward`] walks it once in reverse.

use crate::error::{LabError, Result};
use crate::numerics::{self, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation over previously recorded nodes.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// Adds a `1 x cols` row to every row of the first operand.
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    /// Adds a constant to every entry.
    Shift(NodeId, f64),
    /// Multiplies a matrix by a `1 x 1` node.
    ScalarMul { scalar: NodeId, matrix: NodeId },
    Transpose(NodeId),
    RowSlice { input: NodeId, start: usize, end: usize },
    ConcatCols(Vec<NodeId>),
    RowSoftmax(NodeId),
    Relu(NodeId),
    LayerNorm { input: NodeId, gain: NodeId, bias: NodeId },
    Sum(NodeId),
    /// Mean token cross-entropy of row logits against target class ids,
    /// fused with log-softmax.
    CrossEntropy { logits: NodeId, targets: Vec<usize> },
}

impl Op {
    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::AddRow(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::Shift(a, _) | Op::Transpose(a) | Op::RowSoftmax(a) | Op::Relu(a) | Op::Sum(a) => {
                vec![*a]
            }
            Op::ScalarMul { scalar, matrix } => vec![*scalar, *matrix],
            Op::RowSlice { input, .. } => vec![*input],
            Op::ConcatCols(parts) => parts.clone(),
            Op::LayerNorm { input, gain, bias } => vec![*input, *gain, *bias],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug, Clone)]
enum NodeKind {
    Input,
    Op(Op),
}

#[derive(Debug, Clone)]
struct Node {
    kind: NodeKind,
    value: Matrix,
    requires_grad: bool,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Accumulated adjoints, indexed by node.
#[derive(Debug, Clone)]
pub struct GradMap {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl GradMap {
    /// Adjoint of `id`, or `None` when the node does not depend on any
    /// differentiable input.
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Adjoint of `id`, with zeros for nodes that receive no gradient.
    pub fn wrt(&self, id: NodeId) -> Matrix {
        match self.get(id) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[id.0];
                Matrix::zeros(r, c)
            }
        }
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

    /// Differentiable input.
    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(NodeKind::Input, value, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(NodeKind::Input, value, false)
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, kind: NodeKind, value: Matrix, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            kind,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> Result<&Matrix> {
        self.nodes
            .get(id.0)
            .map(|n| &n.value)
            .ok_or(LabError::IndexOutOfRange {
                index: id.0,
                len: self.nodes.len(),
            })
    }

    /// Evaluates `op` on the cached values of its inputs and appends the result.
    pub fn record(&mut self, op: Op) -> Result<NodeId> {
        for id in op.inputs() {
            self.check(id)?;
        }
        let v = |id: NodeId| &self.nodes[id.0].value;
        let value = match &op {
            Op::MatMul(a, b) => v(*a).matmul(v(*b))?,
            Op::Add(a, b) => v(*a).add(v(*b))?,
            Op::Sub(a, b) => v(*a).sub(v(*b))?,
            Op::AddRow(a, b) => v(*a).add_row_broadcast(v(*b))?,
            Op::Scale(a, c) => v(*a).scale(*c),
            Op::Shift(a, c) => v(*a).map(|x| x + c),
            Op::ScalarMul { scalar, matrix } => {
                let s = v(*scalar).item().ok_or(LabError::ShapeMismatch {
                    op: "scalar_mul",
                    left: v(*scalar).shape(),
                    right: (1, 1),
                })?;
                v(*matrix).scale(s)
            }
            Op::Transpose(a) => v(*a).transpose(),
            Op::RowSlice { input, start, end } => v(*input).row_slice(*start, *end)?,
            Op::ConcatCols(parts) => {
                let refs: Vec<&Matrix> = parts.iter().map(|&p| v(p)).collect();
                Matrix::concat_cols(&refs)?
            }
            Op::RowSoftmax(a) => numerics::row_softmax(v(*a)),
            Op::Relu(a) => numerics::relu(v(*a)),
            Op::LayerNorm { input, gain, bias } => numerics::layer_norm(v(*input), v(*gain), v(*bias))?,
            Op::Sum(a) => Matrix::scalar(v(*a).sum()),
            Op::CrossEntropy { logits, targets } => {
                let l = v(*logits);
                if targets.len() != l.rows() {
                    return Err(LabError::ShapeMismatch {
                        op: "cross_entropy",
                        left: l.shape(),
                        right: (targets.len(), 1),
                    });
                }
                if let Some(&bad) = targets.iter().find(|&&t| t >= l.cols()) {
                    return Err(LabError::IndexOutOfRange {
                        index: bad,
                        len: l.cols(),
                    });
                }
                let logp = numerics::row_log_softmax(l);
                let total: f64 = targets.iter().enumerate().map(|(i, &t)| -logp.get(i, t)).sum();
                Matrix::scalar(total / targets.len().max(1) as f64)
            }
        };
        let requires_grad = op.inputs().iter().any(|&i| self.nodes[i.0].requires_grad);
        Ok(self.push(NodeKind::Op(op), value, requires_grad))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.record(Op::Sub(a, b))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        self.record(Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        self.record(Op::Scale(a, factor))
    }

    pub fn shift(&mut self, a: NodeId, offset: f64) -> Result<NodeId> {
        self.record(Op::Shift(a, offset))
    }

    pub fn scalar_mul(&mut self, scalar: NodeId, matrix: NodeId) -> Result<NodeId> {
        self.record(Op::ScalarMul { scalar, matrix })
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Transpose(a))
    }

    pub fn row_slice(&mut self, input: NodeId, start: usize, end: usize) -> Result<NodeId> {
        self.record(Op::RowSlice { input, start, end })
    }

    pub fn concat_cols(&mut self, parts: Vec<NodeId>) -> Result<NodeId> {
        self.record(Op::ConcatCols(parts))
    }

    pub fn row_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::RowSoftmax(a))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Relu(a))
    }

    pub fn layer_norm(&mut self, input: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        self.record(Op::LayerNorm { input, gain, bias })
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.record(Op::Sum(a))
    }

    pub fn cross_entropy(&mut self, logits: NodeId, targets: Vec<usize>) -> Result<NodeId> {
        self.record(Op::CrossEntropy { logits, targets })
    }

    /// Reverse sweep from a `1 x 1` loss node.
    pub fn backward(&self, loss: NodeId) -> Result<GradMap> {
        let loss_value = self.check(loss)?;
        if loss_value.shape() != (1, 1) {
            return Err(LabError::NonScalarLoss(loss_value.shape()));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Matrix::scalar(1.0));
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if let NodeKind::Op(op) = &self.nodes[idx].kind {
                for (input, contribution) in self.local_adjoints(op, &self.nodes[idx].value, &g) {
                    if !self.nodes[input.0].requires_grad {
                        continue;
                    }
                    match &mut grads[input.0] {
                        Some(acc) => {
                            for (a, c) in acc.data_mut().iter_mut().zip(contribution.data()) {
                                *a += c;
                            }
                        }
                        slot @ None => *slot = Some(contribution),
                    }
                }
            }
            grads[idx] = Some(g);
        }
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && idx <= loss.0 && grads[idx].is_none() {
                let (r, c) = node.value.shape();
                grads[idx] = Some(Matrix::zeros(r, c));
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(GradMap { grads, shapes })
    }

    /// Vector-Jacobian products of `op` for each input, given the adjoint `g`
    /// of its output `out`.
    fn local_adjoints(&self, op: &Op, out: &Matrix, g: &Matrix) -> Vec<(NodeId, Matrix)> {
        let v = |id: NodeId| &self.nodes[id.0].value;
        let want = |id: NodeId| self.nodes[id.0].requires_grad;
        match op {
            Op::MatMul(a, b) => {
                let mut out = Vec::with_capacity(2);
                if want(*a) {
                    out.push((*a, g.matmul(&v(*b).transpose()).expect("shapes checked on record")));
                }
                if want(*b) {
                    out.push((*b, v(*a).transpose().matmul(g).expect("shapes checked on record")));
                }
                out
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-1.0))],
            Op::AddRow(a, row) => {
                let mut col_sums = Matrix::zeros(1, g.cols());
                for i in 0..g.rows() {
                    for (s, &x) in col_sums.row_mut(0).iter_mut().zip(g.row(i)) {
                        *s += x;
                    }
                }
                vec![(*a, g.clone()), (*row, col_sums)]
            }
            Op::Scale(a, c) => vec![(*a, g.scale(*c))],
            Op::Shift(a, _) => vec![(*a, g.clone())],
            Op::ScalarMul { scalar, matrix } => {
                let s = v(*scalar).get(0, 0);
                let ds: f64 = g.data().iter().zip(v(*matrix).data()).map(|(x, y)| x * y).sum();
                vec![(*scalar, Matrix::scalar(ds)), (*matrix, g.scale(s))]
            }
            Op::Transpose(a) => vec![(*a, g.transpose())],
            Op::RowSlice { input, start, .. } => {
                let src = v(*input);
                let mut full = Matrix::zeros(src.rows(), src.cols());
                for i in 0..g.rows() {
                    full.row_mut(start + i).copy_from_slice(g.row(i));
                }
                vec![(*input, full)]
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let w = v(p).cols();
                        let piece = g.col_slice(offset, offset + w).expect("shapes checked on record");
                        offset += w;
                        (p, piece)
                    })
                    .collect()
            }
            Op::RowSoftmax(a) => {
                // Row Jacobian diag(p) - p p^T applied to g.
                let mut da = Matrix::zeros(out.rows(), out.cols());
                for i in 0..out.rows() {
                    let p = out.row(i);
                    let gi = g.row(i);
                    let dot: f64 = p.iter().zip(gi).map(|(x, y)| x * y).sum();
                    for (d, (&pj, &gj)) in da.row_mut(i).iter_mut().zip(p.iter().zip(gi)) {
                        *d = pj * (gj - dot);
                    }
                }
                vec![(*a, da)]
            }
            Op::Relu(a) => {
                let x = v(*a);
                let mut da = g.clone();
                for (d, &xv) in da.data_mut().iter_mut().zip(x.data()) {
                    if xv <= 0.0 {
                        *d = 0.0;
                    }
                }
                vec![(*a, da)]
            }
            Op::LayerNorm { input, gain, bias } => {
                let x = v(*input);
                let gamma = v(*gain);
                let n = x.cols() as f64;
                let mut dx = Matrix::zeros(x.rows(), x.cols());
                let mut dgain = Matrix::zeros(1, x.cols());
                let mut dbias = Matrix::zeros(1, x.cols());
                let mut xhat = vec![0.0; x.cols()];
                let mut dxhat = vec![0.0; x.cols()];
                for i in 0..x.rows() {
                    let row = x.row(i);
                    let mean = row.iter().sum::<f64>() / n;
                    let var = row.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
                    let inv = 1.0 / (var + numerics::LAYER_NORM_EPS).sqrt();
                    for j in 0..x.cols() {
                        xhat[j] = (row[j] - mean) * inv;
                        let gij = g.get(i, j);
                        dgain.data_mut()[j] += gij * xhat[j];
                        dbias.data_mut()[j] += gij;
                        dxhat[j] = gij * gamma.get(0, j);
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / n;
                    let mean_dx = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n;
                    for (j, d) in dx.row_mut(i).iter_mut().enumerate() {
                        *d = inv * (dxhat[j] - mean_d - xhat[j] * mean_dx);
                    }
                }
                vec![(*input, dx), (*gain, dgain), (*bias, dbias)]
            }
            Op::Sum(a) => {
                let (r, c) = v(*a).shape();
                vec![(*a, Matrix::filled(r, c, g.get(0, 0)))]
            }
            Op::CrossEntropy { logits, targets } => {
                let l = v(*logits);
                let mut d = numerics::row_softmax(l);
                let scale = g.get(0, 0) / targets.len().max(1) as f64;
                for (i, &t) in targets.iter().enumerate() {
                    let cell = d.get(i, t) - 1.0;
                    d.set(i, t, cell);
                }
                vec![(*logits, d.scale(scale))]
            }
        }
    }
}

/// Central finite differences `(f(x + h e) - f(x - h e)) / 2h` for every entry.
pub fn fd_check(f: impl Fn(&Matrix) -> f64, at: &Matrix, h: f64) -> Matrix {
    assert!(h > 0.0, "step must be positive");
    let mut grad = Matrix::zeros(at.rows(), at.cols());
    let mut probe = at.clone();
    for idx in 0..at.data().len() {
        let orig = probe.data()[idx];
        probe.data_mut()[idx] = orig + h;
        let up = f(&probe);
        probe.data_mut()[idx] = orig - h;
        let down = f(&probe);
        probe.data_mut()[idx] = orig;
        grad.data_mut()[idx] = (up - down) / (2.0 * h);
    }
    grad
}

/// Default finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Largest entrywise `|a - b| / max(1, |a|)`.
pub fn max_relative_error(analytic: &Matrix, numeric: &Matrix) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max)
}
