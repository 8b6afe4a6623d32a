//! Dense 2-D arrays and a reverse-mode differentiation graph.
//!
//! The graph is an arena: every operation is recorded in insertion order
//! (which is a topological order by construction, since an op can only
//! reference earlier nodes), forward values are computed eagerly, and
//! [`Graph::backward`] replays the record in reverse, accumulating
//! vector-Jacobian products into per-node gradients.
//!
//! A graph is confined to one thread; independent graphs share nothing and
//! may run concurrently.

use crate::num::Real;
use thiserror::Error;

/// Epsilon added under the square root of every 2-norm so the gradient stays
/// finite at near-zero vectors. Tests that compare norms against exact values
/// must budget for a perturbation of at most `sqrt(EPS_NORM)` = 1e-6 near
/// zero and ~1e-13 at unit scale.
pub const EPS_NORM: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("{op} at node {node}: {msg}")]
    Domain {
        op: &'static str,
        node: usize,
        msg: String,
    },
    #[error("non-finite value produced by {op} at node {node}")]
    NonFinite { op: &'static str, node: usize },
    #[error("reduction over an empty axis at node {node}")]
    EmptyReduction { node: usize },
    #[error("backward already ran on this graph; call reset_grads() first")]
    BackwardTwice,
    #[error("backward root must be 1x1, got {rows}x{cols}")]
    NonScalarRoot { rows: usize, cols: usize },
    #[error("slice {rows:?},{cols:?} out of bounds for {shape:?}")]
    SliceOutOfBounds {
        rows: (usize, usize),
        cols: (usize, usize),
        shape: (usize, usize),
    },
    #[error("label {label} out of range for {cols} logits")]
    LabelOutOfRange { label: usize, cols: usize },
    #[error("atom has no particles")]
    EmptyAtom,
    #[error("pairing needs a batch of at least 2 atoms, got {got}")]
    BatchTooSmall { got: usize },
    #[error("method {method} requires {what}")]
    MissingInput {
        method: &'static str,
        what: &'static str,
    },
    #[error("invalid pairing plan: {0}")]
    InvalidPlan(String),
}

/// Dense row-major 2-D array.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat<F> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F: Real> Mat<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![F::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, v: F) -> Self {
        Mat {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<F>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must match shape");
        Mat { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<F>]) -> Self {
        let ncols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == ncols), "ragged rows");
        Mat {
            rows: rows.len(),
            cols: ncols,
            data: rows.concat(),
        }
    }

    pub fn scalar(v: F) -> Self {
        Mat::from_vec(1, 1, vec![v])
    }

    pub fn row_vec(v: &[F]) -> Self {
        Mat::from_vec(1, v.len(), v.to_vec())
    }

    pub fn col_vec(v: &[F]) -> Self {
        Mat::from_vec(v.len(), 1, v.to_vec())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    pub fn at(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: F) {
        self.data[r * self.cols + c] = v;
    }

    /// Reads `(r, c)`, treating a 1x1 matrix as a broadcast scalar.
    fn broadcast_at(&self, r: usize, c: usize) -> F {
        if self.is_scalar() {
            self.data[0]
        } else {
            self.at(r, c)
        }
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn iter(&self) -> std::slice::Iter<'_, F> {
        self.data.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn add_assign(&mut self, other: &Mat<F>) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
    }

    fn matmul(&self, other: &Mat<F>) -> Mat<F> {
        debug_assert_eq!(self.cols, other.rows);
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let aik = self.at(i, k);
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += aik * other.at(k, j);
                }
            }
        }
        out
    }

    fn transposed(&self) -> Mat<F> {
        let mut out = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.at(r, c));
            }
        }
        out
    }

    /// Sums `self` down to `shape`; used to undo a 1x1 broadcast in backward.
    fn reduce_to(&self, shape: (usize, usize)) -> Mat<F> {
        if self.shape() == shape {
            self.clone()
        } else {
            debug_assert_eq!(shape, (1, 1));
            Mat::scalar(self.data.iter().copied().sum())
        }
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub usize);

/// Reduction axis: `Rows` collapses rows (m x n -> 1 x n), `Cols` collapses
/// columns (m x n -> m x 1), `Both` collapses everything to 1x1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
    Both,
}

/// Vector norm order used by the norm reduction and the atom geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    L1,
    L2,
}

#[derive(Debug, Clone)]
enum NodeOp<F> {
    Leaf,
    MatMul(TensorId, TensorId),
    Transpose(TensorId),
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Neg(TensorId),
    Sigmoid(TensorId),
    Square(TensorId),
    Sqrt(TensorId),
    Recip(TensorId),
    MaxScalar(TensorId, F),
    AddScalar(TensorId, F),
    Scale(TensorId, F),
    Sum(TensorId, Axis),
    Mean(TensorId, Axis),
    NormP(TensorId, Norm, Axis),
    Slice(TensorId, (usize, usize), (usize, usize)),
    CrossEntropyLogits(TensorId, usize),
    /// Identity forward with a deliberately wrong adjoint (scaled by 1.05).
    /// Negative-control fixture for gradient-check tests; never used by the
    /// real computation paths.
    NegativeControl(TensorId),
}

fn op_name<F>(op: &NodeOp<F>) -> &'static str {
    match op {
        NodeOp::Leaf => "leaf",
        NodeOp::MatMul(..) => "matmul",
        NodeOp::Transpose(..) => "transpose",
        NodeOp::Add(..) => "add",
        NodeOp::Sub(..) => "sub",
        NodeOp::Mul(..) => "mul",
        NodeOp::Neg(..) => "neg",
        NodeOp::Sigmoid(..) => "sigmoid",
        NodeOp::Square(..) => "square",
        NodeOp::Sqrt(..) => "sqrt",
        NodeOp::Recip(..) => "reciprocal",
        NodeOp::MaxScalar(..) => "max_scalar",
        NodeOp::AddScalar(..) => "add_scalar",
        NodeOp::Scale(..) => "scale",
        NodeOp::Sum(..) => "sum",
        NodeOp::Mean(..) => "mean",
        NodeOp::NormP(..) => "norm_p",
        NodeOp::Slice(..) => "slice",
        NodeOp::CrossEntropyLogits(..) => "cross_entropy_logits",
        NodeOp::NegativeControl(..) => "negative_control",
    }
}

struct Node<F> {
    value: Mat<F>,
    op: NodeOp<F>,
}

/// Arena-based computation graph with eager forward evaluation.
pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Mat<F>>>,
    backward_done: bool,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &Mat<F> {
        &self.nodes[id.0].value
    }

    /// Scalar payload of a 1x1 node.
    pub fn scalar_value(&self, id: TensorId) -> F {
        let v = &self.nodes[id.0].value;
        assert!(v.is_scalar(), "node {} is {:?}, not 1x1", id.0, v.shape());
        v.at(0, 0)
    }

    /// Gradient accumulated by the last backward pass, if any reached `id`.
    pub fn grad(&self, id: TensorId) -> Option<&Mat<F>> {
        self.grads[id.0].as_ref()
    }

    fn push(&mut self, value: Mat<F>, op: NodeOp<F>) -> Result<TensorId, DiffError> {
        let node = self.nodes.len();
        if !value.all_finite() {
            return Err(DiffError::NonFinite {
                op: op_name(&op),
                node,
            });
        }
        self.nodes.push(Node { value, op });
        self.grads.push(None);
        Ok(TensorId(node))
    }

    pub fn leaf(&mut self, value: Mat<F>) -> Result<TensorId, DiffError> {
        self.push(value, NodeOp::Leaf)
    }

    pub fn scalar(&mut self, v: F) -> Result<TensorId, DiffError> {
        self.leaf(Mat::scalar(v))
    }

    // ── forward ops ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, DiffError> {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        if ac != br {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                lhs: (ar, ac),
                rhs: (br, bc),
            });
        }
        let out = self.value(a).matmul(self.value(b));
        self.push(out, NodeOp::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId, DiffError> {
        let out = self.value(a).transposed();
        self.push(out, NodeOp::Transpose(a))
    }

    fn binary(
        &mut self,
        a: TensorId,
        b: TensorId,
        name: &'static str,
        f: impl Fn(F, F) -> F,
        op: NodeOp<F>,
    ) -> Result<TensorId, DiffError> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        let out_shape = if sa == sb {
            sa
        } else if sa == (1, 1) {
            sb
        } else if sb == (1, 1) {
            sa
        } else {
            return Err(DiffError::ShapeMismatch {
                op: name,
                lhs: sa,
                rhs: sb,
            });
        };
        let mut out = Mat::zeros(out_shape.0, out_shape.1);
        for r in 0..out_shape.0 {
            for c in 0..out_shape.1 {
                let va = self.value(a).broadcast_at(r, c);
                let vb = self.value(b).broadcast_at(r, c);
                out.set(r, c, f(va, vb));
            }
        }
        self.push(out, op)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, DiffError> {
        self.binary(a, b, "add", |x, y| x + y, NodeOp::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, DiffError> {
        self.binary(a, b, "sub", |x, y| x - y, NodeOp::Sub(a, b))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, DiffError> {
        self.binary(a, b, "mul", |x, y| x * y, NodeOp::Mul(a, b))
    }

    pub fn neg(&mut self, a: TensorId) -> Result<TensorId, DiffError> {
        let out = self.value(a).map(|v| -v);
        self.push(out, NodeOp::Neg(a))
    }

    pub fn sigmoid(&mut self, a: TensorId) -> Result<TensorId, DiffError> {
        let out = self.value(a).map(|v| F::one() / (F::one() + (-v).exp()));
        self.push(out, NodeOp::Sigmoid(a))
    }

    pub fn square(&mut self, a: TensorId) -> Result<TensorId, DiffError> {
        let out = self.value(a).map(|v| v * v);
        self.push(out, NodeOp::Square(a))
    }

    pub fn sqrt(&mut self, a: TensorId) -> Result<TensorId, DiffError> {
        let node = self.nodes.len();
        if self.value(a).iter().any(|&v| v < F::zero()) {
            return Err(DiffError::Domain {
                op: "sqrt",
                node,
                msg: "negative operand".into(),
            });
        }
        let out = self.value(a).map(|v| v.sqrt());
        self.push(out, NodeOp::Sqrt(a))
    }

    pub fn recip(&mut self, a: TensorId) -> Result<TensorId, DiffError> {
        let node = self.nodes.len();
        if self.value(a).iter().any(|&v| v == F::zero()) {
            return Err(DiffError::Domain {
                op: "reciprocal",
                node,
                msg: "zero operand".into(),
            });
        }
        let out = self.value(a).map(|v| F::one() / v);
        self.push(out, NodeOp::Recip(a))
    }

    /// Elementwise `max(x, c)`. Subgradient 0 exactly at the kink `x == c`.
    pub fn max_scalar(&mut self, a: TensorId, c: F) -> Result<TensorId, DiffError> {
        let out = self.value(a).map(|v| v.max(c));
        self.push(out, NodeOp::MaxScalar(a, c))
    }

    pub fn add_scalar(&mut self, a: TensorId, c: F) -> Result<TensorId, DiffError> {
        let out = self.value(a).map(|v| v + c);
        self.push(out, NodeOp::AddScalar(a, c))
    }

    pub fn scale(&mut self, a: TensorId, c: F) -> Result<TensorId, DiffError> {
        let out = self.value(a).map(|v| v * c);
        self.push(out, NodeOp::Scale(a, c))
    }

    fn reduce_cells(&self, a: TensorId, axis: Axis) -> ((usize, usize), usize) {
        let (r, c) = self.value(a).shape();
        match axis {
            Axis::Rows => ((1, c), r),
            Axis::Cols => ((r, 1), c),
            Axis::Both => ((1, 1), r * c),
        }
    }

    fn reduce(
        &mut self,
        a: TensorId,
        axis: Axis,
        op: NodeOp<F>,
        finish: impl Fn(F, usize) -> F,
    ) -> Result<TensorId, DiffError> {
        let (out_shape, len) = self.reduce_cells(a, axis);
        if len == 0 {
            return Err(DiffError::EmptyReduction {
                node: self.nodes.len(),
            });
        }
        let (rows, cols) = self.value(a).shape();
        let mut out = Mat::zeros(out_shape.0, out_shape.1);
        for r in 0..rows {
            for c in 0..cols {
                let (or, oc) = match axis {
                    Axis::Rows => (0, c),
                    Axis::Cols => (r, 0),
                    Axis::Both => (0, 0),
                };
                let v = out.at(or, oc) + self.value(a).at(r, c);
                out.set(or, oc, v);
            }
        }
        let out = out.map(|v| finish(v, len));
        self.push(out, op)
    }

    pub fn sum(&mut self, a: TensorId, axis: Axis) -> Result<TensorId, DiffError> {
        self.reduce(a, axis, NodeOp::Sum(a, axis), |v, _| v)
    }

    pub fn mean(&mut self, a: TensorId, axis: Axis) -> Result<TensorId, DiffError> {
        self.reduce(a, axis, NodeOp::Mean(a, axis), |v, n| v / F::of(n as f64))
    }

    /// p-norm reduction. The 2-norm is `sqrt(sum(v^2) + EPS_NORM)` so its
    /// gradient stays finite at zero vectors; the 1-norm uses subgradient 0
    /// at zero entries.
    pub fn norm_p(&mut self, a: TensorId, p: Norm, axis: Axis) -> Result<TensorId, DiffError> {
        let (out_shape, len) = self.reduce_cells(a, axis);
        if len == 0 {
            return Err(DiffError::EmptyReduction {
                node: self.nodes.len(),
            });
        }
        let (rows, cols) = self.value(a).shape();
        let mut acc = Mat::zeros(out_shape.0, out_shape.1);
        for r in 0..rows {
            for c in 0..cols {
                let (or, oc) = match axis {
                    Axis::Rows => (0, c),
                    Axis::Cols => (r, 0),
                    Axis::Both => (0, 0),
                };
                let v = self.value(a).at(r, c);
                let term = match p {
                    Norm::L1 => v.abs(),
                    Norm::L2 => v * v,
                };
                acc.set(or, oc, acc.at(or, oc) + term);
            }
        }
        let eps = F::of(EPS_NORM);
        let out = match p {
            Norm::L1 => acc,
            Norm::L2 => acc.map(|v: F| (v + eps).sqrt()),
        };
        self.push(out, NodeOp::NormP(a, p, axis))
    }

    /// Copies the sub-block `rows.0 .. rows.0 + rows.1` x `cols.0 .. cols.0 + cols.1`.
    pub fn slice(
        &mut self,
        a: TensorId,
        rows: (usize, usize),
        cols: (usize, usize),
    ) -> Result<TensorId, DiffError> {
        let shape = self.value(a).shape();
        if rows.0 + rows.1 > shape.0 || cols.0 + cols.1 > shape.1 || rows.1 == 0 || cols.1 == 0 {
            return Err(DiffError::SliceOutOfBounds { rows, cols, shape });
        }
        let mut out = Mat::zeros(rows.1, cols.1);
        for r in 0..rows.1 {
            for c in 0..cols.1 {
                out.set(r, c, self.value(a).at(rows.0 + r, cols.0 + c));
            }
        }
        self.push(out, NodeOp::Slice(a, rows, cols))
    }

    /// `-log softmax(logits)[label]` for a 1 x n logits row, computed with
    /// log-sum-exp stabilization.
    pub fn cross_entropy_logits(
        &mut self,
        logits: TensorId,
        label: usize,
    ) -> Result<TensorId, DiffError> {
        let (rows, cols) = self.value(logits).shape();
        if rows != 1 {
            return Err(DiffError::ShapeMismatch {
                op: "cross_entropy_logits",
                lhs: (rows, cols),
                rhs: (1, cols),
            });
        }
        if label >= cols {
            return Err(DiffError::LabelOutOfRange { label, cols });
        }
        let v = self.value(logits);
        let max = v.iter().copied().fold(F::neg_infinity(), F::max);
        let lse = max + v.iter().map(|&x| (x - max).exp()).sum::<F>().ln();
        let out = Mat::scalar(lse - v.at(0, label));
        self.push(out, NodeOp::CrossEntropyLogits(logits, label))
    }

    /// Negative-control fixture: identity forward, adjoint deliberately
    /// scaled by 1.05 so gradient checks must flag it. Not used by any real
    /// computation path.
    pub fn negative_control(&mut self, a: TensorId) -> Result<TensorId, DiffError> {
        let out = self.value(a).clone();
        self.push(out, NodeOp::NegativeControl(a))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Clears accumulated gradients and re-arms backward.
    pub fn reset_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    /// Reverse pass from a scalar root. Visits nodes in exact reverse
    /// insertion order (reverse topological order). Forward values are left
    /// untouched. Erroring out mid-pass leaves gradients partially
    /// accumulated; callers should `reset_grads` before reuse.
    pub fn backward(&mut self, root: TensorId) -> Result<(), DiffError> {
        if self.backward_done {
            return Err(DiffError::BackwardTwice);
        }
        let (rows, cols) = self.value(root).shape();
        if (rows, cols) != (1, 1) {
            return Err(DiffError::NonScalarRoot { rows, cols });
        }
        self.backward_done = true;
        self.grads[root.0] = Some(Mat::scalar(F::one()));
        for id in (0..=root.0).rev() {
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            let op = self.nodes[id].op.clone();
            self.apply_vjp(id, &op, &g)?;
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    fn accumulate(
        &mut self,
        into: TensorId,
        delta: Mat<F>,
        op: &'static str,
        node: usize,
    ) -> Result<(), DiffError> {
        if !delta.all_finite() {
            return Err(DiffError::NonFinite { op, node });
        }
        match &mut self.grads[into.0] {
            Some(g) => g.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
        Ok(())
    }

    fn apply_vjp(&mut self, node: usize, op: &NodeOp<F>, g: &Mat<F>) -> Result<(), DiffError> {
        let name = op_name(op);
        match *op {
            NodeOp::Leaf => {}
            NodeOp::MatMul(a, b) => {
                let da = g.matmul(&self.value(b).transposed());
                let db = self.value(a).transposed().matmul(g);
                self.accumulate(a, da, name, node)?;
                self.accumulate(b, db, name, node)?;
            }
            NodeOp::Transpose(a) => {
                self.accumulate(a, g.transposed(), name, node)?;
            }
            NodeOp::Add(a, b) => {
                let sa = self.value(a).shape();
                let sb = self.value(b).shape();
                self.accumulate(a, g.reduce_to(sa), name, node)?;
                self.accumulate(b, g.reduce_to(sb), name, node)?;
            }
            NodeOp::Sub(a, b) => {
                let sa = self.value(a).shape();
                let sb = self.value(b).shape();
                self.accumulate(a, g.reduce_to(sa), name, node)?;
                self.accumulate(b, g.map(|v| -v).reduce_to(sb), name, node)?;
            }
            NodeOp::Mul(a, b) => {
                let sa = self.value(a).shape();
                let sb = self.value(b).shape();
                let mut da = Mat::zeros(g.rows(), g.cols());
                let mut db = Mat::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        da.set(r, c, g.at(r, c) * self.value(b).broadcast_at(r, c));
                        db.set(r, c, g.at(r, c) * self.value(a).broadcast_at(r, c));
                    }
                }
                self.accumulate(a, da.reduce_to(sa), name, node)?;
                self.accumulate(b, db.reduce_to(sb), name, node)?;
            }
            NodeOp::Neg(a) => {
                self.accumulate(a, g.map(|v| -v), name, node)?;
            }
            NodeOp::Sigmoid(a) => {
                let s = &self.nodes[node].value;
                let mut da = Mat::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        let sv = s.at(r, c);
                        da.set(r, c, g.at(r, c) * sv * (F::one() - sv));
                    }
                }
                self.accumulate(a, da, name, node)?;
            }
            NodeOp::Square(a) => {
                let two = F::of(2.0);
                let av = self.value(a).clone();
                let mut da = Mat::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        da.set(r, c, g.at(r, c) * two * av.at(r, c));
                    }
                }
                self.accumulate(a, da, name, node)?;
            }
            NodeOp::Sqrt(a) => {
                let out = self.nodes[node].value.clone();
                let two = F::of(2.0);
                let mut da = Mat::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        da.set(r, c, g.at(r, c) / (two * out.at(r, c)));
                    }
                }
                self.accumulate(a, da, name, node)?;
            }
            NodeOp::Recip(a) => {
                let out = self.nodes[node].value.clone();
                let mut da = Mat::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        let o = out.at(r, c);
                        da.set(r, c, -g.at(r, c) * o * o);
                    }
                }
                self.accumulate(a, da, name, node)?;
            }
            NodeOp::MaxScalar(a, cval) => {
                let av = self.value(a).clone();
                let mut da = Mat::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        let pass = if av.at(r, c) > cval { F::one() } else { F::zero() };
                        da.set(r, c, g.at(r, c) * pass);
                    }
                }
                self.accumulate(a, da, name, node)?;
            }
            NodeOp::AddScalar(a, _) => {
                self.accumulate(a, g.clone(), name, node)?;
            }
            NodeOp::Scale(a, cval) => {
                self.accumulate(a, g.map(|v| v * cval), name, node)?;
            }
            NodeOp::Sum(a, axis) => {
                let da = self.spread(a, axis, g, F::one());
                self.accumulate(a, da, name, node)?;
            }
            NodeOp::Mean(a, axis) => {
                let (_, len) = self.reduce_cells(a, axis);
                let da = self.spread(a, axis, g, F::one() / F::of(len as f64));
                self.accumulate(a, da, name, node)?;
            }
            NodeOp::NormP(a, p, axis) => {
                let av = self.value(a).clone();
                let out = self.nodes[node].value.clone();
                let mut da = Mat::zeros(av.rows(), av.cols());
                for r in 0..av.rows() {
                    for c in 0..av.cols() {
                        let (or, oc) = match axis {
                            Axis::Rows => (0, c),
                            Axis::Cols => (r, 0),
                            Axis::Both => (0, 0),
                        };
                        let go = g.at(or, oc);
                        let v = av.at(r, c);
                        let d = match p {
                            Norm::L1 => {
                                if v > F::zero() {
                                    F::one()
                                } else if v < F::zero() {
                                    -F::one()
                                } else {
                                    F::zero()
                                }
                            }
                            Norm::L2 => v / out.at(or, oc),
                        };
                        da.set(r, c, go * d);
                    }
                }
                self.accumulate(a, da, name, node)?;
            }
            NodeOp::Slice(a, rows, cols) => {
                let shape = self.value(a).shape();
                let mut da = Mat::zeros(shape.0, shape.1);
                for r in 0..rows.1 {
                    for c in 0..cols.1 {
                        da.set(rows.0 + r, cols.0 + c, g.at(r, c));
                    }
                }
                self.accumulate(a, da, name, node)?;
            }
            NodeOp::CrossEntropyLogits(a, label) => {
                let av = self.value(a).clone();
                let max = av.iter().copied().fold(F::neg_infinity(), F::max);
                let denom: F = av.iter().map(|&x| (x - max).exp()).sum();
                let go = g.at(0, 0);
                let mut da = Mat::zeros(1, av.cols());
                for c in 0..av.cols() {
                    let p = (av.at(0, c) - max).exp() / denom;
                    let onehot = if c == label { F::one() } else { F::zero() };
                    da.set(0, c, go * (p - onehot));
                }
                self.accumulate(a, da, name, node)?;
            }
            NodeOp::NegativeControl(a) => {
                self.accumulate(a, g.map(|v| v * F::of(1.05)), name, node)?;
            }
        }
        Ok(())
    }

    /// Broadcasts a reduced gradient back over the collapsed axis, scaled.
    fn spread(&self, a: TensorId, axis: Axis, g: &Mat<F>, k: F) -> Mat<F> {
        let (rows, cols) = self.value(a).shape();
        let mut da = Mat::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                let (or, oc) = match axis {
                    Axis::Rows => (0, c),
                    Axis::Cols => (r, 0),
                    Axis::Both => (0, 0),
                };
                da.set(r, c, g.at(or, oc) * k);
            }
        }
        da
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph() -> Graph<f64> {
        Graph::new()
    }

    #[test]
    fn matmul_identity() {
        let mut g = graph();
        let i2 = g.leaf(Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]])).unwrap();
        let a = g.leaf(Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]])).unwrap();
        let out = g.matmul(i2, a).unwrap();
        assert_eq!(g.value(out), g.value(a));
    }

    #[test]
    fn matmul_orthogonal_rows() {
        let mut g = graph();
        let a = g.leaf(Mat::from_rows(&[vec![1.0, 0.0]])).unwrap();
        let b = g.leaf(Mat::from_rows(&[vec![0.0], vec![5.0]])).unwrap();
        let out = g.matmul(a, b).unwrap();
        assert_eq!(g.scalar_value(out), 0.0);
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let mut g = graph();
        let a = g.leaf(Mat::zeros(2, 3)).unwrap();
        let b = g.leaf(Mat::zeros(2, 3)).unwrap();
        assert!(matches!(
            g.matmul(a, b),
            Err(DiffError::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut g = graph();
        let x = g.scalar(0.0).unwrap();
        let s = g.sigmoid(x).unwrap();
        assert_eq!(g.scalar_value(s), 0.5);
        g.backward(s).unwrap();
        // sigma'(0) = 0.25
        assert!((g.grad(x).unwrap().at(0, 0) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn max_with_scalar_clamps() {
        let mut g = graph();
        let x = g.leaf(Mat::row_vec(&[-2.0, 3.0])).unwrap();
        let y = g.max_scalar(x, 0.0).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 3.0]);
    }

    #[test]
    fn two_norm_is_hypotenuse() {
        let mut g = graph();
        let x = g.leaf(Mat::row_vec(&[3.0, 4.0])).unwrap();
        let n = g.norm_p(x, Norm::L2, Axis::Both).unwrap();
        assert!((g.scalar_value(n) - 5.0).abs() < 1e-8);
    }

    #[test]
    fn one_norm_sums_magnitudes() {
        let mut g = graph();
        let x = g.leaf(Mat::row_vec(&[-1.0, 2.0])).unwrap();
        let n = g.norm_p(x, Norm::L1, Axis::Both).unwrap();
        assert_eq!(g.scalar_value(n), 3.0);
    }

    #[test]
    fn mean_of_ones() {
        let mut g = graph();
        let x = g.leaf(Mat::filled(1, 5, 1.0)).unwrap();
        let m = g.mean(x, Axis::Both).unwrap();
        assert_eq!(g.scalar_value(m), 1.0);
    }

    #[test]
    fn reduce_over_empty_axis_errors() {
        let mut g = graph();
        let x = g.leaf(Mat::zeros(0, 3)).unwrap();
        assert!(matches!(
            g.sum(x, Axis::Rows),
            Err(DiffError::EmptyReduction { .. })
        ));
    }

    #[test]
    fn backward_twice_without_reset_errors() {
        let mut g = graph();
        let x = g.scalar(2.0).unwrap();
        let y = g.square(x).unwrap();
        g.backward(y).unwrap();
        assert!(matches!(g.backward(y), Err(DiffError::BackwardTwice)));
        g.reset_grads();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().at(0, 0), 4.0);
    }

    #[test]
    fn backward_leaves_forward_values_unchanged() {
        let mut g = graph();
        let x = g.leaf(Mat::row_vec(&[1.0, 2.0, 3.0])).unwrap();
        let sq = g.square(x).unwrap();
        let s = g.sum(sq, Axis::Both).unwrap();
        let before = g.value(sq).clone();
        g.backward(s).unwrap();
        assert_eq!(g.value(sq), &before);
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn scalar_broadcast_in_binary_ops() {
        let mut g = graph();
        let x = g.leaf(Mat::row_vec(&[1.0, 2.0])).unwrap();
        let c = g.scalar(10.0).unwrap();
        let y = g.mul(x, c).unwrap();
        assert_eq!(g.value(y).data(), &[10.0, 20.0]);
        let s = g.sum(y, Axis::Both).unwrap();
        g.backward(s).unwrap();
        // d/dc sum(c*x) = sum(x) = 3
        assert_eq!(g.grad(c).unwrap().at(0, 0), 3.0);
    }

    #[test]
    fn sqrt_rejects_negative_operands() {
        let mut g = graph();
        let x = g.leaf(Mat::row_vec(&[4.0, -1.0])).unwrap();
        assert!(matches!(g.sqrt(x), Err(DiffError::Domain { op: "sqrt", .. })));
    }

    #[test]
    fn recip_rejects_zero() {
        let mut g = graph();
        let x = g.scalar(0.0).unwrap();
        assert!(matches!(
            g.recip(x),
            Err(DiffError::Domain { op: "reciprocal", .. })
        ));
    }

    #[test]
    fn cross_entropy_matches_closed_forms() {
        let mut g = graph();
        let even = g.leaf(Mat::row_vec(&[0.0, 0.0])).unwrap();
        let ce = g.cross_entropy_logits(even, 0).unwrap();
        assert!((g.scalar_value(ce) - std::f64::consts::LN_2).abs() < 1e-12);

        let sat = g.leaf(Mat::row_vec(&[100.0, 0.0])).unwrap();
        let ce_ok = g.cross_entropy_logits(sat, 0).unwrap();
        assert!(g.scalar_value(ce_ok) < 1e-6);
        let ce_bad = g.cross_entropy_logits(sat, 1).unwrap();
        assert!((g.scalar_value(ce_bad) - 100.0).abs() < 1e-6);
    }

    #[test]
    fn slice_backward_scatters() {
        let mut g = graph();
        let x = g.leaf(Mat::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]])).unwrap();
        let col = g.slice(x, (0, 2), (1, 1)).unwrap();
        assert_eq!(g.value(col).data(), &[2.0, 5.0]);
        let s = g.sum(col, Axis::Both).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn forward_is_deterministic_bitwise() {
        let run = || {
            let mut g = graph();
            let x = g.leaf(Mat::row_vec(&[0.3, -1.7, 2.9])).unwrap();
            let s = g.sigmoid(x).unwrap();
            let n = g.norm_p(s, Norm::L2, Axis::Both).unwrap();
            g.scalar_value(n).to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn generic_over_f32_too() {
        let mut g: Graph<f32> = Graph::new();
        let x = g.leaf(Mat::row_vec(&[3.0f32, 4.0])).unwrap();
        let n = g.norm_p(x, Norm::L2, Axis::Both).unwrap();
        assert!((g.scalar_value(n) - 5.0).abs() < 1e-5);
    }
}
