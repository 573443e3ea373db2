//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! Nodes live in an arena owned by [`Graph`]; construction order is the
//! topological order, so the backward pass is a single reverse sweep.
//! Gradients accumulate additively across fan-out; callers reset them
//! between passes with [`Graph::zero_grads`].

use thiserror::Error;

use crate::matrix::Matrix;

pub type Result<T> = std::result::Result<T, AdError>;

#[derive(Debug, Error)]
pub enum AdError {
    #[error("{op}: shapes {a:?} and {b:?} do not conform")]
    ShapeMismatch {
        op: &'static str,
        a: (usize, usize),
        b: (usize, usize),
    },
    #[error("{op}: input contains a non-finite value")]
    NonFinite { op: &'static str },
    #[error("softmax: every position is masked")]
    EmptyAttention,
    #[error("{op}: expected a column vector, got {rows}x{cols}")]
    NotAVector {
        op: &'static str,
        rows: usize,
        cols: usize,
    },
    #[error("softmax: mask length {mask} does not match vector length {len}")]
    MaskLength { mask: usize, len: usize },
    #[error("backward: root must be 1x1, got {rows}x{cols}")]
    NonScalarRoot { rows: usize, cols: usize },
    #[error("embed_row: row {row} out of bounds for a {rows}-row table")]
    RowOutOfBounds { row: usize, rows: usize },
    #[error("concat_cols: at least one input required")]
    EmptyConcat,
    #[error("bce: {probs} probabilities but {labels} labels")]
    LabelMismatch { probs: usize, labels: usize },
}

/// Handle into a [`Graph`]'s node arena.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Sigmoid,
    Tanh,
    Exp,
    Negate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Hadamard,
    Matmul,
    /// Stack vertically: (m1 x n) over (m2 x n) -> (m1+m2 x n).
    ConcatRows,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Unary {
        kind: UnaryKind,
        x: NodeId,
    },
    Binary {
        kind: BinaryKind,
        a: NodeId,
        b: NodeId,
    },
    /// Masked, max-shifted softmax over a column vector.
    Softmax {
        x: NodeId,
        mask: Vec<bool>,
    },
    /// One row of a table, returned as a column vector.
    EmbedRow {
        table: NodeId,
        row: usize,
    },
    Transpose {
        x: NodeId,
    },
    /// Side-by-side concatenation of equal-height inputs.
    ConcatCols {
        xs: Vec<NodeId>,
    },
    /// Mean binary cross entropy of a probability column against labels,
    /// with probabilities clamped to [eps, 1-eps].
    Bce {
        probs: NodeId,
        labels: Vec<f64>,
    },
}

struct Node {
    value: Matrix,
    grad: Matrix,
    op: Op,
    requires_grad: bool,
    has_grad: bool,
}

/// Probability clamp used by the cross-entropy op.
pub const BCE_CLAMP: f64 = 1e-12;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
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

    pub fn grad(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].grad
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> NodeId {
        let grad = Matrix::zeros(value.rows(), value.cols());
        self.nodes.push(Node {
            value,
            grad,
            op,
            requires_grad,
            has_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Insert a source node. `requires_grad` marks trainable parameters.
    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn apply_unary(&mut self, kind: UnaryKind, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if !xv.all_finite() {
            return Err(AdError::NonFinite {
                op: match kind {
                    UnaryKind::Sigmoid => "sigmoid",
                    UnaryKind::Tanh => "tanh",
                    UnaryKind::Exp => "exp",
                    UnaryKind::Negate => "negate",
                },
            });
        }
        let value = match kind {
            UnaryKind::Sigmoid => xv.map(sigmoid),
            UnaryKind::Tanh => xv.map(f64::tanh),
            UnaryKind::Exp => xv.map(f64::exp),
            UnaryKind::Negate => xv.map(|v| -v),
        };
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::Unary { kind, x }, rg))
    }

    pub fn apply_binary(&mut self, kind: BinaryKind, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let conforms = match kind {
            BinaryKind::Add | BinaryKind::Sub | BinaryKind::Hadamard => av.shape() == bv.shape(),
            BinaryKind::Matmul => av.cols() == bv.rows(),
            BinaryKind::ConcatRows => av.cols() == bv.cols(),
        };
        if !conforms {
            return Err(AdError::ShapeMismatch {
                op: match kind {
                    BinaryKind::Add => "add",
                    BinaryKind::Sub => "sub",
                    BinaryKind::Hadamard => "hadamard",
                    BinaryKind::Matmul => "matmul",
                    BinaryKind::ConcatRows => "concat_rows",
                },
                a: av.shape(),
                b: bv.shape(),
            });
        }
        let value = match kind {
            BinaryKind::Add => av.zip_map(bv, |x, y| x + y),
            BinaryKind::Sub => av.zip_map(bv, |x, y| x - y),
            BinaryKind::Hadamard => av.zip_map(bv, |x, y| x * y),
            BinaryKind::Matmul => av.matmul(bv),
            BinaryKind::ConcatRows => {
                let mut data = Vec::with_capacity(av.len() + bv.len());
                data.extend_from_slice(av.data());
                data.extend_from_slice(bv.data());
                Matrix::from_vec(av.rows() + bv.rows(), av.cols(), data)
            }
        };
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(value, Op::Binary { kind, a, b }, rg))
    }

    /// Masked softmax over a column vector, computed with max-subtraction.
    /// Masked positions are exactly zero in the output.
    pub fn softmax_normalize(&mut self, logits: NodeId, mask: &[bool]) -> Result<NodeId> {
        let xv = self.value(logits);
        if !xv.is_column() {
            return Err(AdError::NotAVector {
                op: "softmax",
                rows: xv.rows(),
                cols: xv.cols(),
            });
        }
        if mask.len() != xv.rows() {
            return Err(AdError::MaskLength {
                mask: mask.len(),
                len: xv.rows(),
            });
        }
        if !xv.all_finite() {
            return Err(AdError::NonFinite { op: "softmax" });
        }
        if !mask.iter().any(|&m| m) {
            return Err(AdError::EmptyAttention);
        }
        let data = xv.data();
        let max = data
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(&v, _)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut out = vec![0.0; data.len()];
        let mut denom = 0.0;
        for i in 0..data.len() {
            if mask[i] {
                out[i] = (data[i] - max).exp();
                denom += out[i];
            }
        }
        for (o, &m) in out.iter_mut().zip(mask) {
            if m {
                *o /= denom;
            }
        }
        let rg = self.requires_grad(logits);
        Ok(self.push(
            Matrix::from_vec(data.len(), 1, out),
            Op::Softmax {
                x: logits,
                mask: mask.to_vec(),
            },
            rg,
        ))
    }

    /// Row `row` of `table` as a column vector.
    pub fn embed_row(&mut self, table: NodeId, row: usize) -> Result<NodeId> {
        let tv = self.value(table);
        if row >= tv.rows() {
            return Err(AdError::RowOutOfBounds {
                row,
                rows: tv.rows(),
            });
        }
        let value = Matrix::column(tv.row(row));
        let rg = self.requires_grad(table);
        Ok(self.push(value, Op::EmbedRow { table, row }, rg))
    }

    pub fn transpose(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).transpose();
        let rg = self.requires_grad(x);
        self.push(value, Op::Transpose { x }, rg)
    }

    /// Concatenate equal-height matrices side by side.
    pub fn concat_cols(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let first = *xs.first().ok_or(AdError::EmptyConcat)?;
        let rows = self.value(first).rows();
        let mut cols = 0;
        for &x in xs {
            let v = self.value(x);
            if v.rows() != rows {
                return Err(AdError::ShapeMismatch {
                    op: "concat_cols",
                    a: (rows, cols),
                    b: v.shape(),
                });
            }
            cols += v.cols();
        }
        let mut out = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &x in xs {
            let v = self.value(x).clone();
            for r in 0..rows {
                for c in 0..v.cols() {
                    out.set(r, offset + c, v.get(r, c));
                }
            }
            offset += v.cols();
        }
        let rg = xs.iter().any(|&x| self.requires_grad(x));
        Ok(self.push(out, Op::ConcatCols { xs: xs.to_vec() }, rg))
    }

    /// Mean binary cross entropy of a probability column vector against
    /// `labels` in {0,1}; probabilities are clamped to `[BCE_CLAMP, 1-BCE_CLAMP]`.
    pub fn bce_loss(&mut self, probs: NodeId, labels: &[f64]) -> Result<NodeId> {
        let pv = self.value(probs);
        if !pv.is_column() {
            return Err(AdError::NotAVector {
                op: "bce",
                rows: pv.rows(),
                cols: pv.cols(),
            });
        }
        if pv.rows() != labels.len() {
            return Err(AdError::LabelMismatch {
                probs: pv.rows(),
                labels: labels.len(),
            });
        }
        let n = labels.len() as f64;
        let mut total = 0.0;
        for (&p, &y) in pv.data().iter().zip(labels) {
            let pc = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            total -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
        }
        let rg = self.requires_grad(probs);
        Ok(self.push(
            Matrix::from_vec(1, 1, vec![total / n]),
            Op::Bce {
                probs,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    // ── Convenience wrappers ─────────────────────────────────────────

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply_unary(UnaryKind::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.apply_unary(UnaryKind::Tanh, x)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply_binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply_binary(BinaryKind::Sub, a, b)
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply_binary(BinaryKind::Hadamard, a, b)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply_binary(BinaryKind::Matmul, a, b)
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply_binary(BinaryKind::ConcatRows, a, b)
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reset all gradients to zero.
    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad.fill(0.0);
            node.has_grad = false;
        }
    }

    fn accumulate(&mut self, id: NodeId, contribution: &Matrix) {
        let node = &mut self.nodes[id.0];
        node.grad.add_assign(contribution);
        node.has_grad = true;
    }

    /// Propagate `d root / d node` into every node reachable from `root`.
    /// Gradients add up across fan-out and across repeated calls; use
    /// [`Graph::zero_grads`] between passes.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        {
            let rv = self.value(root);
            if !rv.is_scalar() {
                return Err(AdError::NonScalarRoot {
                    rows: rv.rows(),
                    cols: rv.cols(),
                });
            }
        }
        self.accumulate(root, &Matrix::from_vec(1, 1, vec![1.0]));

        for i in (0..=root.0).rev() {
            if !self.nodes[i].has_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let g = self.nodes[i].grad.clone();
            match op {
                Op::Leaf => {}
                Op::Unary { kind, x } => {
                    let contribution = match kind {
                        UnaryKind::Sigmoid => {
                            // d sigma = sigma (1 - sigma), from the output value
                            self.nodes[i].value.zip_map(&g, |s, gi| gi * s * (1.0 - s))
                        }
                        UnaryKind::Tanh => {
                            self.nodes[i].value.zip_map(&g, |t, gi| gi * (1.0 - t * t))
                        }
                        UnaryKind::Exp => self.nodes[i].value.zip_map(&g, |e, gi| gi * e),
                        UnaryKind::Negate => g.map(|v| -v),
                    };
                    self.accumulate(x, &contribution);
                }
                Op::Binary { kind, a, b } => match kind {
                    BinaryKind::Add => {
                        self.accumulate(a, &g);
                        self.accumulate(b, &g);
                    }
                    BinaryKind::Sub => {
                        self.accumulate(a, &g);
                        let neg = g.map(|v| -v);
                        self.accumulate(b, &neg);
                    }
                    BinaryKind::Hadamard => {
                        let da = g.zip_map(self.value(b), |gi, bv| gi * bv);
                        let db = g.zip_map(self.value(a), |gi, av| gi * av);
                        self.accumulate(a, &da);
                        self.accumulate(b, &db);
                    }
                    BinaryKind::Matmul => {
                        let da = g.matmul(&self.value(b).transpose());
                        let db = self.value(a).transpose().matmul(&g);
                        self.accumulate(a, &da);
                        self.accumulate(b, &db);
                    }
                    BinaryKind::ConcatRows => {
                        let a_rows = self.value(a).rows();
                        let cols = g.cols();
                        let da = Matrix::from_vec(a_rows, cols, g.data()[..a_rows * cols].to_vec());
                        let db = Matrix::from_vec(
                            g.rows() - a_rows,
                            cols,
                            g.data()[a_rows * cols..].to_vec(),
                        );
                        self.accumulate(a, &da);
                        self.accumulate(b, &db);
                    }
                },
                Op::Softmax { x, mask } => {
                    // dx_u = y_u (g_u - sum_v g_v y_v) over unmasked entries
                    let y = &self.nodes[i].value;
                    let dot: f64 = y
                        .data()
                        .iter()
                        .zip(g.data())
                        .zip(&mask)
                        .filter(|(_, &m)| m)
                        .map(|((&yi, &gi), _)| yi * gi)
                        .sum();
                    let mut dx = Matrix::zeros(y.rows(), 1);
                    for (r, &m) in mask.iter().enumerate() {
                        if m {
                            dx.set(r, 0, y.get(r, 0) * (g.get(r, 0) - dot));
                        }
                    }
                    self.accumulate(x, &dx);
                }
                Op::EmbedRow { table, row } => {
                    let cols = self.value(table).cols();
                    let mut dt = Matrix::zeros(self.value(table).rows(), cols);
                    for c in 0..cols {
                        dt.set(row, c, g.get(c, 0));
                    }
                    self.accumulate(table, &dt);
                }
                Op::Transpose { x } => {
                    let dx = g.transpose();
                    self.accumulate(x, &dx);
                }
                Op::ConcatCols { xs } => {
                    let mut offset = 0;
                    for x in xs {
                        let (rows, cols) = self.value(x).shape();
                        let mut dx = Matrix::zeros(rows, cols);
                        for r in 0..rows {
                            for c in 0..cols {
                                dx.set(r, c, g.get(r, offset + c));
                            }
                        }
                        offset += cols;
                        self.accumulate(x, &dx);
                    }
                }
                Op::Bce { probs, labels } => {
                    let n = labels.len() as f64;
                    let gs = g.scalar();
                    let pv = self.value(probs);
                    let mut dp = Matrix::zeros(pv.rows(), 1);
                    for (r, (&p, &y)) in pv.data().iter().zip(&labels).enumerate() {
                        // No gradient through the clamp boundary.
                        if !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&p) {
                            continue;
                        }
                        dp.set(r, 0, gs * (-y / p + (1.0 - y) / (1.0 - p)) / n);
                    }
                    self.accumulate(probs, &dp);
                }
            }
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Central-difference gradient check.
///
/// `f` maps parameter values to a scalar along with the analytic gradient
/// of that scalar with respect to each parameter. Returns the maximum over
/// all parameter entries of `|analytic - numeric| / max(1, |analytic| + |numeric|)`.
pub fn finite_difference_check<F>(mut f: F, params: &[Matrix], eps: f64) -> f64
where
    F: FnMut(&[Matrix]) -> (f64, Vec<Matrix>),
{
    assert!(eps > 0.0, "eps must be positive");
    let (_, analytic) = f(params);
    assert_eq!(analytic.len(), params.len(), "one gradient per parameter");
    let mut worst = 0.0_f64;
    let mut work: Vec<Matrix> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        for idx in 0..param.len() {
            let orig = param.data()[idx];
            work[pi].data_mut()[idx] = orig + eps;
            let (loss_plus, _) = f(&work);
            work[pi].data_mut()[idx] = orig - eps;
            let (loss_minus, _) = f(&work);
            work[pi].data_mut()[idx] = orig;
            let numeric = (loss_plus - loss_minus) / (2.0 * eps);
            let a = analytic[pi].data()[idx];
            let rel = (a - numeric).abs() / 1.0_f64.max(a.abs() + numeric.abs());
            worst = worst.max(rel);
        }
    }
    worst
}
