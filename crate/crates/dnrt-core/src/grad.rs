//! Reverse-mode autodiff on a flat tape of matrix operations.
//!
//! The op set is small but closed over everything the entropy objective
//! needs, including differentiating through the Q factor of a QR
//! factorization. Gradients are accumulated in reverse topological order
//! (tape order), so results are deterministic.

use thiserror::Error;

use crate::linalg::{self, qr_decompose, stable_sum, LinalgError, Matrix};

/// Errors raised while building a graph or running backward.
#[derive(Debug, Error)]
pub enum GradError {
    #[error("{op}: shape mismatch, {left_rows}x{left_cols} vs {right_rows}x{right_cols}")]
    ShapeMismatch {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },
    #[error("{op}: expected a square matrix, got {rows}x{cols}")]
    NotSquare { op: &'static str, rows: usize, cols: usize },
    #[error("ln domain: non-positive value {value} at ({row}, {col})")]
    LnDomain { row: usize, col: usize, value: f64 },
    #[error("recip domain: zero at ({row}, {col})")]
    RecipDomain { row: usize, col: usize },
    #[error("div: zero divisor at ({row}, {col})")]
    DivByZero { row: usize, col: usize },
    #[error("loss must be a 1x1 matrix, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("block_diag requires at least one block")]
    EmptyBlockDiag,
    #[error("finite-difference probe produced a non-finite loss at parameter {param}, entry ({row}, {col})")]
    NonFiniteProbe { param: usize, row: usize, col: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    Div(NodeId, NodeId),
    Square(NodeId),
    Abs(NodeId),
    Exp(NodeId),
    Recip(NodeId),
    Ln(NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    SumAll(NodeId),
    SumRows(NodeId),
    SumCols(NodeId),
    DiagOf(NodeId),
    /// Q factor of a QR factorization; the R factor is cached for backward.
    QrQ { input: NodeId, r: Matrix },
    BlockDiag(Vec<NodeId>),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Matrix,
    requires_grad: bool,
}

/// Gradients of a scalar loss with respect to tape nodes.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient for `id`, or `None` when the loss does not depend on it.
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads[id.0].as_ref()
    }
}

/// Append-only operation tape; build a fresh one per training step.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable input; gradients flow back to it.
    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    /// Frozen input; treated as a constant by backward.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(Op::Constant, value, false)
    }

    /// Value computed at `id` during the forward pass.
    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Matrix, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn push_unary(&mut self, op: Op, input: NodeId, value: Matrix) -> NodeId {
        let rg = self.nodes[input.0].requires_grad;
        self.push(op, value, rg)
    }

    fn push_binary(&mut self, op: Op, a: NodeId, b: NodeId, value: Matrix) -> NodeId {
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        self.push(op, value, rg)
    }

    fn shape_err(
        op: &'static str,
        a: &Matrix,
        b: &Matrix,
    ) -> GradError {
        GradError::ShapeMismatch {
            op,
            left_rows: a.rows(),
            left_cols: a.cols(),
            right_rows: b.rows(),
            right_cols: b.cols(),
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        let value = linalg::matmul(self.value(a), self.value(b))?;
        Ok(self.push_binary(Op::MatMul(a, b), a, b, value))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).transpose();
        self.push_unary(Op::Transpose(a), a, value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        if self.value(a).dims() != self.value(b).dims() {
            return Err(Self::shape_err("add", self.value(a), self.value(b)));
        }
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push_binary(Op::Add(a, b), a, b, value))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        if self.value(a).dims() != self.value(b).dims() {
            return Err(Self::shape_err("sub", self.value(a), self.value(b)));
        }
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push_binary(Op::Sub(a, b), a, b, value))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        if self.value(a).dims() != self.value(b).dims() {
            return Err(Self::shape_err("hadamard", self.value(a), self.value(b)));
        }
        let value = self.value(a).hadamard(self.value(b))?;
        Ok(self.push_binary(Op::Hadamard(a, b), a, b, value))
    }

    /// Elementwise quotient; every divisor entry must be nonzero.
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        if self.value(a).dims() != self.value(b).dims() {
            return Err(Self::shape_err("div", self.value(a), self.value(b)));
        }
        let d = self.value(b);
        for i in 0..d.rows() {
            for j in 0..d.cols() {
                if d.at(i, j) == 0.0 {
                    return Err(GradError::DivByZero { row: i, col: j });
                }
            }
        }
        let value = self.value(a).divide(self.value(b))?;
        Ok(self.push_binary(Op::Div(a, b), a, b, value))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|v| v * v);
        self.push_unary(Op::Square(a), a, value)
    }

    /// Elementwise absolute value; the subgradient at zero is zero.
    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::abs);
        self.push_unary(Op::Abs(a), a, value)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::exp);
        self.push_unary(Op::Exp(a), a, value)
    }

    pub fn recip(&mut self, a: NodeId) -> Result<NodeId, GradError> {
        let v = self.value(a);
        for i in 0..v.rows() {
            for j in 0..v.cols() {
                if v.at(i, j) == 0.0 {
                    return Err(GradError::RecipDomain { row: i, col: j });
                }
            }
        }
        let value = v.map(|x| 1.0 / x);
        Ok(self.push_unary(Op::Recip(a), a, value))
    }

    pub fn ln(&mut self, a: NodeId) -> Result<NodeId, GradError> {
        let v = self.value(a);
        for i in 0..v.rows() {
            for j in 0..v.cols() {
                let x = v.at(i, j);
                if x <= 0.0 {
                    return Err(GradError::LnDomain { row: i, col: j, value: x });
                }
            }
        }
        let value = v.map(f64::ln);
        Ok(self.push_unary(Op::Ln(a), a, value))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).scale(-1.0);
        self.push_unary(Op::Neg(a), a, value)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let value = self.value(a).scale(s);
        self.push_unary(Op::Scale(a, s), a, value)
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> NodeId {
        let value = self.value(a).map(|v| v + s);
        self.push_unary(Op::AddScalar(a), a, value)
    }

    /// Sum of every entry, as a 1x1 matrix.
    ///
    /// The reduction is order-independent (see [`stable_sum`]), so inputs that
    /// hold the same multiset of values sum to bit-identical results.
    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = stable_sum(self.value(a).data());
        let value = Matrix::from_vec(1, 1, vec![s]).expect("finite sum");
        self.push_unary(Op::SumAll(a), a, value)
    }

    /// Row sums of an `r x c` input, as an `r x 1` matrix.
    ///
    /// Each row reduces with [`stable_sum`], so permuting the entries within a
    /// row leaves its sum bit-unchanged.
    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let mut out = Matrix::zeros(v.rows(), 1);
        for i in 0..v.rows() {
            out.set(i, 0, stable_sum(v.row(i)));
        }
        self.push_unary(Op::SumRows(a), a, out)
    }

    /// Column sums of an `r x c` input, as a `1 x c` matrix.
    ///
    /// Each column reduces with [`stable_sum`], so permuting the entries within
    /// a column leaves its sum bit-unchanged.
    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let mut out = Matrix::zeros(1, v.cols());
        let mut column = vec![0.0; v.rows()];
        for j in 0..v.cols() {
            for i in 0..v.rows() {
                column[i] = v.at(i, j);
            }
            out.set(0, j, stable_sum(&column));
        }
        self.push_unary(Op::SumCols(a), a, out)
    }

    /// Main diagonal of a square input, as an `n x 1` matrix.
    pub fn diag_of(&mut self, a: NodeId) -> Result<NodeId, GradError> {
        let v = self.value(a);
        if !v.is_square() {
            return Err(GradError::NotSquare { op: "diag_of", rows: v.rows(), cols: v.cols() });
        }
        let d = v.diag();
        let n = d.len();
        let value = Matrix::from_vec(n, 1, d).expect("finite diagonal");
        Ok(self.push_unary(Op::DiagOf(a), a, value))
    }

    /// Q factor of the QR factorization of a square input.
    ///
    /// Backward treats the factorization map as `a -> q` (the R factor is
    /// never consumed by a loss) and propagates
    /// `a_bar = q * tril(g - g^T, -1) * r^-T` with `g = q^T q_bar`.
    pub fn qr_q(&mut self, a: NodeId) -> Result<NodeId, GradError> {
        let f = qr_decompose(self.value(a))?;
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(Op::QrQ { input: a, r: f.r }, f.q, rg))
    }

    /// Block-diagonal assembly of square blocks, in order.
    pub fn block_diag(&mut self, blocks: &[NodeId]) -> Result<NodeId, GradError> {
        if blocks.is_empty() {
            return Err(GradError::EmptyBlockDiag);
        }
        let mut n = 0;
        for &b in blocks {
            let v = self.value(b);
            if !v.is_square() {
                return Err(GradError::NotSquare {
                    op: "block_diag",
                    rows: v.rows(),
                    cols: v.cols(),
                });
            }
            n += v.rows();
        }
        let mut value = Matrix::zeros(n, n);
        let mut off = 0;
        for &b in blocks {
            let v = self.value(b);
            for i in 0..v.rows() {
                for j in 0..v.cols() {
                    value.set(off + i, off + j, v.at(i, j));
                }
            }
            off += v.rows();
        }
        let rg = blocks.iter().any(|&b| self.nodes[b.0].requires_grad);
        Ok(self.push(Op::BlockDiag(blocks.to_vec()), value, rg))
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, GradError> {
        let loss_value = self.value(loss);
        if loss_value.dims() != (1, 1) {
            return Err(GradError::NonScalarLoss {
                rows: loss_value.rows(),
                cols: loss_value.cols(),
            });
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::ones(1, 1));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                if self.nodes[a.0].requires_grad {
                    let da = linalg::matmul(g, &vb.transpose()).expect("matmul backward a");
                    accumulate(grads, *a, da);
                }
                if self.nodes[b.0].requires_grad {
                    let db = linalg::matmul(&va.transpose(), g).expect("matmul backward b");
                    accumulate(grads, *b, db);
                }
            }
            Op::Transpose(a) => accumulate(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                if self.nodes[a.0].requires_grad {
                    accumulate(grads, *a, g.clone());
                }
                if self.nodes[b.0].requires_grad {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.nodes[a.0].requires_grad {
                    accumulate(grads, *a, g.clone());
                }
                if self.nodes[b.0].requires_grad {
                    accumulate(grads, *b, g.scale(-1.0));
                }
            }
            Op::Hadamard(a, b) => {
                if self.nodes[a.0].requires_grad {
                    let da = g.hadamard(self.value(*b)).expect("hadamard backward a");
                    accumulate(grads, *a, da);
                }
                if self.nodes[b.0].requires_grad {
                    let db = g.hadamard(self.value(*a)).expect("hadamard backward b");
                    accumulate(grads, *b, db);
                }
            }
            Op::Div(a, b) => {
                if self.nodes[a.0].requires_grad {
                    let da = g.divide(self.value(*b)).expect("div backward a");
                    accumulate(grads, *a, da);
                }
                if self.nodes[b.0].requires_grad {
                    let db = g
                        .hadamard(&node.value)
                        .expect("div backward b")
                        .divide(self.value(*b))
                        .expect("div backward b divisor")
                        .scale(-1.0);
                    accumulate(grads, *b, db);
                }
            }
            Op::Square(a) => {
                let da = g.hadamard(&self.value(*a).scale(2.0)).expect("square backward");
                accumulate(grads, *a, da);
            }
            Op::Abs(a) => {
                let sign = self.value(*a).map(|v| {
                    if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                });
                let da = g.hadamard(&sign).expect("abs backward");
                accumulate(grads, *a, da);
            }
            Op::Exp(a) => {
                let da = g.hadamard(&node.value).expect("exp backward");
                accumulate(grads, *a, da);
            }
            Op::Recip(a) => {
                let sq = node.value.hadamard(&node.value).expect("recip square");
                let da = g.hadamard(&sq).expect("recip backward").scale(-1.0);
                accumulate(grads, *a, da);
            }
            Op::Ln(a) => {
                let inv = self.value(*a).map(|v| 1.0 / v);
                let da = g.hadamard(&inv).expect("ln backward");
                accumulate(grads, *a, da);
            }
            Op::Neg(a) => accumulate(grads, *a, g.scale(-1.0)),
            Op::Scale(a, s) => accumulate(grads, *a, g.scale(*s)),
            Op::AddScalar(a) => accumulate(grads, *a, g.clone()),
            Op::SumAll(a) => {
                let v = self.value(*a);
                let da = Matrix::ones(v.rows(), v.cols()).scale(g.at(0, 0));
                accumulate(grads, *a, da);
            }
            Op::SumRows(a) => {
                let v = self.value(*a);
                let mut da = Matrix::zeros(v.rows(), v.cols());
                for i in 0..v.rows() {
                    let gi = g.at(i, 0);
                    for j in 0..v.cols() {
                        da.set(i, j, gi);
                    }
                }
                accumulate(grads, *a, da);
            }
            Op::SumCols(a) => {
                let v = self.value(*a);
                let mut da = Matrix::zeros(v.rows(), v.cols());
                for j in 0..v.cols() {
                    let gj = g.at(0, j);
                    for i in 0..v.rows() {
                        da.set(i, j, gj);
                    }
                }
                accumulate(grads, *a, da);
            }
            Op::DiagOf(a) => {
                let n = self.value(*a).rows();
                let mut da = Matrix::zeros(n, n);
                for i in 0..n {
                    da.set(i, i, g.at(i, 0));
                }
                accumulate(grads, *a, da);
            }
            Op::QrQ { input, r } => {
                let q = &node.value;
                let gm = linalg::matmul(&q.transpose(), g).expect("qr backward g");
                let n = gm.rows();
                // K = tril(G - G^T, -1), strictly lower.
                let mut k = Matrix::zeros(n, n);
                for i in 0..n {
                    for j in 0..i {
                        k.set(i, j, gm.at(i, j) - gm.at(j, i));
                    }
                }
                // X = K * R^-T solved as R X^T = K^T.
                let xt = linalg::solve_upper_triangular(r, &k.transpose())
                    .expect("qr backward triangular solve");
                let da = linalg::matmul(q, &xt.transpose()).expect("qr backward product");
                accumulate(grads, *input, da);
            }
            Op::BlockDiag(blocks) => {
                let mut off = 0;
                for &b in blocks {
                    let bn = self.value(b).rows();
                    if self.nodes[b.0].requires_grad {
                        let mut db = Matrix::zeros(bn, bn);
                        for i in 0..bn {
                            for j in 0..bn {
                                db.set(i, j, g.at(off + i, off + j));
                            }
                        }
                        accumulate(grads, b, db);
                    }
                    off += bn;
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], id: NodeId, delta: Matrix) {
    match &mut grads[id.0] {
        Some(existing) => {
            *existing = existing.add(&delta).expect("gradient accumulation shape");
        }
        slot @ None => *slot = Some(delta),
    }
}

/// Central-difference check of a scalar loss over one parameter matrix.
///
/// Returns the maximum entrywise relative error between the analytic
/// gradient and `(f(a + h) - f(a - h)) / 2h`, with the error normalized
/// by `max(|numeric|, 1e-8)`.
pub fn check_gradient<F>(f: F, at: &Matrix, step: f64) -> Result<f64, GradError>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId, GradError>,
{
    check_gradient_multi(
        |tape, leaves| f(tape, leaves[0]),
        std::slice::from_ref(at),
        step,
    )
}

/// Central-difference check over several parameter matrices at once.
pub fn check_gradient_multi<F>(f: F, at: &[Matrix], step: f64) -> Result<f64, GradError>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId, GradError>,
{
    let mut tape = Tape::new();
    let leaves: Vec<NodeId> = at.iter().map(|m| tape.leaf(m.clone())).collect();
    let loss = f(&mut tape, &leaves)?;
    let grads = tape.backward(loss)?;

    let eval = |params: &[Matrix]| -> Result<f64, GradError> {
        let mut t = Tape::new();
        let ids: Vec<NodeId> = params.iter().map(|m| t.leaf(m.clone())).collect();
        let l = f(&mut t, &ids)?;
        Ok(t.value(l).at(0, 0))
    };

    let mut worst = 0.0f64;
    let mut probe: Vec<Matrix> = at.to_vec();
    for (p, base) in at.iter().enumerate() {
        for i in 0..base.rows() {
            for j in 0..base.cols() {
                let orig = base.at(i, j);
                probe[p].set(i, j, orig + step);
                let plus = eval(&probe)?;
                probe[p].set(i, j, orig - step);
                let minus = eval(&probe)?;
                probe[p].set(i, j, orig);
                if !plus.is_finite() || !minus.is_finite() {
                    return Err(GradError::NonFiniteProbe { param: p, row: i, col: j });
                }
                let numeric = (plus - minus) / (2.0 * step);
                let analytic = grads
                    .get(leaves[p])
                    .map_or(0.0, |g| g.at(i, j));
                let denom = numeric.abs().max(1e-8);
                worst = worst.max((analytic - numeric).abs() / denom);
            }
        }
    }
    Ok(worst)
}

/// Adam optimizer state for one parameter matrix.
#[derive(Debug, Clone)]
pub struct AdamState {
    t: u64,
    m: Matrix,
    v: Matrix,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl AdamState {
    /// Fresh state with zero moments; betas 0.9 / 0.999, epsilon 1e-8.
    pub fn new(rows: usize, cols: usize, lr: f64) -> Self {
        AdamState {
            t: 0,
            m: Matrix::zeros(rows, cols),
            v: Matrix::zeros(rows, cols),
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Steps taken so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One bias-corrected update; returns the new parameter values.
    ///
    /// Epsilon enters the denominator after the square root:
    /// `p - lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(&mut self, param: &Matrix, grad: &Matrix) -> Result<Matrix, GradError> {
        if param.dims() != self.m.dims() || grad.dims() != self.m.dims() {
            return Err(GradError::ShapeMismatch {
                op: "adam_step",
                left_rows: param.rows(),
                left_cols: param.cols(),
                right_rows: grad.rows(),
                right_cols: grad.cols(),
            });
        }
        self.t += 1;
        let b1 = self.beta1;
        let b2 = self.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let mut out = param.clone();
        for i in 0..param.rows() {
            for j in 0..param.cols() {
                let g = grad.at(i, j);
                let m = b1 * self.m.at(i, j) + (1.0 - b1) * g;
                let v = b2 * self.v.at(i, j) + (1.0 - b2) * g * g;
                self.m.set(i, j, m);
                self.v.set(i, j, v);
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                out.set(i, j, param.at(i, j) - self.lr * m_hat / (v_hat.sqrt() + self.eps));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::random::{gaussian_matrix, seeded_rng};

    #[test]
    fn matmul_backward_matches_closed_form() {
        // loss = sum(A B); dA = ones * B^T, dB = A^T * ones.
        let mut rng = seeded_rng(11);
        let a = gaussian_matrix(&mut rng, 3, 4);
        let b = gaussian_matrix(&mut rng, 4, 2);
        let mut tape = Tape::new();
        let na = tape.leaf(a.clone());
        let nb = tape.leaf(b.clone());
        let prod = tape.matmul(na, nb).unwrap();
        let loss = tape.sum_all(prod);
        let grads = tape.backward(loss).unwrap();
        let ones = Matrix::ones(3, 2);
        let da = linalg::matmul(&ones, &b.transpose()).unwrap();
        let db = linalg::matmul(&a.transpose(), &ones).unwrap();
        assert!(grads.get(na).unwrap().max_abs_diff(&da) < 1e-14);
        assert!(grads.get(nb).unwrap().max_abs_diff(&db) < 1e-14);
    }

    #[test]
    fn sum_of_squares_gradient_is_tight() {
        let a = gaussian_matrix(&mut seeded_rng(3), 3, 3);
        let err = check_gradient(
            |tape, x| {
                let sq = tape.square(x);
                Ok(tape.sum_all(sq))
            },
            &a,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-8, "sum-of-squares FD error {err}");
    }

    #[test]
    fn log_sum_exp_gradient() {
        let a = gaussian_matrix(&mut seeded_rng(4), 4, 4);
        let err = check_gradient(
            |tape, x| {
                let e = tape.exp(x);
                let s = tape.sum_all(e);
                tape.ln(s)
            },
            &a,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "log-sum-exp FD error {err}");
    }

    #[test]
    fn abs_gradient_away_from_zero() {
        let a = Matrix::from_rows(&[vec![1.5, -2.0], vec![-0.25, 3.0]]).unwrap();
        let err = check_gradient(
            |tape, x| {
                let v = tape.abs(x);
                Ok(tape.sum_all(v))
            },
            &a,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-9, "abs FD error {err}");
    }

    #[test]
    fn abs_subgradient_at_zero_is_zero() {
        let a = Matrix::zeros(2, 2);
        let mut tape = Tape::new();
        let x = tape.leaf(a);
        let v = tape.abs(x);
        let loss = tape.sum_all(v);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn axis_sums_and_broadcast_chain_gradient() {
        let a = gaussian_matrix(&mut seeded_rng(5), 3, 5).map(|v| v.abs() + 0.5);
        let err = check_gradient(
            |tape, x| {
                let rs = tape.sum_rows(x);
                let lrs = tape.ln(rs)?;
                let cs = tape.sum_cols(x);
                let lcs = tape.ln(cs)?;
                let s1 = tape.sum_all(lrs);
                let s2 = tape.sum_all(lcs);
                tape.add(s1, s2)
            },
            &a,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-6, "axis-sum FD error {err}");
    }

    #[test]
    fn recip_and_hadamard_gradient() {
        let a = gaussian_matrix(&mut seeded_rng(6), 4, 4).map(|v| v.abs() + 1.0);
        let err = check_gradient(
            |tape, x| {
                let r = tape.recip(x)?;
                let p = tape.hadamard(r, x)?;
                let d = tape.sub(p, r)?;
                Ok(tape.sum_all(d))
            },
            &a,
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-6, "recip chain FD error {err}");
    }

    #[test]
    fn div_gradient_matches_finite_differences_in_both_arguments() {
        let a = gaussian_matrix(&mut seeded_rng(31), 3, 4);
        let b = gaussian_matrix(&mut seeded_rng(32), 3, 4).map(|v| v.abs() + 0.5);
        let err = check_gradient_multi(
            |tape, xs| {
                let q = tape.div(xs[0], xs[1])?;
                let s = tape.square(q);
                Ok(tape.sum_all(s))
            },
            &[a, b],
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-6, "div FD error {err}");
    }

    #[test]
    fn div_rejects_zero_divisor() {
        let mut tape = Tape::new();
        let a = tape.leaf(Matrix::ones(2, 2));
        let b = tape.leaf(Matrix::from_vec(2, 2, vec![1.0, 2.0, 0.0, 3.0]).unwrap());
        match tape.div(a, b) {
            Err(GradError::DivByZero { row: 1, col: 0 }) => {}
            other => panic!("expected DivByZero, got {other:?}"),
        }
    }

    #[test]
    fn diag_of_gradient_touches_only_diagonal() {
        let a = gaussian_matrix(&mut seeded_rng(7), 4, 4);
        let mut tape = Tape::new();
        let x = tape.leaf(a);
        let d = tape.diag_of(x).unwrap();
        let loss = tape.sum_all(d);
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(x).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert_eq!(g.at(i, j), expect);
            }
        }
    }

    #[test]
    fn qr_q_gradient_matches_finite_differences() {
        // Two traps to avoid here: a plain Frobenius norm of W*Q is
        // orthogonally invariant (zero gradient), and the last column of
        // A never influences Q, so a Q-only loss leaves those entries
        // with exact-zero gradients that drown in FD noise. A quartic
        // term exercises the QR rule; a direct linear term in A keeps
        // every entry's gradient well away from zero.
        let a = gaussian_matrix(&mut seeded_rng(8), 6, 6);
        let w = gaussian_matrix(&mut seeded_rng(9), 6, 6);
        let probe = gaussian_matrix(&mut seeded_rng(14), 6, 6);
        let err = check_gradient(
            |tape, x| {
                let q = tape.qr_q(x)?;
                let c = tape.constant(w.clone());
                let p = tape.matmul(c, q)?;
                let s2 = tape.square(p);
                let s4 = tape.square(s2);
                let quartic_full = tape.sum_all(s4);
                let quartic = tape.scale(quartic_full, 0.01);
                let cp = tape.constant(probe.clone());
                let lin_term = tape.hadamard(cp, x)?;
                let linear = tape.sum_all(lin_term);
                tape.add(quartic, linear)
            },
            &a,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-5, "QR-Q FD error {err}");
    }

    #[test]
    fn qr_q_gradient_last_column_is_structurally_zero() {
        // Q depends on A's last column only through the positive-diagonal
        // sign convention, which is locally constant, so any loss that
        // consumes Q alone has an exactly zero gradient there.
        let a = gaussian_matrix(&mut seeded_rng(15), 5, 5);
        let w = gaussian_matrix(&mut seeded_rng(16), 5, 5);
        let mut tape = Tape::new();
        let x = tape.leaf(a);
        let q = tape.qr_q(x).unwrap();
        let c = tape.constant(w);
        let p = tape.matmul(c, q).unwrap();
        let s2 = tape.square(p);
        let s4 = tape.square(s2);
        let loss = tape.sum_all(s4);
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(x).unwrap();
        for i in 0..5 {
            assert_eq!(g.at(i, 4), 0.0, "gradient w.r.t. A's last column must vanish");
        }
        assert!(g.max_abs() > 1e-3, "gradient should be nonzero elsewhere");
    }

    #[test]
    fn entropy_of_normalized_squared_q_gradient() {
        // Normalized over the whole matrix: p = q^2 / sum(q^2), loss = -sum p ln p,
        // plus a linear term in A so no gradient entry is structurally zero.
        let a = gaussian_matrix(&mut seeded_rng(10), 8, 8);
        let probe = gaussian_matrix(&mut seeded_rng(17), 8, 8);
        let err = check_gradient(
            |tape, x| {
                let q = tape.qr_q(x)?;
                let s = tape.square(q);
                let se = tape.add_scalar(s, 1e-12);
                let total = tape.sum_all(se);
                let tot_rec = tape.recip(total)?;
                let n = tape.value(se).rows();
                let m = tape.value(se).cols();
                let col_ones = tape.constant(Matrix::ones(n, 1));
                let row_ones = tape.constant(Matrix::ones(1, m));
                let rec_row = tape.matmul(tot_rec, row_ones)?;
                let denom = tape.matmul(col_ones, rec_row)?;
                let p = tape.hadamard(se, denom)?;
                let lp = tape.ln(p)?;
                let plp = tape.hadamard(p, lp)?;
                let tot = tape.sum_all(plp);
                let entropy = tape.neg(tot);
                let cp = tape.constant(probe.clone());
                let lin_term = tape.hadamard(cp, x)?;
                let linear = tape.sum_all(lin_term);
                tape.add(entropy, linear)
            },
            &a,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "entropy-of-Q FD error {err}");
    }

    #[test]
    fn block_diag_gradient_routes_to_blocks() {
        let b1 = gaussian_matrix(&mut seeded_rng(12), 2, 2);
        let b2 = gaussian_matrix(&mut seeded_rng(13), 3, 3);
        let err = check_gradient_multi(
            |tape, leaves| {
                let bd = tape.block_diag(leaves)?;
                let s = tape.square(bd);
                Ok(tape.sum_all(s))
            },
            &[b1, b2],
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-8, "block-diag FD error {err}");
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::ones(2, 2));
        let y = tape.square(x);
        match tape.backward(y) {
            Err(GradError::NonScalarLoss { rows: 2, cols: 2 }) => {}
            other => panic!("expected NonScalarLoss, got {other:?}"),
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::ones(2, 2));
        let c = tape.constant(Matrix::ones(2, 2));
        let p = tape.hadamard(x, c).unwrap();
        let loss = tape.sum_all(p);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(c).is_none(), "constant must not accumulate gradient");
        assert!(grads.get(x).is_some());
    }

    #[test]
    fn ln_rejects_non_positive_input() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::from_rows(&[vec![1.0, -2.0]]).unwrap());
        match tape.ln(x) {
            Err(GradError::LnDomain { row: 0, col: 1, .. }) => {}
            other => panic!("expected LnDomain, got {other:?}"),
        }
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let lr = 0.01;
        let mut state = AdamState::new(1, 1, lr);
        let param = Matrix::from_rows(&[vec![5.0]]).unwrap();
        let grad = Matrix::from_rows(&[vec![1000.0]]).unwrap();
        let updated = state.step(&param, &grad).unwrap();
        let delta = param.at(0, 0) - updated.at(0, 0);
        assert!(
            (delta - lr).abs() <= 1e-12,
            "first Adam step should move by ~lr, moved {delta}"
        );
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let mut state = AdamState::new(2, 2, 0.05);
        let param = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let zero = Matrix::zeros(2, 2);
        let updated = state.step(&param, &zero).unwrap();
        assert_eq!(updated, param, "zero gradient must leave parameters unchanged");
        assert_eq!(state.steps(), 1, "step counter must still advance");
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut state = AdamState::new(1, 1, 0.1);
        let mut p = Matrix::from_rows(&[vec![3.0]]).unwrap();
        for _ in 0..500 {
            let g = p.scale(2.0);
            p = state.step(&p, &g).unwrap();
        }
        assert!(p.at(0, 0).abs() < 1e-2, "Adam failed to approach the minimum: {}", p.at(0, 0));
    }
}
