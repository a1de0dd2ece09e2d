//! Entropy-minimizing rotation training for one transformer layer.
//!
//! A [`LayerBundle`] holds the seven linear projections of a decoder layer
//! together with their calibration second moments. [`train_rotations`] fits
//! an orthogonal pair: a residual-stream rotation shared by every
//! projection and a per-head rotation inside the value/output path. Both
//! are reparameterized through the Q factor of a QR factorization, so the
//! optimizer walks an unconstrained parameter space while the applied
//! rotations stay orthogonal to machine precision at every step.
//!
//! The objective is the summed Shannon entropy of each normalization
//! group of the squared-convention importance scores: concentrating
//! importance into few coordinates lowers entropy, and rows or columns
//! that a rotation can mix form the groups.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grad::{AdamState, GradError, NodeId, Tape};
use crate::importance::{
    score_rotated, score_squared_convention, GroupLayout, ImportanceError, Metric, RotationCase,
    ORTHO_TOL,
};
use crate::linalg::{stable_sum, LinalgError, Matrix};

/// Slack added to the `ln n` upper bound when checking per-group entropies.
const ENTROPY_BOUND_TOL: f64 = 1e-9;

/// Errors raised while assembling bundles or training rotations.
#[derive(Debug, Error)]
pub enum DenoiseError {
    #[error("a layer bundle needs exactly 7 linears, got {got}")]
    WrongLinearCount { got: usize },
    #[error("linear {index} must be {expected}, got {got}")]
    WrongLinearOrder { index: usize, expected: LinearKind, got: LinearKind },
    #[error("{kind} weight must be {expected_rows}x{expected_cols}, got {rows}x{cols}")]
    WeightShape {
        kind: LinearKind,
        expected_rows: usize,
        expected_cols: usize,
        rows: usize,
        cols: usize,
    },
    #[error("{kind} second moment must be {expected}x{expected}, got {rows}x{cols}")]
    HessianShape { kind: LinearKind, expected: usize, rows: usize, cols: usize },
    #[error("value width {value_dim} is not divisible by {n_heads} heads")]
    HeadDivisibility { value_dim: usize, n_heads: usize },
    #[error("hidden width {hidden_dim} is not divisible into {block_count} blocks")]
    BlockDivisibility { hidden_dim: usize, block_count: usize },
    #[error("head width {head_dim} is not divisible into blocks of {block}")]
    HeadBlockDivisibility { head_dim: usize, block: usize },
    #[error("{which} dimension must be positive")]
    ZeroDimension { which: &'static str },
    #[error("block count must be at least 1")]
    ZeroBlockCount,
    #[error("learning rate must be positive and finite, got {lr}")]
    BadLearningRate { lr: f64 },
    #[error("entropy floor epsilon must be non-negative and finite, got {epsilon}")]
    BadEpsilon { epsilon: f64 },
    #[error(
        "rotation pair ({pair_hidden}, {pair_value}, {pair_heads} heads) does not fit \
         bundle ({bundle_hidden}, {bundle_value}, {bundle_heads} heads)"
    )]
    PairBundleMismatch {
        pair_hidden: usize,
        pair_value: usize,
        pair_heads: usize,
        bundle_hidden: usize,
        bundle_value: usize,
        bundle_heads: usize,
    },
    #[error("importance scores must be non-negative, got {value} at ({row}, {col})")]
    NegativeScore { row: usize, col: usize, value: f64 },
    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("{which} drifted off the orthogonal manifold at step {step}: error {error}")]
    OrthogonalityLost { step: usize, which: &'static str, error: f64 },
    #[error(
        "{kind} {axis} group {index} entropy {entropy} left [0, {limit}] at step {step}"
    )]
    EntropyOutOfBounds {
        step: usize,
        kind: LinearKind,
        axis: &'static str,
        index: usize,
        entropy: f64,
        limit: f64,
    },
    #[error("block {index} must be square, got {rows}x{cols}")]
    NonSquareBlock { index: usize, rows: usize, cols: usize },
    #[error("block {index} is not orthogonal: error {error}")]
    NonOrthogonalBlock { index: usize, error: f64 },
    #[error("{which} must be exactly zero outside its diagonal blocks, got {value} at ({row}, {col})")]
    BlockStructure { which: &'static str, row: usize, col: usize, value: f64 },
    #[error("{which} is not orthogonal: error {error}")]
    NotOrthogonal { which: &'static str, error: f64 },
    #[error("{which} expects {expected} parameter blocks, got {got}")]
    ParameterCount { which: &'static str, expected: usize, got: usize },
    #[error("{which} block {index} must be {expected}x{expected}, got {rows}x{cols}")]
    ParameterShape {
        which: &'static str,
        index: usize,
        expected: usize,
        rows: usize,
        cols: usize,
    },
    #[error(transparent)]
    Importance(#[from] ImportanceError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// The seven linear projections of a decoder layer, in bundle order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinearKind {
    Query,
    Key,
    Value,
    Output,
    Gate,
    Up,
    Down,
}

impl LinearKind {
    /// Canonical bundle order.
    pub const ALL: [LinearKind; 7] = [
        LinearKind::Query,
        LinearKind::Key,
        LinearKind::Value,
        LinearKind::Output,
        LinearKind::Gate,
        LinearKind::Up,
        LinearKind::Down,
    ];

    /// How the trained rotations touch this projection.
    pub fn rotation_case(self) -> RotationCase {
        match self {
            LinearKind::Query | LinearKind::Key | LinearKind::Gate | LinearKind::Up => {
                RotationCase::RightOnly
            }
            LinearKind::Value => RotationCase::TwoSidedValue,
            LinearKind::Output => RotationCase::TwoSidedOutput,
            LinearKind::Down => RotationCase::LeftOnly,
        }
    }

    /// Lowercase name used in reports and error messages.
    pub fn label(self) -> &'static str {
        match self {
            LinearKind::Query => "query",
            LinearKind::Key => "key",
            LinearKind::Value => "value",
            LinearKind::Output => "output",
            LinearKind::Gate => "gate",
            LinearKind::Up => "up",
            LinearKind::Down => "down",
        }
    }
}

impl std::fmt::Display for LinearKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// One projection's weight and input second moment.
#[derive(Debug, Clone)]
pub struct BundleEntry {
    kind: LinearKind,
    weight: Matrix,
    hessian: Matrix,
    hessian_inverse: Option<Matrix>,
}

impl BundleEntry {
    /// Pairs a weight with its input second moment; shapes are checked when
    /// the entry joins a [`LayerBundle`].
    pub fn new(kind: LinearKind, weight: Matrix, hessian: Matrix) -> Self {
        BundleEntry { kind, weight, hessian, hessian_inverse: None }
    }

    pub fn kind(&self) -> LinearKind {
        self.kind
    }

    pub fn weight(&self) -> &Matrix {
        &self.weight
    }

    pub fn hessian(&self) -> &Matrix {
        &self.hessian
    }
}

/// A decoder layer's seven projections plus the importance metric to train
/// against.
#[derive(Debug, Clone)]
pub struct LayerBundle {
    entries: Vec<BundleEntry>,
    metric: Metric,
    hidden_dim: usize,
    value_dim: usize,
    n_heads: usize,
    ffn_dim: usize,
}

impl LayerBundle {
    /// Validates shapes and order (query, key, value, output, gate, up,
    /// down) and precomputes the damped inverse second moments that the
    /// `sparsegpt` metric scores against.
    pub fn new(
        entries: Vec<BundleEntry>,
        metric: Metric,
        n_heads: usize,
    ) -> Result<Self, DenoiseError> {
        if entries.len() != LinearKind::ALL.len() {
            return Err(DenoiseError::WrongLinearCount { got: entries.len() });
        }
        for (index, entry) in entries.iter().enumerate() {
            let expected = LinearKind::ALL[index];
            if entry.kind != expected {
                return Err(DenoiseError::WrongLinearOrder { index, expected, got: entry.kind });
            }
        }
        if n_heads == 0 {
            return Err(DenoiseError::ZeroDimension { which: "n_heads" });
        }
        let hidden_dim = entries[0].weight.cols();
        let value_dim = entries[2].weight.rows();
        let ffn_dim = entries[4].weight.rows();
        if hidden_dim == 0 {
            return Err(DenoiseError::ZeroDimension { which: "hidden" });
        }
        if value_dim % n_heads != 0 {
            return Err(DenoiseError::HeadDivisibility { value_dim, n_heads });
        }
        let mut bundle =
            LayerBundle { entries, metric, hidden_dim, value_dim, n_heads, ffn_dim };
        for index in 0..bundle.entries.len() {
            let kind = bundle.entries[index].kind;
            let (rows, cols) = bundle.expected_weight_dims(kind);
            let w = &bundle.entries[index].weight;
            if w.dims() != (rows, cols) {
                return Err(DenoiseError::WeightShape {
                    kind,
                    expected_rows: rows,
                    expected_cols: cols,
                    rows: w.rows(),
                    cols: w.cols(),
                });
            }
            let expected = bundle.expected_hessian_dim(kind);
            let h = &bundle.entries[index].hessian;
            if h.dims() != (expected, expected) {
                return Err(DenoiseError::HessianShape {
                    kind,
                    expected,
                    rows: h.rows(),
                    cols: h.cols(),
                });
            }
            if metric == Metric::SparseGpt {
                let inv = crate::linalg::cholesky_inverse(h, crate::importance::DEFAULT_DAMP)?;
                bundle.entries[index].hessian_inverse = Some(inv);
            }
        }
        Ok(bundle)
    }

    fn expected_weight_dims(&self, kind: LinearKind) -> (usize, usize) {
        match kind {
            LinearKind::Query | LinearKind::Key => (self.value_dim, self.hidden_dim),
            LinearKind::Value => (self.value_dim, self.hidden_dim),
            LinearKind::Output => (self.hidden_dim, self.value_dim),
            LinearKind::Gate | LinearKind::Up => (self.ffn_dim, self.hidden_dim),
            LinearKind::Down => (self.hidden_dim, self.ffn_dim),
        }
    }

    fn expected_hessian_dim(&self, kind: LinearKind) -> usize {
        match kind {
            LinearKind::Query
            | LinearKind::Key
            | LinearKind::Value
            | LinearKind::Gate
            | LinearKind::Up => self.hidden_dim,
            LinearKind::Output => self.value_dim,
            LinearKind::Down => self.ffn_dim,
        }
    }

    pub fn entries(&self) -> &[BundleEntry] {
        &self.entries
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn value_dim(&self) -> usize {
        self.value_dim
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn head_dim(&self) -> usize {
        self.value_dim / self.n_heads
    }

    pub fn ffn_dim(&self) -> usize {
        self.ffn_dim
    }

    /// Per-group entropies of every projection, optionally under a trained
    /// pair.
    ///
    /// Follows the same arithmetic as the training loss, so the report for
    /// an identity pair equals the step-0 training loss bit for bit.
    pub fn entropy_report(
        &self,
        pair: Option<&RotationPair>,
        epsilon: f64,
    ) -> Result<EntropyReport, DenoiseError> {
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(DenoiseError::BadEpsilon { epsilon });
        }
        if let Some(p) = pair {
            check_pair_fits(p, self)?;
        }
        let mut linears = Vec::with_capacity(self.entries.len());
        let mut total = 0.0;
        for entry in &self.entries {
            let case = entry.kind.rotation_case();
            let scores = match pair {
                None => score_squared_convention(&entry.weight, &entry.hessian, self.metric)?,
                Some(p) => {
                    score_rotated(
                        &entry.weight,
                        &entry.hessian,
                        case,
                        Some(p.q1()),
                        Some(p.q2()),
                        self.metric,
                    )?
                    .scores
                }
            };
            let groups = group_entropy(&scores, case.group_layout(), epsilon)?;
            total += groups.total;
            linears.push(LinearEntropy { kind: entry.kind, groups });
        }
        Ok(EntropyReport { linears, total })
    }
}

/// Entropy of every normalization group of one score matrix.
#[derive(Debug, Clone)]
pub struct GroupEntropies {
    /// Per-row entropies when rows form groups.
    pub rows: Option<Vec<f64>>,
    /// Per-column entropies when columns form groups.
    pub cols: Option<Vec<f64>>,
    /// Sum over every group, both axes when both apply.
    pub total: f64,
}

/// Entropy breakdown for one projection.
#[derive(Debug, Clone)]
pub struct LinearEntropy {
    pub kind: LinearKind,
    pub groups: GroupEntropies,
}

/// Entropy breakdown for a whole layer bundle.
#[derive(Debug, Clone)]
pub struct EntropyReport {
    pub linears: Vec<LinearEntropy>,
    pub total: f64,
}

/// Shannon entropy (nats) of each normalization group of `scores`.
///
/// A group is one row, one column, or both depending on `layout`. Members
/// are smoothed to `(s + epsilon) / (sum(s) + n * epsilon)` before the
/// entropy is taken; `0 ln 0` counts as zero. An all-zero group with
/// `epsilon == 0` is scored as its smoothed limit `ln n`. Group sums
/// reduce in value order, so permuting the members of a group leaves its
/// entropy bit-unchanged.
pub fn group_entropy(
    scores: &Matrix,
    layout: GroupLayout,
    epsilon: f64,
) -> Result<GroupEntropies, DenoiseError> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(DenoiseError::BadEpsilon { epsilon });
    }
    for i in 0..scores.rows() {
        for j in 0..scores.cols() {
            let v = scores.at(i, j);
            if v < 0.0 {
                return Err(DenoiseError::NegativeScore { row: i, col: j, value: v });
            }
        }
    }
    let rows = match layout {
        GroupLayout::Rows | GroupLayout::RowsAndColumns => {
            let mut ents = Vec::with_capacity(scores.rows());
            for i in 0..scores.rows() {
                ents.push(member_entropy(scores.row(i), epsilon));
            }
            Some(ents)
        }
        GroupLayout::Columns => None,
    };
    let cols = match layout {
        GroupLayout::Columns | GroupLayout::RowsAndColumns => {
            let mut ents = Vec::with_capacity(scores.cols());
            let mut column = vec![0.0; scores.rows()];
            for j in 0..scores.cols() {
                for i in 0..scores.rows() {
                    column[i] = scores.at(i, j);
                }
                ents.push(member_entropy(&column, epsilon));
            }
            Some(ents)
        }
        GroupLayout::Rows => None,
    };
    let row_total = rows.as_ref().map(|e| stable_sum(e));
    let col_total = cols.as_ref().map(|e| stable_sum(e));
    let total = match (row_total, col_total) {
        (Some(r), Some(c)) => r + c,
        (Some(r), None) => r,
        (None, Some(c)) => c,
        (None, None) => 0.0,
    };
    Ok(GroupEntropies { rows, cols, total })
}

/// Entropy of one group; mirrors the tape arithmetic of [`build_loss`]
/// operation for operation.
fn member_entropy(members: &[f64], epsilon: f64) -> f64 {
    let n = members.len();
    let denom = stable_sum(members) + n as f64 * epsilon;
    if denom == 0.0 {
        return (n as f64).ln();
    }
    let mut terms = Vec::with_capacity(n);
    for &s in members {
        let p = (s + epsilon) / denom;
        if p == 0.0 {
            terms.push(0.0);
        } else {
            terms.push(p * p.ln());
        }
    }
    -stable_sum(&terms)
}

/// Orthogonal rotation pair for one layer.
///
/// `q1` rotates the residual stream and is block-diagonal with
/// `block_count` equal blocks. `q2` rotates the value/output path and is
/// always block-diagonal per attention head, which keeps multi-head
/// attention equivalent under the rotation; when `block_count` asks for
/// blocks smaller than a head, `q2` subdivides each head to the same
/// granularity. Both factors are the Q of a QR factorization of the
/// unconstrained parameters `a1` / `a2`.
#[derive(Debug, Clone)]
pub struct RotationPair {
    a1_blocks: Vec<Matrix>,
    a2_blocks: Vec<Matrix>,
    q1: Matrix,
    q2: Matrix,
    hidden_dim: usize,
    value_dim: usize,
    n_heads: usize,
    block_count: usize,
}

impl RotationPair {
    /// Identity pair: every parameter block and both Q factors start as
    /// exact identity matrices.
    pub fn identity(
        hidden_dim: usize,
        value_dim: usize,
        n_heads: usize,
        block_count: usize,
    ) -> Result<Self, DenoiseError> {
        if hidden_dim == 0 {
            return Err(DenoiseError::ZeroDimension { which: "hidden" });
        }
        if value_dim == 0 {
            return Err(DenoiseError::ZeroDimension { which: "value" });
        }
        if n_heads == 0 {
            return Err(DenoiseError::ZeroDimension { which: "n_heads" });
        }
        if block_count == 0 {
            return Err(DenoiseError::ZeroBlockCount);
        }
        if hidden_dim % block_count != 0 {
            return Err(DenoiseError::BlockDivisibility { hidden_dim, block_count });
        }
        if value_dim % n_heads != 0 {
            return Err(DenoiseError::HeadDivisibility { value_dim, n_heads });
        }
        let block = hidden_dim / block_count;
        let head_dim = value_dim / n_heads;
        let head_block = head_dim.min(block);
        if head_dim % head_block != 0 {
            return Err(DenoiseError::HeadBlockDivisibility { head_dim, block });
        }
        Ok(RotationPair {
            a1_blocks: vec![Matrix::identity(block); block_count],
            a2_blocks: vec![Matrix::identity(head_block); value_dim / head_block],
            q1: Matrix::identity(hidden_dim),
            q2: Matrix::identity(value_dim),
            hidden_dim,
            value_dim,
            n_heads,
            block_count,
        })
    }

    /// Rebuilds a pair from stored Q factors, e.g. after loading a
    /// checkpoint. The factors must be orthogonal and carry the exact
    /// block-diagonal structure of their configuration; the unconstrained
    /// parameters are reset to the factors themselves.
    pub fn from_factors(
        q1: Matrix,
        q2: Matrix,
        n_heads: usize,
        block_count: usize,
    ) -> Result<Self, DenoiseError> {
        if !q1.is_square() {
            return Err(DenoiseError::NonSquareBlock { index: 0, rows: q1.rows(), cols: q1.cols() });
        }
        if !q2.is_square() {
            return Err(DenoiseError::NonSquareBlock { index: 1, rows: q2.rows(), cols: q2.cols() });
        }
        let hidden_dim = q1.rows();
        let value_dim = q2.rows();
        let mut pair = RotationPair::identity(hidden_dim, value_dim, n_heads, block_count)?;
        let e1 = q1.orthogonality_error();
        if e1 > ORTHO_TOL {
            return Err(DenoiseError::NotOrthogonal { which: "q1", error: e1 });
        }
        let e2 = q2.orthogonality_error();
        if e2 > ORTHO_TOL {
            return Err(DenoiseError::NotOrthogonal { which: "q2", error: e2 });
        }
        let q2_block = pair.a2_blocks[0].rows();
        check_block_structure(&q1, hidden_dim / block_count, "q1")?;
        check_block_structure(&q2, q2_block, "q2")?;
        pair.a1_blocks = extract_blocks(&q1, hidden_dim / block_count);
        pair.a2_blocks = extract_blocks(&q2, q2_block);
        pair.q1 = q1;
        pair.q2 = q2;
        Ok(pair)
    }

    /// Replaces the unconstrained parameter blocks and refreshes both Q
    /// factors so they stay current with the parameters.
    pub fn set_parameters(
        &mut self,
        a1_blocks: Vec<Matrix>,
        a2_blocks: Vec<Matrix>,
    ) -> Result<(), DenoiseError> {
        for (which, incoming, current) in [
            ("a1", &a1_blocks, &self.a1_blocks),
            ("a2", &a2_blocks, &self.a2_blocks),
        ] {
            if incoming.len() != current.len() {
                return Err(DenoiseError::ParameterCount {
                    which,
                    expected: current.len(),
                    got: incoming.len(),
                });
            }
            for (index, block) in incoming.iter().enumerate() {
                let expected = current[index].rows();
                if block.dims() != (expected, expected) {
                    return Err(DenoiseError::ParameterShape {
                        which,
                        index,
                        expected,
                        rows: block.rows(),
                        cols: block.cols(),
                    });
                }
            }
        }
        self.q1 = assembled_q_factor(&a1_blocks)?;
        self.q2 = assembled_q_factor(&a2_blocks)?;
        self.a1_blocks = a1_blocks;
        self.a2_blocks = a2_blocks;
        Ok(())
    }

    /// Unconstrained parameter blocks, `a1` blocks first.
    pub fn parameter_blocks(&self) -> (&[Matrix], &[Matrix]) {
        (&self.a1_blocks, &self.a2_blocks)
    }

    pub fn q1(&self) -> &Matrix {
        &self.q1
    }

    pub fn q2(&self) -> &Matrix {
        &self.q2
    }

    /// Unconstrained residual-stream parameters, assembled block-diagonally.
    pub fn a1(&self) -> Matrix {
        place_blocks(&self.a1_blocks)
    }

    /// Unconstrained per-head parameters, assembled block-diagonally.
    pub fn a2(&self) -> Matrix {
        place_blocks(&self.a2_blocks)
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn value_dim(&self) -> usize {
        self.value_dim
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn head_dim(&self) -> usize {
        self.value_dim / self.n_heads
    }

    pub fn block_count(&self) -> usize {
        self.block_count
    }
}

/// Hyperparameters for [`train_rotations`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Number of Adam updates; zero trains nothing and returns the
    /// identity pair.
    pub steps: usize,
    /// Adam learning rate.
    pub lr: f64,
    /// Reserved for randomized restarts; the identity-start optimizer is
    /// deterministic and does not consume it.
    pub seed: u64,
    /// Number of equal diagonal blocks in the residual-stream rotation.
    pub block_count: usize,
    /// Smoothing floor added to every score before normalization.
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { steps: 2000, lr: 0.01, seed: 0, block_count: 1, epsilon: 1e-12 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), DenoiseError> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(DenoiseError::BadLearningRate { lr: self.lr });
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(DenoiseError::BadEpsilon { epsilon: self.epsilon });
        }
        if self.block_count == 0 {
            return Err(DenoiseError::ZeroBlockCount);
        }
        Ok(())
    }
}

/// Tape nodes for one projection's share of the loss.
#[derive(Debug, Clone)]
pub struct LinearNodes {
    pub kind: LinearKind,
    /// Squared-convention scores of the rotated weight.
    pub scores: NodeId,
    /// Per-row entropies (`r x 1`) when rows form groups.
    pub row_entropies: Option<NodeId>,
    /// Per-column entropies (`1 x c`) when columns form groups.
    pub col_entropies: Option<NodeId>,
    /// This projection's summed entropy.
    pub total: NodeId,
}

/// Handles into the loss tape built by [`build_loss`].
#[derive(Debug, Clone)]
pub struct LossGraph {
    pub loss: NodeId,
    pub a1_leaves: Vec<NodeId>,
    pub a2_leaves: Vec<NodeId>,
    pub q1: NodeId,
    pub q2: NodeId,
    pub per_linear: Vec<LinearNodes>,
}

/// Builds the entropy objective for `bundle` under `pair` onto `tape`.
///
/// The QR reparameterization runs inside the tape, so every evaluation
/// refactorizes the current parameters; nothing is cached across steps.
pub fn build_loss(
    bundle: &LayerBundle,
    pair: &RotationPair,
    tape: &mut Tape,
    epsilon: f64,
) -> Result<LossGraph, DenoiseError> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(DenoiseError::BadEpsilon { epsilon });
    }
    check_pair_fits(pair, bundle)?;
    let a1_leaves: Vec<NodeId> =
        pair.a1_blocks.iter().map(|b| tape.leaf(b.clone())).collect();
    let a2_leaves: Vec<NodeId> =
        pair.a2_blocks.iter().map(|b| tape.leaf(b.clone())).collect();
    let q1 = assemble_q(tape, &a1_leaves)?;
    let q2 = assemble_q(tape, &a2_leaves)?;
    let mut per_linear = Vec::with_capacity(bundle.entries.len());
    let mut loss: Option<NodeId> = None;
    for entry in &bundle.entries {
        let nodes = linear_loss(tape, entry, bundle.metric, q1, q2, epsilon)?;
        loss = Some(match loss {
            None => nodes.total,
            Some(acc) => tape.add(acc, nodes.total)?,
        });
        per_linear.push(nodes);
    }
    let loss = loss.expect("a bundle always has seven linears");
    Ok(LossGraph { loss, a1_leaves, a2_leaves, q1, q2, per_linear })
}

/// QR factor per parameter block, assembled block-diagonally; a single
/// block skips the assembly node.
fn assemble_q(tape: &mut Tape, leaves: &[NodeId]) -> Result<NodeId, GradError> {
    let mut qs = Vec::with_capacity(leaves.len());
    for &leaf in leaves {
        qs.push(tape.qr_q(leaf)?);
    }
    if qs.len() == 1 {
        Ok(qs[0])
    } else {
        tape.block_diag(&qs)
    }
}

fn linear_loss(
    tape: &mut Tape,
    entry: &BundleEntry,
    metric: Metric,
    q1: NodeId,
    q2: NodeId,
    epsilon: f64,
) -> Result<LinearNodes, DenoiseError> {
    let case = entry.kind.rotation_case();
    let w = tape.constant(entry.weight.clone());
    let wp = match case {
        RotationCase::RightOnly => tape.matmul(w, q1)?,
        RotationCase::LeftOnly => {
            let q1t = tape.transpose(q1);
            tape.matmul(q1t, w)?
        }
        RotationCase::TwoSidedValue => {
            let wr = tape.matmul(w, q1)?;
            let q2t = tape.transpose(q2);
            tape.matmul(q2t, wr)?
        }
        RotationCase::TwoSidedOutput => {
            let wr = tape.matmul(w, q2)?;
            let q1t = tape.transpose(q1);
            tape.matmul(q1t, wr)?
        }
    };
    let wp2 = tape.square(wp);
    let rows = tape.value(wp2).rows();
    let scores = match metric {
        Metric::Magnitude => wp2,
        Metric::Wanda | Metric::Obd => {
            let h = tape.constant(entry.hessian.clone());
            let hrot = rotate_stat(tape, h, case, q1, q2)?;
            let db = broadcast_diag(tape, hrot, rows)?;
            tape.hadamard(wp2, db)?
        }
        Metric::SparseGpt => {
            let hinv = entry
                .hessian_inverse
                .as_ref()
                .expect("sparsegpt bundles precompute inverse stats")
                .clone();
            let hinv = tape.constant(hinv);
            let hrot = rotate_stat(tape, hinv, case, q1, q2)?;
            let db = broadcast_diag(tape, hrot, rows)?;
            tape.div(wp2, db)?
        }
    };
    let layout = case.group_layout();
    let (row_entropies, row_total) = match layout {
        GroupLayout::Rows | GroupLayout::RowsAndColumns => {
            let (ents, total) = axis_entropy(tape, scores, GroupLayout::Rows, epsilon)?;
            (Some(ents), Some(total))
        }
        GroupLayout::Columns => (None, None),
    };
    let (col_entropies, col_total) = match layout {
        GroupLayout::Columns | GroupLayout::RowsAndColumns => {
            let (ents, total) = axis_entropy(tape, scores, GroupLayout::Columns, epsilon)?;
            (Some(ents), Some(total))
        }
        GroupLayout::Rows => (None, None),
    };
    let total = match (row_total, col_total) {
        (Some(r), Some(c)) => tape.add(r, c)?,
        (Some(r), None) => r,
        (None, Some(c)) => c,
        (None, None) => unreachable!("every layout has at least one group axis"),
    };
    Ok(LinearNodes { kind: entry.kind, scores, row_entropies, col_entropies, total })
}

/// Applies the case's sandwich to an input-side statistic.
fn rotate_stat(
    tape: &mut Tape,
    stat: NodeId,
    case: RotationCase,
    q1: NodeId,
    q2: NodeId,
) -> Result<NodeId, GradError> {
    let r = match case {
        RotationCase::RightOnly | RotationCase::TwoSidedValue => q1,
        RotationCase::LeftOnly => return Ok(stat),
        RotationCase::TwoSidedOutput => q2,
    };
    let hr = tape.matmul(stat, r)?;
    let rt = tape.transpose(r);
    tape.matmul(rt, hr)
}

/// Diagonal of a square statistic broadcast across `rows` rows.
fn broadcast_diag(tape: &mut Tape, stat: NodeId, rows: usize) -> Result<NodeId, GradError> {
    let d = tape.diag_of(stat)?;
    let dt = tape.transpose(d);
    let ones = tape.constant(Matrix::ones(rows, 1));
    tape.matmul(ones, dt)
}

/// Smoothed per-group entropies along one axis plus their sum.
fn axis_entropy(
    tape: &mut Tape,
    scores: NodeId,
    axis: GroupLayout,
    epsilon: f64,
) -> Result<(NodeId, NodeId), DenoiseError> {
    let (rows, cols) = tape.value(scores).dims();
    let se = tape.add_scalar(scores, epsilon);
    let denb = match axis {
        GroupLayout::Rows => {
            let raw = tape.sum_rows(scores);
            let denom = tape.add_scalar(raw, cols as f64 * epsilon);
            let ones = tape.constant(Matrix::ones(1, cols));
            tape.matmul(denom, ones)?
        }
        GroupLayout::Columns => {
            let raw = tape.sum_cols(scores);
            let denom = tape.add_scalar(raw, rows as f64 * epsilon);
            let ones = tape.constant(Matrix::ones(rows, 1));
            tape.matmul(ones, denom)?
        }
        GroupLayout::RowsAndColumns => unreachable!("axis_entropy takes a single axis"),
    };
    let p = tape.div(se, denb)?;
    let lp = tape.ln(p)?;
    let t = tape.hadamard(p, lp)?;
    let gsum = match axis {
        GroupLayout::Rows => tape.sum_rows(t),
        GroupLayout::Columns => tape.sum_cols(t),
        GroupLayout::RowsAndColumns => unreachable!(),
    };
    let ents = tape.neg(gsum);
    let total = tape.sum_all(ents);
    Ok((ents, total))
}

/// One point of the training trajectory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    /// Number of Adam updates already applied when the loss was measured.
    pub step: usize,
    pub loss: f64,
    /// Wall time of this step's evaluation (and update, when one ran).
    pub wall_ms: f64,
}

/// A trained pair plus its loss trajectory.
#[derive(Debug)]
pub struct TrainOutcome {
    pub pair: RotationPair,
    /// `steps + 1` points; entry `k` is the loss after `k` updates.
    pub trajectory: Vec<TrajectoryPoint>,
}

/// Minimizes the bundle's group entropy over the rotation pair with Adam.
///
/// Starts from the identity pair, checks orthogonality and per-group
/// entropy bounds at every step, and aborts with the failing step index
/// if the loss leaves the finite range.
pub fn train_rotations(
    bundle: &LayerBundle,
    config: &TrainConfig,
) -> Result<TrainOutcome, DenoiseError> {
    config.validate()?;
    let mut pair = RotationPair::identity(
        bundle.hidden_dim,
        bundle.value_dim,
        bundle.n_heads,
        config.block_count,
    )?;
    let mut opt1: Vec<AdamState> = pair
        .a1_blocks
        .iter()
        .map(|b| AdamState::new(b.rows(), b.cols(), config.lr))
        .collect();
    let mut opt2: Vec<AdamState> = pair
        .a2_blocks
        .iter()
        .map(|b| AdamState::new(b.rows(), b.cols(), config.lr))
        .collect();
    let mut trajectory = Vec::with_capacity(config.steps + 1);
    for step in 0..=config.steps {
        let started = Instant::now();
        let mut tape = Tape::new();
        let graph = build_loss(bundle, &pair, &mut tape, config.epsilon)?;
        let loss = tape.value(graph.loss).at(0, 0);
        if !loss.is_finite() {
            return Err(DenoiseError::NonFiniteLoss { step });
        }
        check_step_orthogonality(&tape, &graph, step)?;
        check_step_entropy_bounds(&tape, &graph, step)?;
        if step == config.steps {
            pair.q1 = tape.value(graph.q1).clone();
            pair.q2 = tape.value(graph.q2).clone();
            trajectory.push(TrajectoryPoint {
                step,
                loss,
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
            });
            break;
        }
        let grads = tape.backward(graph.loss)?;
        for (block, &leaf) in graph.a1_leaves.iter().enumerate() {
            let zero = Matrix::zeros(pair.a1_blocks[block].rows(), pair.a1_blocks[block].cols());
            let g = grads.get(leaf).unwrap_or(&zero);
            pair.a1_blocks[block] = opt1[block].step(&pair.a1_blocks[block], g)?;
        }
        for (block, &leaf) in graph.a2_leaves.iter().enumerate() {
            let zero = Matrix::zeros(pair.a2_blocks[block].rows(), pair.a2_blocks[block].cols());
            let g = grads.get(leaf).unwrap_or(&zero);
            pair.a2_blocks[block] = opt2[block].step(&pair.a2_blocks[block], g)?;
        }
        trajectory.push(TrajectoryPoint {
            step,
            loss,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(TrainOutcome { pair, trajectory })
}

/// Largest per-entry relative error between the analytic loss gradient and
/// a central finite difference, over every entry of every parameter block.
///
/// The relative error divides by `max(|central difference|, 1e-8)`.
pub fn loss_gradient_fd_error(
    bundle: &LayerBundle,
    pair: &RotationPair,
    epsilon: f64,
    step: f64,
) -> Result<f64, DenoiseError> {
    let mut tape = Tape::new();
    let graph = build_loss(bundle, pair, &mut tape, epsilon)?;
    let grads = tape.backward(graph.loss)?;
    let mut analytic: Vec<Matrix> = Vec::new();
    for (&leaf, block) in graph.a1_leaves.iter().zip(&pair.a1_blocks) {
        analytic.push(match grads.get(leaf) {
            Some(g) => g.clone(),
            None => Matrix::zeros(block.rows(), block.cols()),
        });
    }
    for (&leaf, block) in graph.a2_leaves.iter().zip(&pair.a2_blocks) {
        analytic.push(match grads.get(leaf) {
            Some(g) => g.clone(),
            None => Matrix::zeros(block.rows(), block.cols()),
        });
    }

    let loss_at = |a1: Vec<Matrix>, a2: Vec<Matrix>| -> Result<f64, DenoiseError> {
        let mut probe = pair.clone();
        probe.set_parameters(a1, a2)?;
        let mut t = Tape::new();
        let g = build_loss(bundle, &probe, &mut t, epsilon)?;
        Ok(t.value(g.loss).at(0, 0))
    };

    let n1 = pair.a1_blocks.len();
    let mut worst: f64 = 0.0;
    for (param, grad) in analytic.iter().enumerate() {
        let blocks: &[Matrix] =
            if param < n1 { &pair.a1_blocks } else { &pair.a2_blocks };
        let within = if param < n1 { param } else { param - n1 };
        for i in 0..grad.rows() {
            for j in 0..grad.cols() {
                let probe_blocks = |delta: f64| -> Result<f64, DenoiseError> {
                    let mut shifted: Vec<Matrix> = blocks.to_vec();
                    let current = shifted[within].at(i, j);
                    shifted[within].set(i, j, current + delta);
                    if param < n1 {
                        loss_at(shifted, pair.a2_blocks.clone())
                    } else {
                        loss_at(pair.a1_blocks.clone(), shifted)
                    }
                };
                let plus = probe_blocks(step)?;
                let minus = probe_blocks(-step)?;
                let cd = (plus - minus) / (2.0 * step);
                let err = (grad.at(i, j) - cd).abs() / cd.abs().max(1e-8);
                if err > worst {
                    worst = err;
                }
            }
        }
    }
    Ok(worst)
}

fn check_step_orthogonality(
    tape: &Tape,
    graph: &LossGraph,
    step: usize,
) -> Result<(), DenoiseError> {
    let e1 = tape.value(graph.q1).orthogonality_error();
    if e1 > ORTHO_TOL {
        return Err(DenoiseError::OrthogonalityLost { step, which: "q1", error: e1 });
    }
    let e2 = tape.value(graph.q2).orthogonality_error();
    if e2 > ORTHO_TOL {
        return Err(DenoiseError::OrthogonalityLost { step, which: "q2", error: e2 });
    }
    Ok(())
}

fn check_step_entropy_bounds(
    tape: &Tape,
    graph: &LossGraph,
    step: usize,
) -> Result<(), DenoiseError> {
    for linear in &graph.per_linear {
        let (rows, cols) = tape.value(linear.scores).dims();
        if let Some(ents) = linear.row_entropies {
            let limit = (cols as f64).ln() + ENTROPY_BOUND_TOL;
            let v = tape.value(ents);
            for i in 0..v.rows() {
                let h = v.at(i, 0);
                if !(h >= 0.0 && h <= limit) {
                    return Err(DenoiseError::EntropyOutOfBounds {
                        step,
                        kind: linear.kind,
                        axis: "row",
                        index: i,
                        entropy: h,
                        limit,
                    });
                }
            }
        }
        if let Some(ents) = linear.col_entropies {
            let limit = (rows as f64).ln() + ENTROPY_BOUND_TOL;
            let v = tape.value(ents);
            for j in 0..v.cols() {
                let h = v.at(0, j);
                if !(h >= 0.0 && h <= limit) {
                    return Err(DenoiseError::EntropyOutOfBounds {
                        step,
                        kind: linear.kind,
                        axis: "column",
                        index: j,
                        entropy: h,
                        limit,
                    });
                }
            }
        }
    }
    Ok(())
}

/// Assembles square orthogonal blocks into one block-diagonal orthogonal
/// matrix.
pub fn make_block_diagonal(blocks: &[Matrix]) -> Result<Matrix, DenoiseError> {
    for (index, block) in blocks.iter().enumerate() {
        if !block.is_square() {
            return Err(DenoiseError::NonSquareBlock {
                index,
                rows: block.rows(),
                cols: block.cols(),
            });
        }
        let error = block.orthogonality_error();
        if error > ORTHO_TOL {
            return Err(DenoiseError::NonOrthogonalBlock { index, error });
        }
    }
    Ok(place_blocks(blocks))
}

/// Q factor per parameter block, assembled block-diagonally; matches the
/// tape's QR nodes bit for bit.
fn assembled_q_factor(blocks: &[Matrix]) -> Result<Matrix, DenoiseError> {
    let mut qs = Vec::with_capacity(blocks.len());
    for block in blocks {
        qs.push(crate::linalg::qr_decompose(block)?.q);
    }
    Ok(place_blocks(&qs))
}

/// Block-diagonal placement without validation.
fn place_blocks(blocks: &[Matrix]) -> Matrix {
    let n: usize = blocks.iter().map(Matrix::rows).sum();
    let mut out = Matrix::zeros(n, n);
    let mut offset = 0;
    for block in blocks {
        for i in 0..block.rows() {
            for j in 0..block.cols() {
                out.set(offset + i, offset + j, block.at(i, j));
            }
        }
        offset += block.rows();
    }
    out
}

/// Splits a block-diagonal matrix back into its equal square blocks.
fn extract_blocks(m: &Matrix, block: usize) -> Vec<Matrix> {
    let count = m.rows() / block;
    let mut out = Vec::with_capacity(count);
    for b in 0..count {
        let offset = b * block;
        let sub = Matrix::from_fn(block, block, |i, j| m.at(offset + i, offset + j))
            .expect("finite submatrix");
        out.push(sub);
    }
    out
}

/// Requires every entry outside the diagonal blocks to be exactly zero.
fn check_block_structure(
    m: &Matrix,
    block: usize,
    which: &'static str,
) -> Result<(), DenoiseError> {
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            if i / block != j / block && m.at(i, j) != 0.0 {
                return Err(DenoiseError::BlockStructure { which, row: i, col: j, value: m.at(i, j) });
            }
        }
    }
    Ok(())
}

fn check_pair_fits(pair: &RotationPair, bundle: &LayerBundle) -> Result<(), DenoiseError> {
    if pair.hidden_dim != bundle.hidden_dim
        || pair.value_dim != bundle.value_dim
        || pair.n_heads != bundle.n_heads
    {
        return Err(DenoiseError::PairBundleMismatch {
            pair_hidden: pair.hidden_dim,
            pair_value: pair.value_dim,
            pair_heads: pair.n_heads,
            bundle_hidden: bundle.hidden_dim,
            bundle_value: bundle.value_dim,
            bundle_heads: bundle.n_heads,
        });
    }
    Ok(())
}

/// Writes a trajectory as CSV with columns `step,loss,wall_ms`.
pub fn write_trajectory_csv<W: Write>(
    out: &mut W,
    points: &[TrajectoryPoint],
) -> std::io::Result<()> {
    writeln!(out, "step,loss,wall_ms")?;
    for p in points {
        writeln!(out, "{},{},{}", p.step, p.loss, p.wall_ms)?;
    }
    Ok(())
}
