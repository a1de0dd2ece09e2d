//! Weight-importance scoring: calibration second moments, the four
//! supported metrics, and their transforms under orthogonal rotations.
//!
//! Conventions: a linear layer computes `y = W x` with `W` of shape
//! `rows x cols`, and the input second-moment matrix is `H = sum x x^T`
//! over calibration samples. Rotated scoring always uses the squared
//! forms (`|w|` becomes `w^2`), which leave every ranking unchanged and
//! stay differentiable for the rotation trainer.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, cholesky_inverse, LinalgError, Matrix};

/// Ridge factor applied when inverting calibration second moments.
pub const DEFAULT_DAMP: f64 = 1e-2;

/// Max-norm tolerance on `R^T R - I` for rotations accepted by scoring.
pub const ORTHO_TOL: f64 = 1e-8;

/// Errors raised by scoring and calibration accumulation.
#[derive(Debug, Error)]
pub enum ImportanceError {
    #[error("shape mismatch: weight is {w_rows}x{w_cols}, stats are {h_rows}x{h_cols}")]
    ShapeMismatch { w_rows: usize, w_cols: usize, h_rows: usize, h_cols: usize },
    #[error("rotation {which} has shape {got_rows}x{got_cols}, expected {expect}x{expect}")]
    RotationShape { which: &'static str, got_rows: usize, got_cols: usize, expect: usize },
    #[error("rotation {which} is not orthogonal: max |R^T R - I| = {error:.3e} exceeds {tol:.3e}")]
    NotOrthogonal { which: &'static str, error: f64, tol: f64 },
    #[error("negative diagonal entry {value} at index {index} in second-moment matrix")]
    NegativeDiagonal { index: usize, value: f64 },
    #[error("non-positive diagonal entry {value} at index {index} in inverse second-moment matrix")]
    NonPositiveDiagonal { index: usize, value: f64 },
    #[error("missing rotation {which} for case {case:?}")]
    MissingRotation { which: &'static str, case: RotationCase },
    #[error("calibration batch has {got} rows, stats dimension is {expect}")]
    BatchDimension { got: usize, expect: usize },
    #[error("cannot accumulate into sealed calibration stats")]
    AccumulateAfterSeal,
    #[error("calibration stats read before seal")]
    ReadBeforeSeal,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Importance metric family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    /// `|w|` (squared form `w^2` under rotation).
    Magnitude,
    /// `|w_ij| * sqrt(h_jj)` (squared form `w^2 h_jj` under rotation).
    Wanda,
    /// `w_ij^2 * h_jj`.
    Obd,
    /// `w_ij^2 / [h^-1]_jj`.
    SparseGpt,
}

/// Which axis the normalization groups of a score matrix run along.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupLayout {
    Rows,
    Columns,
    RowsAndColumns,
}

/// How a linear layer sits relative to the trained rotations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RotationCase {
    /// Input side only: `W' = W R1` (query, key, gate, up projections).
    RightOnly,
    /// Output side only: `W' = R1^T W` (down projection).
    LeftOnly,
    /// `W' = R2^T W R1` (value projection).
    TwoSidedValue,
    /// `W' = R1^T W R2` (output projection).
    TwoSidedOutput,
}

impl RotationCase {
    /// Normalization-group layout induced by the case: every axis along
    /// which a rotation mixes entries becomes a group axis.
    pub fn group_layout(self) -> GroupLayout {
        match self {
            RotationCase::RightOnly => GroupLayout::Rows,
            RotationCase::LeftOnly => GroupLayout::Columns,
            RotationCase::TwoSidedValue | RotationCase::TwoSidedOutput => {
                GroupLayout::RowsAndColumns
            }
        }
    }
}

/// Scores for one weight matrix under one metric.
#[derive(Debug, Clone)]
pub struct ImportanceMap {
    pub scores: Matrix,
    pub metric: Metric,
    pub layout: GroupLayout,
}

/// Streaming second-moment accumulator for one linear layer's inputs.
///
/// Samples are folded in one column at a time, so splitting a batch in
/// two produces bit-identical statistics to one concatenated batch.
#[derive(Debug, Clone)]
pub struct CalibStats {
    dim: usize,
    h: Matrix,
    samples: u64,
    sealed: bool,
}

impl CalibStats {
    pub fn new(dim: usize) -> Self {
        CalibStats { dim, h: Matrix::zeros(dim, dim), samples: 0, sealed: false }
    }

    /// Restores sealed stats, e.g. from a checkpoint.
    pub fn from_parts(h: Matrix, samples: u64) -> Result<Self, ImportanceError> {
        if !h.is_square() {
            return Err(ImportanceError::Linalg(LinalgError::NotSquare {
                rows: h.rows(),
                cols: h.cols(),
            }));
        }
        let dim = h.rows();
        Ok(CalibStats { dim, h, samples, sealed: true })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn samples(&self) -> u64 {
        self.samples
    }

    pub fn is_sealed(&self) -> bool {
        self.sealed
    }

    /// Adds `x x^T` for every column of `x` (shape `dim x batch`).
    pub fn accumulate(&mut self, x: &Matrix) -> Result<(), ImportanceError> {
        if self.sealed {
            return Err(ImportanceError::AccumulateAfterSeal);
        }
        if x.rows() != self.dim {
            return Err(ImportanceError::BatchDimension { got: x.rows(), expect: self.dim });
        }
        x.validate_finite()?;
        for s in 0..x.cols() {
            for i in 0..self.dim {
                let xi = x.at(i, s);
                if xi == 0.0 {
                    continue;
                }
                for j in 0..self.dim {
                    let v = self.h.at(i, j) + xi * x.at(j, s);
                    self.h.set(i, j, v);
                }
            }
            self.samples += 1;
        }
        Ok(())
    }

    /// Freezes the accumulator; statistics become readable.
    pub fn seal(&mut self) {
        self.sealed = true;
    }

    /// Accumulated `sum x x^T`; only readable once sealed.
    pub fn hessian(&self) -> Result<&Matrix, ImportanceError> {
        if !self.sealed {
            return Err(ImportanceError::ReadBeforeSeal);
        }
        Ok(&self.h)
    }
}

fn check_stats_shape(w: &Matrix, h: &Matrix) -> Result<(), ImportanceError> {
    if !h.is_square() || h.rows() != w.cols() {
        return Err(ImportanceError::ShapeMismatch {
            w_rows: w.rows(),
            w_cols: w.cols(),
            h_rows: h.rows(),
            h_cols: h.cols(),
        });
    }
    Ok(())
}

fn nonneg_diag(h: &Matrix) -> Result<Vec<f64>, ImportanceError> {
    let d = h.diag();
    for (i, &v) in d.iter().enumerate() {
        if v < 0.0 {
            return Err(ImportanceError::NegativeDiagonal { index: i, value: v });
        }
    }
    Ok(d)
}

/// `|w|`, elementwise.
pub fn score_magnitude(w: &Matrix) -> ImportanceMap {
    ImportanceMap { scores: w.map(f64::abs), metric: Metric::Magnitude, layout: GroupLayout::Rows }
}

/// `|w_ij| * sqrt(h_jj)`; rejects a negative diagonal in `h`.
pub fn score_wanda(w: &Matrix, h: &Matrix) -> Result<ImportanceMap, ImportanceError> {
    check_stats_shape(w, h)?;
    let d = nonneg_diag(h)?;
    let norms: Vec<f64> = d.iter().map(|&v| v.sqrt()).collect();
    let scores = Matrix::from_fn(w.rows(), w.cols(), |i, j| w.at(i, j).abs() * norms[j])
        .expect("finite wanda scores");
    Ok(ImportanceMap { scores, metric: Metric::Wanda, layout: GroupLayout::Rows })
}

/// `w_ij^2 * h_jj`; rejects a negative diagonal in `h`.
pub fn score_obd(w: &Matrix, h: &Matrix) -> Result<ImportanceMap, ImportanceError> {
    check_stats_shape(w, h)?;
    let d = nonneg_diag(h)?;
    let scores = Matrix::from_fn(w.rows(), w.cols(), |i, j| {
        let x = w.at(i, j);
        x * x * d[j]
    })
    .expect("finite obd scores");
    Ok(ImportanceMap { scores, metric: Metric::Obd, layout: GroupLayout::Rows })
}

/// `w_ij^2 / [h^-1]_jj` given an already-inverted second moment.
pub fn score_sparsegpt(w: &Matrix, h_inv: &Matrix) -> Result<ImportanceMap, ImportanceError> {
    check_stats_shape(w, h_inv)?;
    let d = h_inv.diag();
    for (i, &v) in d.iter().enumerate() {
        if v <= 0.0 {
            return Err(ImportanceError::NonPositiveDiagonal { index: i, value: v });
        }
    }
    let scores = Matrix::from_fn(w.rows(), w.cols(), |i, j| {
        let x = w.at(i, j);
        x * x / d[j]
    })
    .expect("finite sparsegpt scores");
    Ok(ImportanceMap { scores, metric: Metric::SparseGpt, layout: GroupLayout::Rows })
}

fn expect_rotation(
    r: Option<&Matrix>,
    which: &'static str,
    case: RotationCase,
    expect: usize,
) -> Result<Matrix, ImportanceError> {
    let r = r.ok_or(ImportanceError::MissingRotation { which, case })?;
    if !r.is_square() || r.rows() != expect {
        return Err(ImportanceError::RotationShape {
            which,
            got_rows: r.rows(),
            got_cols: r.cols(),
            expect,
        });
    }
    let err = r.orthogonality_error();
    if err > ORTHO_TOL {
        return Err(ImportanceError::NotOrthogonal { which, error: err, tol: ORTHO_TOL });
    }
    Ok(r.clone())
}

/// Weight matrix as seen after folding the rotations in.
pub fn rotated_weight(
    w: &Matrix,
    case: RotationCase,
    r1: Option<&Matrix>,
    r2: Option<&Matrix>,
) -> Result<Matrix, ImportanceError> {
    match case {
        RotationCase::RightOnly => {
            let r1 = expect_rotation(r1, "r1", case, w.cols())?;
            Ok(linalg::matmul(w, &r1)?)
        }
        RotationCase::LeftOnly => {
            let r1 = expect_rotation(r1, "r1", case, w.rows())?;
            Ok(linalg::matmul(&r1.transpose(), w)?)
        }
        RotationCase::TwoSidedValue => {
            let r1 = expect_rotation(r1, "r1", case, w.cols())?;
            let r2 = expect_rotation(r2, "r2", case, w.rows())?;
            let wr = linalg::matmul(w, &r1)?;
            Ok(linalg::matmul(&r2.transpose(), &wr)?)
        }
        RotationCase::TwoSidedOutput => {
            let r1 = expect_rotation(r1, "r1", case, w.rows())?;
            let r2 = expect_rotation(r2, "r2", case, w.cols())?;
            let wr = linalg::matmul(w, &r2)?;
            Ok(linalg::matmul(&r1.transpose(), &wr)?)
        }
    }
}

/// Input second moment as seen after folding the rotations in.
///
/// Only the input-side rotation enters: the layer input is rotated by
/// `R^T`, so `H' = R^T H R`. The left-only case leaves `H` untouched.
/// The same sandwich applies verbatim to `H^-1`, because for orthogonal
/// `R` the inverse of `R^T (H + lambda I) R` is `R^T (H + lambda I)^-1 R`.
pub fn rotated_hessian(
    h: &Matrix,
    case: RotationCase,
    r1: Option<&Matrix>,
    r2: Option<&Matrix>,
) -> Result<Matrix, ImportanceError> {
    match case {
        RotationCase::RightOnly | RotationCase::TwoSidedValue => {
            let r1 = expect_rotation(r1, "r1", case, h.rows())?;
            let hr = linalg::matmul(h, &r1)?;
            Ok(linalg::matmul(&r1.transpose(), &hr)?)
        }
        RotationCase::LeftOnly => Ok(h.clone()),
        RotationCase::TwoSidedOutput => {
            let r2 = expect_rotation(r2, "r2", case, h.rows())?;
            let hr = linalg::matmul(h, &r2)?;
            Ok(linalg::matmul(&r2.transpose(), &hr)?)
        }
    }
}

/// Scores of the rotated layer, in the squared convention.
///
/// For `sparsegpt` the inverse is taken once in the original basis with
/// [`DEFAULT_DAMP`] and then rotated, which is exact for orthogonal
/// rotations.
pub fn score_rotated(
    w: &Matrix,
    h: &Matrix,
    case: RotationCase,
    r1: Option<&Matrix>,
    r2: Option<&Matrix>,
    metric: Metric,
) -> Result<ImportanceMap, ImportanceError> {
    check_stats_shape(w, h)?;
    let wp = rotated_weight(w, case, r1, r2)?;
    let scores = match metric {
        Metric::Magnitude => wp.map(|v| v * v),
        Metric::Wanda | Metric::Obd => {
            let hp = rotated_hessian(h, case, r1, r2)?;
            let d = nonneg_diag(&hp)?;
            Matrix::from_fn(wp.rows(), wp.cols(), |i, j| {
                let x = wp.at(i, j);
                x * x * d[j]
            })
            .expect("finite rotated scores")
        }
        Metric::SparseGpt => {
            let hinv = cholesky_inverse(h, DEFAULT_DAMP)?;
            let hinvp = rotated_hessian(&hinv, case, r1, r2)?;
            let d = hinvp.diag();
            for (i, &v) in d.iter().enumerate() {
                if v <= 0.0 {
                    return Err(ImportanceError::NonPositiveDiagonal { index: i, value: v });
                }
            }
            Matrix::from_fn(wp.rows(), wp.cols(), |i, j| {
                let x = wp.at(i, j);
                x * x / d[j]
            })
            .expect("finite rotated scores")
        }
    };
    Ok(ImportanceMap { scores, metric, layout: case.group_layout() })
}

/// Squared-convention scores of an unrotated layer; equals
/// [`score_rotated`] with identity rotations for every metric.
pub fn score_squared_convention(
    w: &Matrix,
    h: &Matrix,
    metric: Metric,
) -> Result<Matrix, ImportanceError> {
    match metric {
        Metric::Magnitude => Ok(w.map(|v| v * v)),
        Metric::Wanda | Metric::Obd => Ok(score_obd(w, h)?.scores),
        Metric::SparseGpt => {
            let hinv = cholesky_inverse(h, DEFAULT_DAMP)?;
            Ok(score_sparsegpt(w, &hinv)?.scores)
        }
    }
}

/// `tr(W H W^T)`, the calibration-weighted output energy of a layer.
pub fn output_energy(w: &Matrix, h: &Matrix) -> Result<f64, ImportanceError> {
    check_stats_shape(w, h)?;
    let wh = linalg::matmul(w, h)?;
    let mut acc = 0.0;
    for i in 0..w.rows() {
        for j in 0..w.cols() {
            acc += wh.at(i, j) * w.at(i, j);
        }
    }
    Ok(acc)
}
