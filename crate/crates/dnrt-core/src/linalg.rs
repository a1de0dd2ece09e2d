//! Dense matrix kernels used by every other module: a row-major `f64`
//! matrix type, deterministic multiplication, Householder QR with a
//! positive-diagonal convention, and Cholesky-based SPD inversion.
//!
//! All loops run in a fixed order so repeated calls on identical inputs
//! produce bit-identical results.

use thiserror::Error;

/// Relative pivot threshold below which QR reports rank deficiency.
pub const QR_RANK_TOL: f64 = 1e-12;

/// Errors raised by the matrix kernels.
#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("dimension mismatch: left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}")]
    DimensionMismatch {
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },
    #[error("expected a square matrix, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("non-finite value {value} at ({row}, {col})")]
    NonFinite { row: usize, col: usize, value: f64 },
    #[error("element count {len} does not match shape {rows}x{cols}")]
    BadLength { rows: usize, cols: usize, len: usize },
    #[error("rank deficient at column {col}: pivot {pivot:.3e} below threshold {threshold:.3e}")]
    RankDeficient { col: usize, pivot: f64, threshold: f64 },
    #[error("not positive definite: pivot {pivot:.3e} at index {index} (damp = {damp:.3e})")]
    NotPositiveDefinite { index: usize, pivot: f64, damp: f64 },
    #[error("asymmetric matrix: max |a - a^T| = {max_dev:.3e} exceeds {tol:.3e}")]
    Asymmetric { max_dev: f64, tol: f64 },
    #[error("singular triangular factor: zero diagonal at index {index}")]
    SingularTriangular { index: usize },
}

/// Row-major dense matrix of `f64`.
///
/// Constructors reject NaN and infinity, so a `Matrix` obtained from a
/// public constructor always holds finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(LinalgError::BadLength { rows, cols, len: data.len() });
        }
        let m = Matrix { rows, cols, data };
        m.validate_finite()?;
        Ok(m)
    }

    /// Builds a matrix from a closure over `(row, col)`.
    pub fn from_fn(
        rows: usize,
        cols: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self, LinalgError> {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix::from_vec(rows, cols, data)
    }

    /// Builds a matrix from nested row slices (test and example helper).
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, LinalgError> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        for row in rows {
            if row.len() != c {
                return Err(LinalgError::BadLength { rows: r, cols: c, len: row.len() });
            }
        }
        Matrix::from_vec(r, c, rows.concat())
    }

    /// All-zero matrix.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// All-one matrix.
    pub fn ones(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![1.0; rows * cols] }
    }

    /// Identity matrix of order `n`.
    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Square matrix with `diag` on the diagonal.
    pub fn from_diag(diag: &[f64]) -> Result<Self, LinalgError> {
        let n = diag.len();
        let mut m = Matrix::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            if !d.is_finite() {
                return Err(LinalgError::NonFinite { row: i, col: i, value: d });
            }
            m.data[i * n + i] = d;
        }
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> f64 {
        debug_assert!(row < self.rows && col < self.cols);
        self.data[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        debug_assert!(row < self.rows && col < self.cols);
        self.data[row * self.cols + col] = value;
    }

    /// Borrow of row `i` as a contiguous slice.
    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Row-major backing slice.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Checks every entry for NaN or infinity.
    pub fn validate_finite(&self) -> Result<(), LinalgError> {
        for i in 0..self.rows {
            for j in 0..self.cols {
                let v = self.data[i * self.cols + j];
                if !v.is_finite() {
                    return Err(LinalgError::NonFinite { row: i, col: j, value: v });
                }
            }
        }
        Ok(())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Elementwise sum; shapes must match.
    pub fn add(&self, other: &Matrix) -> Result<Matrix, LinalgError> {
        self.zip_with(other, |a, b| a + b)
    }

    /// Elementwise difference; shapes must match.
    pub fn sub(&self, other: &Matrix) -> Result<Matrix, LinalgError> {
        self.zip_with(other, |a, b| a - b)
    }

    /// Elementwise (Hadamard) product; shapes must match.
    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix, LinalgError> {
        self.zip_with(other, |a, b| a * b)
    }

    /// Elementwise quotient; shapes must match and the caller must rule out
    /// zero divisors.
    pub fn divide(&self, other: &Matrix) -> Result<Matrix, LinalgError> {
        self.zip_with(other, |a, b| a / b)
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix, LinalgError> {
        if self.dims() != other.dims() {
            return Err(LinalgError::DimensionMismatch {
                left_rows: self.rows,
                left_cols: self.cols,
                right_rows: other.rows,
                right_cols: other.cols,
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    /// Scalar multiple.
    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    /// Elementwise map; the caller is responsible for keeping values finite.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Matrix product `self * other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix, LinalgError> {
        matmul(self, other)
    }

    /// Main diagonal as a vector; works on rectangular matrices too.
    pub fn diag(&self) -> Vec<f64> {
        let n = self.rows.min(self.cols);
        (0..n).map(|i| self.data[i * self.cols + i]).collect()
    }

    /// Sum of all entries.
    pub fn sum(&self) -> f64 {
        let mut acc = 0.0;
        for &v in &self.data {
            acc += v;
        }
        acc
    }

    /// Trace of a square matrix.
    pub fn trace(&self) -> f64 {
        let mut acc = 0.0;
        for i in 0..self.rows.min(self.cols) {
            acc += self.data[i * self.cols + i];
        }
        acc
    }

    /// Frobenius norm.
    pub fn frobenius_norm(&self) -> f64 {
        let mut acc = 0.0;
        for &v in &self.data {
            acc += v * v;
        }
        acc.sqrt()
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &v| m.max(v.abs()))
    }

    /// Largest absolute entrywise difference against `other`.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.dims(), other.dims(), "max_abs_diff requires equal shapes");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (&a, &b)| m.max((a - b).abs()))
    }

    /// Max-norm departure from orthogonality, `max |Q^T Q - I|`.
    pub fn orthogonality_error(&self) -> f64 {
        assert!(self.is_square(), "orthogonality_error requires a square matrix");
        let n = self.rows;
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for k in 0..n {
                    acc += self.data[k * n + i] * self.data[k * n + j];
                }
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((acc - target).abs());
            }
        }
        worst
    }
}

/// Sum accumulated in ascending `total_cmp` order.
///
/// Sorting first makes the result independent of the input order, so any
/// permutation of `values` produces a bit-identical sum.
pub fn stable_sum(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_unstable_by(f64::total_cmp);
    let mut acc = 0.0;
    for x in v {
        acc += x;
    }
    acc
}

/// Matrix product with a fixed i-k-j loop order.
///
/// Each output entry is accumulated over `k` in ascending order, so the
/// result is bit-identical to the textbook three-loop definition.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix, LinalgError> {
    if a.cols != b.rows {
        return Err(LinalgError::DimensionMismatch {
            left_rows: a.rows,
            left_cols: a.cols,
            right_rows: b.rows,
            right_cols: b.cols,
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let a_row = a.row(i);
        let out_row = out.row_mut(i);
        for (k, &aik) in a_row.iter().enumerate() {
            let b_row = b.row(k);
            for j in 0..b_row.len() {
                out_row[j] += aik * b_row[j];
            }
        }
    }
    Ok(out)
}

/// QR factors with `q` orthogonal and `r` upper triangular with a
/// strictly positive diagonal.
#[derive(Debug, Clone)]
pub struct QrFactors {
    pub q: Matrix,
    pub r: Matrix,
}

impl QrFactors {
    /// Ratio of largest to smallest `|r_jj|`; a cheap conditioning probe.
    pub fn condition_estimate(&self) -> f64 {
        let diag = self.r.diag();
        let mut lo = f64::INFINITY;
        let mut hi = 0.0f64;
        for d in diag {
            lo = lo.min(d.abs());
            hi = hi.max(d.abs());
        }
        if lo == 0.0 {
            f64::INFINITY
        } else {
            hi / lo
        }
    }
}

/// Householder QR of a square matrix.
///
/// The diagonal of `r` is forced positive by flipping signs, which makes
/// the factorization unique and the map `a -> q` smooth near any full-rank
/// input. Returns an error when a pivot falls below
/// `QR_RANK_TOL * frobenius_norm(a)`.
pub fn qr_decompose(a: &Matrix) -> Result<QrFactors, LinalgError> {
    if !a.is_square() {
        return Err(LinalgError::NotSquare { rows: a.rows, cols: a.cols });
    }
    let n = a.rows;
    let threshold = QR_RANK_TOL * a.frobenius_norm();
    let mut r = a.clone();
    let mut q = Matrix::identity(n);
    let mut v = vec![0.0f64; n];

    for k in 0..n {
        let mut norm_sq = 0.0;
        for i in k..n {
            let x = r.at(i, k);
            v[i] = x;
            norm_sq += x * x;
        }
        let norm = norm_sq.sqrt();
        if norm > 0.0 && k + 1 == n {
            // A trailing 1x1 reflection is an exact negation; applying it
            // through the general formula would round and make Q's last
            // column wobble by an ulp under tiny input perturbations.
            r.set(k, k, -r.at(k, k));
            for i in 0..n {
                q.set(i, k, -q.at(i, k));
            }
        } else if norm > 0.0 {
            let alpha = if v[k] >= 0.0 { -norm } else { norm };
            v[k] -= alpha;
            let mut vtv = 0.0;
            for i in k..n {
                vtv += v[i] * v[i];
            }
            if vtv > 0.0 {
                let beta = 2.0 / vtv;
                // R <- H R on the trailing block.
                for j in k..n {
                    let mut dot = 0.0;
                    for i in k..n {
                        dot += v[i] * r.at(i, j);
                    }
                    let s = beta * dot;
                    for i in k..n {
                        let val = r.at(i, j) - s * v[i];
                        r.set(i, j, val);
                    }
                }
                // Q <- Q H.
                for i in 0..n {
                    let mut dot = 0.0;
                    for j in k..n {
                        dot += q.at(i, j) * v[j];
                    }
                    let s = beta * dot;
                    for j in k..n {
                        let val = q.at(i, j) - s * v[j];
                        q.set(i, j, val);
                    }
                }
            }
        }
        let pivot = r.at(k, k).abs();
        if pivot < threshold || pivot == 0.0 {
            return Err(LinalgError::RankDeficient { col: k, pivot, threshold });
        }
    }

    // Zero the subdiagonal exactly and force positive pivots.
    for i in 0..n {
        for j in 0..i {
            r.set(i, j, 0.0);
        }
    }
    for j in 0..n {
        if r.at(j, j) < 0.0 {
            for c in j..n {
                r.set(j, c, -r.at(j, c));
            }
            for i in 0..n {
                q.set(i, j, -q.at(i, j));
            }
        }
    }
    Ok(QrFactors { q, r })
}

/// Lower Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky(a: &Matrix) -> Result<Matrix, LinalgError> {
    cholesky_with_damp_context(a, 0.0)
}

fn cholesky_with_damp_context(a: &Matrix, damp: f64) -> Result<Matrix, LinalgError> {
    if !a.is_square() {
        return Err(LinalgError::NotSquare { rows: a.rows, cols: a.cols });
    }
    let n = a.rows;
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut acc = a.at(i, j);
            for k in 0..j {
                acc -= l.at(i, k) * l.at(j, k);
            }
            if i == j {
                if acc <= 0.0 {
                    return Err(LinalgError::NotPositiveDefinite { index: i, pivot: acc, damp });
                }
                l.set(i, j, acc.sqrt());
            } else {
                l.set(i, j, acc / l.at(j, j));
            }
        }
    }
    Ok(l)
}

/// Solves `L X = B` for lower-triangular `L` by forward substitution.
pub fn solve_lower_triangular(l: &Matrix, b: &Matrix) -> Result<Matrix, LinalgError> {
    if !l.is_square() {
        return Err(LinalgError::NotSquare { rows: l.rows, cols: l.cols });
    }
    if l.cols != b.rows {
        return Err(LinalgError::DimensionMismatch {
            left_rows: l.rows,
            left_cols: l.cols,
            right_rows: b.rows,
            right_cols: b.cols,
        });
    }
    let n = l.rows;
    let mut x = b.clone();
    for i in 0..n {
        let diag = l.at(i, i);
        if diag == 0.0 {
            return Err(LinalgError::SingularTriangular { index: i });
        }
        for c in 0..x.cols {
            let mut acc = x.at(i, c);
            for k in 0..i {
                acc -= l.at(i, k) * x.at(k, c);
            }
            x.set(i, c, acc / diag);
        }
    }
    Ok(x)
}

/// Solves `U X = B` for upper-triangular `U` by back substitution.
pub fn solve_upper_triangular(u: &Matrix, b: &Matrix) -> Result<Matrix, LinalgError> {
    if !u.is_square() {
        return Err(LinalgError::NotSquare { rows: u.rows, cols: u.cols });
    }
    if u.cols != b.rows {
        return Err(LinalgError::DimensionMismatch {
            left_rows: u.rows,
            left_cols: u.cols,
            right_rows: b.rows,
            right_cols: b.cols,
        });
    }
    let n = u.rows;
    let mut x = b.clone();
    for i in (0..n).rev() {
        let diag = u.at(i, i);
        if diag == 0.0 {
            return Err(LinalgError::SingularTriangular { index: i });
        }
        for c in 0..x.cols {
            let mut acc = x.at(i, c);
            for k in i + 1..n {
                acc -= u.at(i, k) * x.at(k, c);
            }
            x.set(i, c, acc / diag);
        }
    }
    Ok(x)
}

/// Verifies `max |a - a^T| <= tol` and reports the deviation otherwise.
pub fn check_symmetric(a: &Matrix, tol: f64) -> Result<(), LinalgError> {
    if !a.is_square() {
        return Err(LinalgError::NotSquare { rows: a.rows, cols: a.cols });
    }
    let mut max_dev = 0.0f64;
    for i in 0..a.rows {
        for j in 0..i {
            max_dev = max_dev.max((a.at(i, j) - a.at(j, i)).abs());
        }
    }
    if max_dev > tol {
        return Err(LinalgError::Asymmetric { max_dev, tol });
    }
    Ok(())
}

/// Inverse of `h + damp * mean(diag(h)) * I` for symmetric `h`.
///
/// The additive ridge keeps nearly singular calibration statistics
/// invertible; the result is symmetrized exactly before returning.
pub fn cholesky_inverse(h: &Matrix, damp: f64) -> Result<Matrix, LinalgError> {
    if !h.is_square() {
        return Err(LinalgError::NotSquare { rows: h.rows, cols: h.cols });
    }
    let n = h.rows;
    let sym_tol = 1e-10 * (1.0 + h.max_abs());
    check_symmetric(h, sym_tol)?;
    let mean_diag = if n == 0 { 0.0 } else { h.trace() / n as f64 };
    let lambda = damp * mean_diag;
    let mut damped = h.clone();
    for i in 0..n {
        damped.set(i, i, damped.at(i, i) + lambda);
    }
    let l = cholesky_with_damp_context(&damped, damp)?;
    let y = solve_lower_triangular(&l, &Matrix::identity(n))?;
    let inv = solve_upper_triangular(&l.transpose(), &y)?;
    // Solving column by column leaves tiny asymmetry; remove it exactly.
    let mut out = inv.clone();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (inv.at(i, j) + inv.at(j, i));
            out.set(i, j, v);
            out.set(j, i, v);
        }
    }
    Ok(out)
}
