//! Dense real-matrix numerics shared by the estimator, the gain-design
//! procedures and the cone solver.
//!
//! Everything here is a pure function of its inputs. Matrices are plain
//! [`nalgebra::DMatrix<f64>`] values; the helpers below add the contract
//! checks (squareness, symmetry, finiteness) the rest of the crate relies on.

use nalgebra::{DMatrix, DVector, Schur, SymmetricEigen};
use thiserror::Error;

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Tolerance on `‖S − Sᵀ‖_max` before a matrix is rejected as asymmetric.
pub const SYMMETRY_TOL: f64 = 1e-9;

/// Singular values of a Gram matrix below `PINV_RTOL · σ_max` are truncated.
pub const PINV_RTOL: f64 = 1e-10;

const EIG_EPS: f64 = 1e-15;
const EIG_MAX_ITERS: usize = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatrixError {
    #[error("expected a square matrix, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("dimension mismatch in {context}: {detail}")]
    Dimension { context: &'static str, detail: String },
    #[error("matrix is not symmetric (max asymmetry {asymmetry:.3e})")]
    NotSymmetric { asymmetry: f64 },
    #[error("matrix is not positive semidefinite (min eigenvalue {min_eigenvalue:.3e})")]
    NotPsd { min_eigenvalue: f64 },
    #[error("matrix is singular or too ill-conditioned to invert")]
    Singular,
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("eigenvalue iteration did not converge")]
    NoConvergence,
}

pub type Result<T> = std::result::Result<T, MatrixError>;

/// Builds a matrix from row slices. Panics on ragged input; intended for
/// literals and tests.
pub fn from_rows(rows: &[&[f64]]) -> Matrix {
    let r = rows.len();
    let c = rows.first().map_or(0, |row| row.len());
    assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
    Matrix::from_fn(r, c, |i, j| rows[i][j])
}

pub fn ensure_square(m: &Matrix) -> Result<()> {
    if m.nrows() == m.ncols() {
        Ok(())
    } else {
        Err(MatrixError::NotSquare { rows: m.nrows(), cols: m.ncols() })
    }
}

pub fn ensure_finite(m: &Matrix) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(MatrixError::NonFinite)
    }
}

pub fn ensure_shape(m: &Matrix, rows: usize, cols: usize, context: &'static str) -> Result<()> {
    if m.nrows() == rows && m.ncols() == cols {
        Ok(())
    } else {
        Err(MatrixError::Dimension {
            context,
            detail: format!("expected {rows}x{cols}, got {}x{}", m.nrows(), m.ncols()),
        })
    }
}

/// `(S + Sᵀ)/2` after checking `S` is symmetric within [`SYMMETRY_TOL`].
pub fn symmetrize(s: &Matrix) -> Result<Matrix> {
    ensure_square(s)?;
    let asymmetry = (s - s.transpose()).amax();
    if asymmetry > SYMMETRY_TOL * (1.0 + s.amax()) {
        return Err(MatrixError::NotSymmetric { asymmetry });
    }
    Ok((s + s.transpose()) * 0.5)
}

/// Symmetric eigendecomposition of the symmetrized input.
pub fn symmetric_eigen(s: &Matrix) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = symmetrize(s)?;
    ensure_finite(&sym)?;
    SymmetricEigen::try_new(sym, EIG_EPS, EIG_MAX_ITERS).ok_or(MatrixError::NoConvergence)
}

pub fn min_eigenvalue(s: &Matrix) -> Result<f64> {
    let eig = symmetric_eigen(s)?;
    Ok(eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min))
}

fn rebuild(eig: &SymmetricEigen<f64, nalgebra::Dyn>, f: impl Fn(f64) -> f64) -> Matrix {
    let v = &eig.eigenvectors;
    let d = Vector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|&l| f(l)));
    let mut scaled = v.clone();
    for (mut col, &w) in scaled.column_iter_mut().zip(d.iter()) {
        col *= w;
    }
    let out = scaled * v.transpose();
    (&out + out.transpose()) * 0.5
}

/// Spectral radius via Hessenberg reduction and shifted QR (real Schur form).
pub fn spectral_radius(m: &Matrix) -> Result<f64> {
    ensure_square(m)?;
    ensure_finite(m)?;
    if m.nrows() == 1 {
        return Ok(m[(0, 0)].abs());
    }
    let schur = Schur::try_new(m.clone(), EIG_EPS, EIG_MAX_ITERS).ok_or(MatrixError::NoConvergence)?;
    Ok(schur.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max))
}

/// Frobenius-nearest positive semidefinite matrix.
pub fn psd_project(s: &Matrix) -> Result<Matrix> {
    let eig = symmetric_eigen(s)?;
    Ok(rebuild(&eig, |l| l.max(0.0)))
}

/// Projection onto `{X : X ⪰ margin·I}`.
pub fn psd_project_with_margin(s: &Matrix, margin: f64) -> Result<Matrix> {
    let eig = symmetric_eigen(s)?;
    Ok(rebuild(&eig, |l| l.max(margin)))
}

/// Symmetric PSD square root. Eigenvalues in `[-1e-9, 0)` are clamped to zero.
pub fn sqrt_psd(s: &Matrix) -> Result<Matrix> {
    let eig = symmetric_eigen(s)?;
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min < -1e-9 {
        return Err(MatrixError::NotPsd { min_eigenvalue: min });
    }
    Ok(rebuild(&eig, |l| l.max(0.0).sqrt()))
}

/// True iff the smallest eigenvalue of the symmetrized `s` exceeds `margin`.
pub fn is_positive_definite(s: &Matrix, margin: f64) -> bool {
    match min_eigenvalue(s) {
        Ok(l) => l > margin,
        Err(e) => {
            log::warn!("definiteness test failed: {e}");
            false
        }
    }
}

/// Moore-Penrose pseudo-inverse of a symmetric PSD matrix, together with its
/// numerical rank.
pub fn pinv_psd(s: &Matrix) -> Result<(Matrix, usize)> {
    let eig = symmetric_eigen(s)?;
    let max = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let cutoff = PINV_RTOL * max;
    let rank = eig.eigenvalues.iter().filter(|&&l| l > cutoff && l > 0.0).count();
    let inv = rebuild(&eig, |l| if l > cutoff && l > 0.0 { 1.0 / l } else { 0.0 });
    Ok((inv, rank))
}

/// Result of [`solve_min_frobenius`].
#[derive(Debug, Clone)]
pub struct MinNormSolution {
    pub value: Matrix,
    pub rank: usize,
    /// Set when the Gram matrix `G·Gᵀ` was rank deficient and the
    /// minimum-norm minimizer was returned.
    pub degenerate: bool,
}

/// Minimizes `‖Z·G − T‖_F` over `Z`, returning `T·Gᵀ·(G·Gᵀ)⁺`.
pub fn solve_min_frobenius(t: &Matrix, g: &Matrix) -> Result<MinNormSolution> {
    if t.ncols() != g.ncols() {
        return Err(MatrixError::Dimension {
            context: "solve_min_frobenius",
            detail: format!("target has {} columns, factor has {}", t.ncols(), g.ncols()),
        });
    }
    let gram = g * g.transpose();
    let (gram_pinv, rank) = pinv_psd(&gram)?;
    let value = t * g.transpose() * gram_pinv;
    Ok(MinNormSolution { value, rank, degenerate: rank < g.nrows() })
}

/// Inverse of a square matrix via LU, rejecting singular input.
pub fn inverse(m: &Matrix) -> Result<Matrix> {
    ensure_square(m)?;
    m.clone().try_inverse().filter(|inv| inv.iter().all(|v| v.is_finite())).ok_or(MatrixError::Singular)
}

/// Inverse of a symmetric positive definite matrix via Cholesky.
pub fn inverse_spd(m: &Matrix) -> Result<Matrix> {
    let sym = symmetrize(m)?;
    let chol = sym.cholesky().ok_or(MatrixError::Singular)?;
    let inv = chol.inverse();
    Ok((&inv + inv.transpose()) * 0.5)
}

/// 2-norm condition number of a symmetric positive definite matrix.
pub fn condition_spd(m: &Matrix) -> Result<f64> {
    let eig = symmetric_eigen(m)?;
    let max = eig.eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(max / min)
}

/// Largest singular value.
pub fn spectral_norm(m: &Matrix) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().iter().copied().fold(0.0, f64::max)
}

pub fn frobenius_norm(m: &Matrix) -> f64 {
    m.norm()
}

/// Block-diagonal concatenation.
pub fn block_diag(blocks: &[Matrix]) -> Matrix {
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let cols = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Matrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// Vertical concatenation; all blocks must share a column count.
pub fn vstack(blocks: &[Matrix]) -> Result<Matrix> {
    let cols = blocks.first().map_or(0, |b| b.ncols());
    if blocks.iter().any(|b| b.ncols() != cols) {
        return Err(MatrixError::Dimension { context: "vstack", detail: "column counts differ".into() });
    }
    let rows = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = Matrix::zeros(rows, cols);
    let mut r = 0;
    for b in blocks {
        out.view_mut((r, 0), (b.nrows(), cols)).copy_from(b);
        r += b.nrows();
    }
    Ok(out)
}

/// Horizontal concatenation; all blocks must share a row count.
pub fn hstack(blocks: &[Matrix]) -> Result<Matrix> {
    let rows = blocks.first().map_or(0, |b| b.nrows());
    if blocks.iter().any(|b| b.nrows() != rows) {
        return Err(MatrixError::Dimension { context: "hstack", detail: "row counts differ".into() });
    }
    let cols = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Matrix::zeros(rows, cols);
    let mut c = 0;
    for b in blocks {
        out.view_mut((0, c), (rows, b.ncols())).copy_from(b);
        c += b.ncols();
    }
    Ok(out)
}
