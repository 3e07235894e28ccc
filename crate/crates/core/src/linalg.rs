//! Small dense helpers on top of nalgebra: symmetric square roots, PSD
//! projection and Cholesky-based solves.

use nalgebra::{Cholesky, DMatrix, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Eigenvalue floor for the symmetric square roots of a residual covariance.
pub const SQRT_EIGEN_FLOOR: f64 = 1e-12;

/// Tolerance used when checking symmetry of covariance inputs.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Returns (M + M') / 2.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for j in 0..m.ncols() {
        for i in 0..j {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub fn is_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

fn eigen(m: &DMatrix<f64>) -> SymmetricEigen<f64, Dyn> {
    SymmetricEigen::new(symmetrize(m))
}

fn rebuild(e: &SymmetricEigen<f64, Dyn>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(f));
    symmetrize(&(&e.eigenvectors * d * e.eigenvectors.transpose()))
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    eigen(m).eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Symmetric square root of a positive-definite matrix, eigenvalues floored
/// at [`SQRT_EIGEN_FLOOR`].
pub fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    rebuild(&eigen(m), |l| l.max(SQRT_EIGEN_FLOOR).sqrt())
}

/// Symmetric inverse square root, eigenvalues floored at [`SQRT_EIGEN_FLOOR`].
pub fn sym_inv_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    rebuild(&eigen(m), |l| 1.0 / l.max(SQRT_EIGEN_FLOOR).sqrt())
}

/// Square root of a PSD matrix with negative eigenvalues clamped to zero.
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    rebuild(&eigen(m), |l| l.max(0.0).sqrt())
}

/// Nearest PSD matrix in Frobenius norm (eigenvalue clipping at 0).
pub fn psd_project(m: &DMatrix<f64>) -> DMatrix<f64> {
    rebuild(&eigen(m), |l| l.max(0.0))
}

/// Cholesky factor of an SPD matrix, or `SingularCovariance` naming `what`.
pub fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    if !is_finite(m) {
        return Err(Error::SingularCovariance(format!("{what} has non-finite entries")));
    }
    Cholesky::new(symmetrize(m))
        .ok_or_else(|| Error::SingularCovariance(format!("{what} is not positive definite")))
}

pub fn log_det_chol(c: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * c.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

pub fn frobenius(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}
