//! Per-group factorization shared by the likelihood and the E-step.
//!
//! With `U = I_r ⊗ Z_j`, `M = U'(Σ ⊗ I)^{-1}U = Σ^{-1} ⊗ Z_j'Z_j` and
//! `S = Ψ^{1/2}`, everything reduces to the `qr × qr` matrix
//! `K = I + S M S`:
//!
//! * `log|V_j| = n_j log|Σ| + log|K|`
//! * `e'V_j^{-1}e = tr(Σ^{-1}E'E) - u'K^{-1}u` with `u = S vec(Z'EΣ^{-1})`
//! * `Γ_j = S K^{-1} S`, `vec(Λ̂_j) = S K^{-1} u`
//!
//! None of these need Ψ^{-1}, so a singular Ψ is handled exactly.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::Result;
use crate::linalg;
use crate::model::{Group, ModelParams};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

pub(crate) struct SharedFactors {
    pub sigma_inv: DMatrix<f64>,
    pub log_det_sigma: f64,
    pub psi_sqrt: DMatrix<f64>,
}

impl SharedFactors {
    pub fn new(params: &ModelParams) -> Result<Self> {
        let chol = linalg::cholesky(&params.sigma, "Sigma")?;
        Ok(Self {
            sigma_inv: linalg::symmetrize(&chol.inverse()),
            log_det_sigma: linalg::log_det_chol(&chol),
            psi_sqrt: linalg::psd_sqrt(&params.psi),
        })
    }
}

pub(crate) struct GroupKernel<'a> {
    shared: &'a SharedFactors,
    n: usize,
    r: usize,
    quad0: f64,
    u: DVector<f64>,
    k_chol: Cholesky<f64, Dyn>,
    /// `K^{-1} u`
    k_inv_u: DVector<f64>,
}

impl<'a> GroupKernel<'a> {
    pub fn new(g: &Group, params: &ModelParams, shared: &'a SharedFactors) -> Result<Self> {
        let e = &g.y - &g.x * &params.b;
        Self::from_residual(&g.z, &e, shared)
    }

    pub fn from_residual(z: &DMatrix<f64>, e: &DMatrix<f64>, shared: &'a SharedFactors) -> Result<Self> {
        let (n, r) = e.shape();
        let ete = e.transpose() * e;
        let quad0 = shared.sigma_inv.component_mul(&ete).sum();
        let ztz = z.transpose() * z;
        let m = shared.sigma_inv.kronecker(&ztz);
        let w_mat = z.transpose() * e * &shared.sigma_inv;
        let w = DVector::from_column_slice(w_mat.as_slice());
        let s = &shared.psi_sqrt;
        let qr = s.nrows();
        let k = DMatrix::identity(qr, qr) + s * m * s;
        let k_chol = linalg::cholesky(&k, "I + Psi^1/2 M Psi^1/2")?;
        let u = s * w;
        let k_inv_u = k_chol.solve(&u);
        Ok(Self { shared, n, r, quad0, u, k_chol, k_inv_u })
    }

    pub fn loglik(&self) -> f64 {
        let nr = (self.n * self.r) as f64;
        let log_det_v = self.n as f64 * self.shared.log_det_sigma + linalg::log_det_chol(&self.k_chol);
        let quad = self.quad0 - self.u.dot(&self.k_inv_u);
        -0.5 * nr * LN_2PI - 0.5 * log_det_v - 0.5 * quad
    }

    pub fn posterior_covariance(&self) -> DMatrix<f64> {
        let s = &self.shared.psi_sqrt;
        linalg::symmetrize(&(s * self.k_chol.solve(s)))
    }

    pub fn posterior_mean(&self) -> DVector<f64> {
        &self.shared.psi_sqrt * &self.k_inv_u
    }
}
