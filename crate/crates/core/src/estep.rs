//! Conditional moments of the random effects given the data.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::kernel::{GroupKernel, SharedFactors};
use crate::model::{GroupedDataset, ModelParams, RandomEffects};

/// Posterior moments for every group, in dataset group order.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMoments {
    /// Γ̂_j, `qr × qr`.
    pub gamma: Vec<DMatrix<f64>>,
    /// vec(Λ̂_j), length `qr` (column-major vec of the `q × r` matrix).
    pub mean: Vec<DVector<f64>>,
    /// R̂_j = Γ̂_j + vec(Λ̂_j) vec(Λ̂_j)'.
    pub second_moment: Vec<DMatrix<f64>>,
}

impl PosteriorMoments {
    pub fn blups(&self, labels: Vec<String>, q: usize, r: usize) -> RandomEffects {
        let lambdas = self
            .mean
            .iter()
            .map(|m| DMatrix::from_column_slice(q, r, m.as_slice()))
            .collect();
        RandomEffects { labels, lambdas }
    }
}

fn check_z(z: &DMatrix<f64>, params: &ModelParams) -> Result<()> {
    if z.ncols() != params.q() {
        return Err(Error::shape(format!("Z has {} columns, Psi implies q={}", z.ncols(), params.q())));
    }
    Ok(())
}

/// `Γ̂_j = [Σ^{-1} ⊗ Z_j'Z_j + Ψ^{-1}]^{-1}`, evaluated as
/// `Ψ^{1/2}(I + Ψ^{1/2}(Σ^{-1} ⊗ Z_j'Z_j)Ψ^{1/2})^{-1}Ψ^{1/2}` so that a
/// singular Ψ yields the exact limiting posterior instead of a failure.
pub fn posterior_covariance(z: &DMatrix<f64>, params: &ModelParams) -> Result<DMatrix<f64>> {
    check_z(z, params)?;
    let shared = SharedFactors::new(params)?;
    let e = DMatrix::zeros(z.nrows(), params.r());
    Ok(GroupKernel::from_residual(z, &e, &shared)?.posterior_covariance())
}

/// `Γ̂_j vec(Z_j'(Y_j - X_j B)Σ^{-1})`.
pub fn posterior_mean(
    x: &DMatrix<f64>,
    z: &DMatrix<f64>,
    y: &DMatrix<f64>,
    params: &ModelParams,
    gamma: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    check_z(z, params)?;
    if x.ncols() != params.p() || y.ncols() != params.r() || x.nrows() != y.nrows() || z.nrows() != y.nrows() {
        return Err(Error::shape("X, Z, Y rows or columns inconsistent with parameters"));
    }
    let qr = params.q() * params.r();
    if gamma.shape() != (qr, qr) {
        return Err(Error::shape(format!("Gamma is {:?}, expected {qr}x{qr}", gamma.shape())));
    }
    let sigma_inv = crate::linalg::cholesky(&params.sigma, "Sigma")?.inverse();
    let w = z.transpose() * (y - x * &params.b) * sigma_inv;
    Ok(gamma * DVector::from_column_slice(w.as_slice()))
}

/// `R̂_j = Γ̂_j + m m'`.
pub fn posterior_second_moment(gamma: &DMatrix<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    gamma + mean * mean.transpose()
}

/// Full E-step, also returning the marginal log-likelihood at `params`
/// (both come out of the same per-group factorization).
pub fn e_step(data: &GroupedDataset, params: &ModelParams) -> Result<(PosteriorMoments, f64)> {
    params.check_against(data.dims())?;
    let shared = SharedFactors::new(params)?;
    let j = data.groups().len();
    let mut moments = PosteriorMoments {
        gamma: Vec::with_capacity(j),
        mean: Vec::with_capacity(j),
        second_moment: Vec::with_capacity(j),
    };
    let mut loglik = 0.0;
    for g in data.groups() {
        let k = GroupKernel::new(g, params, &shared)?;
        loglik += k.loglik();
        let gamma = k.posterior_covariance();
        let mean = k.posterior_mean();
        moments.second_moment.push(posterior_second_moment(&gamma, &mean));
        moments.gamma.push(gamma);
        moments.mean.push(mean);
    }
    Ok((moments, loglik))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn scalar(sigma: f64, psi: f64, b: f64) -> ModelParams {
        ModelParams::new(
            DMatrix::from_element(1, 1, b),
            DMatrix::from_element(1, 1, sigma),
            DMatrix::from_element(1, 1, psi),
        )
        .unwrap()
    }

    #[test]
    fn scalar_covariance_and_mean() {
        let p = scalar(1.0, 1.0, 0.0);
        let one = DMatrix::from_element(1, 1, 1.0);
        let g = posterior_covariance(&one, &p).unwrap();
        assert_abs_diff_eq!(g[(0, 0)], 0.5, epsilon = 1e-14);
        let m = posterior_mean(&one, &one, &DMatrix::from_element(1, 1, 2.0), &p, &g).unwrap();
        assert_abs_diff_eq!(m[0], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn no_data_information_returns_prior() {
        let psi = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let p = ModelParams::new(DMatrix::zeros(1, 2), DMatrix::identity(2, 2), psi.clone()).unwrap();
        let g = posterior_covariance(&DMatrix::zeros(4, 1), &p).unwrap();
        assert_abs_diff_eq!(g, psi, epsilon = 1e-12);
    }

    #[test]
    fn diagonal_blocks_reduce_to_scalars() {
        // r = 2, q = 1, Z = ones(3): Γ_cc = (3/σ_c + 1/ψ_c)^{-1}
        let sigma = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 0.5]));
        let psi = DMatrix::from_diagonal(&DVector::from_vec(vec![1.5, 4.0]));
        let p = ModelParams::new(DMatrix::zeros(1, 2), sigma, psi).unwrap();
        let g = posterior_covariance(&DMatrix::from_element(3, 1, 1.0), &p).unwrap();
        assert_abs_diff_eq!(g[(0, 0)], 1.0 / (3.0 / 2.0 + 1.0 / 1.5), epsilon = 1e-13);
        assert_abs_diff_eq!(g[(1, 1)], 1.0 / (3.0 / 0.5 + 1.0 / 4.0), epsilon = 1e-13);
        assert_abs_diff_eq!(g[(0, 1)], 0.0, epsilon = 1e-14);
    }

    #[test]
    fn vanishing_prior_shrinks_mean_to_zero() {
        let p = scalar(1.0, 1e-12, 0.0);
        let one = DMatrix::from_element(1, 1, 1.0);
        let g = posterior_covariance(&one, &p).unwrap();
        let m = posterior_mean(&one, &one, &DMatrix::from_element(1, 1, 2.0), &p, &g).unwrap();
        assert!(m[0].abs() < 1e-11);
    }

    #[test]
    fn zero_residual_zero_mean() {
        let p = scalar(1.0, 1.0, 3.0);
        let one = DMatrix::from_element(1, 1, 1.0);
        let g = posterior_covariance(&one, &p).unwrap();
        let m = posterior_mean(&one, &one, &DMatrix::from_element(1, 1, 3.0), &p, &g).unwrap();
        assert_eq!(m[0], 0.0);
    }

    #[test]
    fn second_moment_cases() {
        let g = DMatrix::from_element(1, 1, 0.5);
        let m = DVector::from_element(1, 1.0);
        assert_eq!(posterior_second_moment(&g, &m)[(0, 0)], 1.5);
        assert_eq!(posterior_second_moment(&g, &DVector::zeros(1)), g);
        let m2 = DVector::from_vec(vec![1.0, -2.0]);
        assert_eq!(posterior_second_moment(&DMatrix::zeros(2, 2), &m2), &m2 * m2.transpose());
    }
}
