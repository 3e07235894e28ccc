//! Domain types of the multivariate mixed model
//! `Y_j = X_j B + Z_j Λ_j + E_j` and the likelihood evaluated on them.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::kernel::GroupKernel;
use crate::linalg::{self, SYMMETRY_TOL};
use crate::penalty::{penalty_value, PenaltySpec};

/// Dimensions shared by a dataset and the parameters fitted on it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelDims {
    /// Fixed-effect columns, intercept included.
    pub p: usize,
    /// Responses.
    pub r: usize,
    /// Random-effect columns.
    pub q: usize,
    /// Per-group sample sizes.
    pub n: Vec<usize>,
}

impl ModelDims {
    pub fn new(p: usize, r: usize, q: usize, n: Vec<usize>) -> Result<Self> {
        if p == 0 || r == 0 || q == 0 {
            return Err(Error::invalid(format!("p, r, q must be >= 1 (got {p}, {r}, {q})")));
        }
        if n.is_empty() {
            return Err(Error::invalid("at least one group is required"));
        }
        if let Some(j) = n.iter().position(|&nj| nj == 0) {
            return Err(Error::invalid(format!("group {j} has no rows")));
        }
        Ok(Self { p, r, q, n })
    }

    /// Number of groups J.
    pub fn groups(&self) -> usize {
        self.n.len()
    }

    /// Total sample size N.
    pub fn total(&self) -> usize {
        self.n.iter().sum()
    }

    pub fn qr(&self) -> usize {
        self.q * self.r
    }
}

/// One group's design and responses.
#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub label: String,
    /// `n_j × p`; column 0 is the all-ones intercept.
    pub x: DMatrix<f64>,
    /// `n_j × q`.
    pub z: DMatrix<f64>,
    /// `n_j × r`.
    pub y: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupedDataset {
    dims: ModelDims,
    groups: Vec<Group>,
}

impl GroupedDataset {
    pub fn new(groups: Vec<Group>) -> Result<Self> {
        let first = groups
            .first()
            .ok_or_else(|| Error::invalid("dataset has no groups"))?;
        let (p, q, r) = (first.x.ncols(), first.z.ncols(), first.y.ncols());
        let dims = ModelDims::new(p, r, q, groups.iter().map(|g| g.x.nrows()).collect())?;
        for (j, g) in groups.iter().enumerate() {
            let nj = g.x.nrows();
            if g.x.ncols() != p || g.z.shape() != (nj, q) || g.y.shape() != (nj, r) {
                return Err(Error::shape(format!(
                    "group {j} (`{}`): X {:?}, Z {:?}, Y {:?} inconsistent with p={p}, q={q}, r={r}",
                    g.label,
                    g.x.shape(),
                    g.z.shape(),
                    g.y.shape()
                )));
            }
            if g.x.column(0).iter().any(|&v| v != 1.0) {
                return Err(Error::invalid(format!(
                    "group {j} (`{}`): first column of X must be the all-ones intercept",
                    g.label
                )));
            }
            if !(linalg::is_finite(&g.x) && linalg::is_finite(&g.z) && linalg::is_finite(&g.y)) {
                return Err(Error::invalid(format!("group {j} (`{}`) has non-finite entries", g.label)));
            }
        }
        for (a, ga) in groups.iter().enumerate() {
            if groups[..a].iter().any(|gb| gb.label == ga.label) {
                return Err(Error::invalid(format!("duplicate group label `{}`", ga.label)));
            }
        }
        Ok(Self { dims, groups })
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn groups(&self) -> &[Group] {
        &self.groups
    }

    pub fn labels(&self) -> Vec<String> {
        self.groups.iter().map(|g| g.label.clone()).collect()
    }

    pub fn position(&self, label: &str) -> Option<usize> {
        self.groups.iter().position(|g| g.label == label)
    }

    fn stack(&self, pick: impl Fn(&Group) -> &DMatrix<f64>) -> DMatrix<f64> {
        let cols = pick(&self.groups[0]).ncols();
        let mut out = DMatrix::zeros(self.dims.total(), cols);
        let mut row = 0;
        for g in &self.groups {
            let m = pick(g);
            out.rows_mut(row, m.nrows()).copy_from(m);
            row += m.nrows();
        }
        out
    }

    /// Rows of all X_j stacked in group order (N × p).
    pub fn stacked_x(&self) -> DMatrix<f64> {
        self.stack(|g| &g.x)
    }

    pub fn stacked_y(&self) -> DMatrix<f64> {
        self.stack(|g| &g.y)
    }

    /// Keeps, for each group, the listed row indices (local to that group).
    /// Groups left empty are dropped.
    pub fn subset(&self, rows: &[Vec<usize>]) -> Result<Self> {
        if rows.len() != self.groups.len() {
            return Err(Error::shape(format!(
                "row selection covers {} groups, dataset has {}",
                rows.len(),
                self.groups.len()
            )));
        }
        let pick = |m: &DMatrix<f64>, idx: &[usize]| {
            DMatrix::from_fn(idx.len(), m.ncols(), |i, c| m[(idx[i], c)])
        };
        let mut out = Vec::new();
        for (g, idx) in self.groups.iter().zip(rows) {
            if let Some(&bad) = idx.iter().find(|&&i| i >= g.x.nrows()) {
                return Err(Error::shape(format!("row {bad} out of range for group `{}`", g.label)));
            }
            if idx.is_empty() {
                continue;
            }
            out.push(Group {
                label: g.label.clone(),
                x: pick(&g.x, idx),
                z: pick(&g.z, idx),
                y: pick(&g.y, idx),
            });
        }
        Self::new(out)
    }
}

/// The parameter triple θ = {B, Σ, Ψ}.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// `p × r` fixed effects; row 0 holds the intercepts.
    pub b: DMatrix<f64>,
    /// `r × r` residual covariance.
    pub sigma: DMatrix<f64>,
    /// `qr × qr` covariance of vec(Λ_j); block (h, k) of size q × q pairs responses h and k.
    pub psi: DMatrix<f64>,
}

impl ModelParams {
    /// Validates symmetry and definiteness. Ψ eigenvalues in [-1e-10, 0) are
    /// clamped to zero.
    pub fn new(b: DMatrix<f64>, sigma: DMatrix<f64>, psi: DMatrix<f64>) -> Result<Self> {
        let r = b.ncols();
        if sigma.shape() != (r, r) {
            return Err(Error::shape(format!("Sigma is {:?}, expected {r}x{r}", sigma.shape())));
        }
        if psi.nrows() != psi.ncols() || !psi.nrows().is_multiple_of(r) || psi.nrows() == 0 {
            return Err(Error::shape(format!("Psi is {:?}, expected qr x qr with r={r}", psi.shape())));
        }
        if !linalg::is_finite(&b) {
            return Err(Error::invalid("B has non-finite entries"));
        }
        if linalg::max_asymmetry(&sigma) > SYMMETRY_TOL {
            return Err(Error::SingularCovariance("Sigma is not symmetric".into()));
        }
        if linalg::max_asymmetry(&psi) > SYMMETRY_TOL {
            return Err(Error::SingularPrior("Psi is not symmetric".into()));
        }
        let sigma = linalg::symmetrize(&sigma);
        linalg::cholesky(&sigma, "Sigma")?;
        let psi = linalg::symmetrize(&psi);
        if !linalg::is_finite(&psi) {
            return Err(Error::SingularPrior("Psi has non-finite entries".into()));
        }
        let min_eig = linalg::min_eigenvalue(&psi);
        let psi = if min_eig < -SYMMETRY_TOL {
            return Err(Error::SingularPrior(format!("minimum eigenvalue {min_eig:e}")));
        } else if min_eig < 0.0 {
            linalg::psd_project(&psi)
        } else {
            psi
        };
        Ok(Self { b, sigma, psi })
    }

    pub fn p(&self) -> usize {
        self.b.nrows()
    }

    pub fn r(&self) -> usize {
        self.b.ncols()
    }

    pub fn q(&self) -> usize {
        self.psi.nrows() / self.r()
    }

    pub(crate) fn check_against(&self, dims: &ModelDims) -> Result<()> {
        if self.p() != dims.p || self.r() != dims.r || self.q() != dims.q {
            return Err(Error::shape(format!(
                "parameters are (p={}, r={}, q={}), data are (p={}, r={}, q={})",
                self.p(),
                self.r(),
                self.q(),
                dims.p,
                dims.r,
                dims.q
            )));
        }
        Ok(())
    }
}

/// Per-group random-effect predictions Λ̂_j (q × r each).
#[derive(Debug, Clone, PartialEq)]
pub struct RandomEffects {
    pub labels: Vec<String>,
    pub lambdas: Vec<DMatrix<f64>>,
}

impl RandomEffects {
    pub fn zeros(labels: Vec<String>, q: usize, r: usize) -> Self {
        let lambdas = labels.iter().map(|_| DMatrix::zeros(q, r)).collect();
        Self { labels, lambdas }
    }

    pub fn get(&self, label: &str) -> Option<&DMatrix<f64>> {
        self.labels.iter().position(|l| l == label).map(|j| &self.lambdas[j])
    }
}

/// Gaussian marginal log-likelihood of the data, summed over groups.
///
/// Uses the Woodbury/determinant lemma on `V_j = U Ψ U' + Σ ⊗ I` with
/// `U = I_r ⊗ Z_j`, so only `r × r` and `qr × qr` matrices are factored.
pub fn marginal_loglik(data: &GroupedDataset, params: &ModelParams) -> Result<f64> {
    params.check_against(data.dims())?;
    let shared = crate::kernel::SharedFactors::new(params)?;
    let mut total = 0.0;
    for g in data.groups() {
        total += GroupKernel::new(g, params, &shared)?.loglik();
    }
    Ok(total)
}

/// Gradient of [`marginal_loglik`] with respect to B:
/// `Σ_j X_j' (E_j − Z_j Λ̂_j) Σ⁻¹` with `E_j = Y_j − X_j B` and `Λ̂_j` the
/// posterior mean, which is `Σ_j X_j' mat(V_j⁻¹ vec E_j)`.
pub fn loglik_gradient(data: &GroupedDataset, params: &ModelParams) -> Result<DMatrix<f64>> {
    params.check_against(data.dims())?;
    let shared = crate::kernel::SharedFactors::new(params)?;
    let (q, r) = (params.q(), params.r());
    let mut grad = DMatrix::zeros(params.p(), r);
    for g in data.groups() {
        let e = &g.y - &g.x * &params.b;
        let mean = GroupKernel::from_residual(&g.z, &e, &shared)?.posterior_mean();
        let lambda = DMatrix::from_column_slice(q, r, mean.as_slice());
        grad += g.x.transpose() * (e - &g.z * lambda) * &shared.sigma_inv;
    }
    Ok(grad)
}

/// Penalized objective: marginal log-likelihood minus the penalty on B.
pub fn penalized_loglik(data: &GroupedDataset, params: &ModelParams, spec: &PenaltySpec) -> Result<f64> {
    Ok(marginal_loglik(data, params)? - penalty_value(&params.b, spec)?)
}

/// Predicts responses for `x_new` (m × p).
///
/// With `group = Some((label, z_new))` the group's BLUP is added; without it
/// the random effect sits at its prior mean of zero.
pub fn predict(
    x_new: &DMatrix<f64>,
    params: &ModelParams,
    blups: &RandomEffects,
    group: Option<(&str, &DMatrix<f64>)>,
) -> Result<DMatrix<f64>> {
    if x_new.ncols() != params.p() {
        return Err(Error::shape(format!("X_new has {} columns, B has {} rows", x_new.ncols(), params.p())));
    }
    let mut out = x_new * &params.b;
    if let Some((label, z_new)) = group {
        let lambda = blups.get(label).ok_or_else(|| Error::MissingGroup(label.to_string()))?;
        if z_new.shape() != (x_new.nrows(), lambda.nrows()) {
            return Err(Error::shape(format!(
                "Z_new is {:?}, expected {}x{}",
                z_new.shape(),
                x_new.nrows(),
                lambda.nrows()
            )));
        }
        out += z_new * lambda;
    }
    Ok(out)
}
