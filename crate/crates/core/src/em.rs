//! ECM fitting of the penalized multivariate mixed model.
//!
//! Each iteration runs the E-step at the current θ, then three conditional
//! maximizations in order: B (penalized regression on whitened responses,
//! back-transformed by Σ^{1/2}), Ψ (mean of the posterior second moments)
//! and Σ (expected residual cross-products). Convergence is declared when the
//! relative change of the penalized log-likelihood drops below ε.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::estep::{e_step, PosteriorMoments};
use crate::linalg;
use crate::model::{marginal_loglik, GroupedDataset, ModelParams, RandomEffects};
use crate::penalty::{penalty_value, PenaltySpec};
use crate::solver::{self, Design, SolverConfig, SolverSolution};

#[derive(Debug, Clone, PartialEq)]
pub struct EmConfig {
    /// Relative-change threshold on the penalized log-likelihood.
    pub epsilon: f64,
    pub max_iter: usize,
    pub solver: SolverConfig,
    /// Keep a per-iteration [`TraceRecord`].
    pub trace: bool,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self { epsilon: 1e-6, max_iter: 500, solver: SolverConfig::default(), trace: false }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if self.max_iter == 0 {
            return Err(Error::invalid("max_iter must be >= 1"));
        }
        self.solver.validate()
    }
}

/// One line of the optional iteration log.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub iteration: usize,
    pub objective: f64,
    /// Penalty at B̂.
    pub penalty: f64,
    /// Penalty at the whitened coefficients B̃ = B̂Σ^{-1/2} that the M-step
    /// actually penalizes.
    pub penalty_whitened: f64,
    pub d0: usize,
    pub max_abs_delta_b: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: ModelParams,
    pub blups: RandomEffects,
    pub moments: PosteriorMoments,
    /// Penalized log-likelihood at θ⁽⁰⁾, θ⁽¹⁾, ...
    pub objective_trace: Vec<f64>,
    pub records: Vec<TraceRecord>,
    pub iterations: usize,
    pub converged: bool,
    /// Unpenalized marginal log-likelihood at θ̂.
    pub loglik: f64,
    pub d0: usize,
    pub penalty: PenaltySpec,
    /// False for fits without random effects (Ψ fixed at 0).
    pub random_effects: bool,
    /// Last whitened solver solution B̃.
    pub b_tilde: DMatrix<f64>,
}

impl FitResult {
    pub fn objective(&self) -> f64 {
        *self.objective_trace.last().expect("trace is never empty")
    }
}

/// Number of estimated parameters: nonzero entries of B̂ plus the free
/// entries of Σ̂ and, for mixed models, of Ψ̂.
pub fn count_d0(b: &DMatrix<f64>, q: usize, random_effects: bool) -> usize {
    let r = b.ncols();
    let nnz = b.iter().filter(|&&v| v != 0.0).count();
    let cov = r * (r + 1) / 2;
    let qr = q * r;
    nnz + cov + if random_effects { qr * (qr + 1) / 2 } else { 0 }
}

/// θ⁽⁰⁾: Σ = I_r, Ψ = I_qr and B from the penalized fixed-effects model on Y.
pub fn initialize(data: &GroupedDataset, spec: &PenaltySpec, cfg: &EmConfig) -> Result<ModelParams> {
    let design = Design::new(data.stacked_x())?;
    initialize_with(&design, data, spec, cfg)
}

fn initialize_with(design: &Design, data: &GroupedDataset, spec: &PenaltySpec, cfg: &EmConfig) -> Result<ModelParams> {
    let dims = data.dims();
    let sol = solver::solve(design, &data.stacked_y(), spec, &cfg.solver, None)?;
    ModelParams::new(sol.b, DMatrix::identity(dims.r, dims.r), DMatrix::identity(dims.qr(), dims.qr()))
}

/// Output of the B conditional maximization.
#[derive(Debug, Clone)]
pub struct BUpdate {
    /// B̂ = B̃Σ^{1/2}.
    pub b: DMatrix<f64>,
    pub solution: SolverSolution,
}

/// Ỹ_j = Y_j − Z_jΛ̂_j stacked over groups.
pub fn adjusted_responses(data: &GroupedDataset, moments: &PosteriorMoments) -> DMatrix<f64> {
    let dims = data.dims();
    let mut out = DMatrix::zeros(dims.total(), dims.r);
    let mut row = 0;
    for (g, mean) in data.groups().iter().zip(&moments.mean) {
        let lambda = DMatrix::from_column_slice(dims.q, dims.r, mean.as_slice());
        let n = g.y.nrows();
        out.rows_mut(row, n).copy_from(&(&g.y - &g.z * lambda));
        row += n;
    }
    out
}

/// B-step: whiten Ỹ by Σ^{-1/2} on the right, solve the penalized
/// fixed-effects problem for B̃, and return B̂ = B̃Σ^{1/2}.
pub fn m_step_b(
    design: &Design,
    data: &GroupedDataset,
    moments: &PosteriorMoments,
    sigma: &DMatrix<f64>,
    spec: &PenaltySpec,
    cfg: &SolverConfig,
    warm: Option<&DMatrix<f64>>,
) -> Result<BUpdate> {
    let y_tilde = adjusted_responses(data, moments);
    let y_star = &y_tilde * linalg::sym_inv_sqrt(sigma);
    let solution = solver::solve(design, &y_star, spec, cfg, warm)?;
    let b = &solution.b * linalg::sym_sqrt(sigma);
    Ok(BUpdate { b, solution })
}

/// Ψ̂ = (1/J) Σ_j R̂_j, symmetrized.
pub fn m_step_psi(moments: &PosteriorMoments) -> Result<DMatrix<f64>> {
    let first = moments
        .second_moment
        .first()
        .ok_or_else(|| Error::invalid("no groups in posterior moments"))?;
    let mut acc = DMatrix::zeros(first.nrows(), first.ncols());
    for r in &moments.second_moment {
        acc += r;
    }
    Ok(linalg::symmetrize(&(acc / moments.second_moment.len() as f64)))
}

/// Σ̂_(h,k) = (1/N) Σ_j [Ê_jh'Ê_jk + tr(Γ̂_j^(h,k) Z_j'Z_j)] with
/// Ê_j = Y_j − Z_jΛ̂_j − X_jB̂.
pub fn m_step_sigma(data: &GroupedDataset, b: &DMatrix<f64>, moments: &PosteriorMoments) -> Result<DMatrix<f64>> {
    let dims = data.dims();
    if b.shape() != (dims.p, dims.r) {
        return Err(Error::shape(format!("B is {:?}, expected {}x{}", b.shape(), dims.p, dims.r)));
    }
    let (q, r) = (dims.q, dims.r);
    let mut acc = DMatrix::zeros(r, r);
    for ((g, mean), gamma) in data.groups().iter().zip(&moments.mean).zip(&moments.gamma) {
        let lambda = DMatrix::from_column_slice(q, r, mean.as_slice());
        let e = &g.y - &g.z * lambda - &g.x * b;
        acc += e.transpose() * &e;
        let ztz = g.z.transpose() * &g.z;
        for h in 0..r {
            for k in 0..r {
                let block = gamma.view((h * q, k * q), (q, q));
                acc[(h, k)] += block.component_mul(&ztz).sum();
            }
        }
    }
    Ok(linalg::symmetrize(&(acc / dims.total() as f64)))
}

/// Per-response share of variance due to the random effects,
/// `diag Ψ̂_c / (diag Ψ̂_c + diag Σ̂_c)`. With q > 1 the q random-effect
/// variances of a response are summed.
pub fn pvre(params: &ModelParams) -> Result<DVector<f64>> {
    let (q, r) = (params.q(), params.r());
    let mut out = DVector::zeros(r);
    for c in 0..r {
        let re: f64 = (0..q).map(|k| params.psi[(c * q + k, c * q + k)]).sum();
        let total = re + params.sigma[(c, c)];
        if total == 0.0 {
            return Err(Error::UndefinedPvre(c));
        }
        out[c] = re / total;
    }
    Ok(out)
}

/// Fits the penalized mixed model from the default initialization.
pub fn fit(data: &GroupedDataset, spec: &PenaltySpec, cfg: &EmConfig) -> Result<FitResult> {
    fit_from(data, spec, cfg, None)
}

/// Fits from `init` when given (warm start), otherwise from [`initialize`].
pub fn fit_from(
    data: &GroupedDataset,
    spec: &PenaltySpec,
    cfg: &EmConfig,
    init: Option<&ModelParams>,
) -> Result<FitResult> {
    cfg.validate()?;
    let dims = data.dims().clone();
    spec.validate(dims.p, dims.r)?;
    let design = Design::new(data.stacked_x())?;
    let mut params = match init {
        Some(p) => {
            p.check_against(&dims)?;
            p.clone()
        }
        None => initialize_with(&design, data, spec, cfg)?,
    };
    let mut b_tilde = &params.b * linalg::sym_inv_sqrt(&params.sigma);

    let (mut moments, mut loglik) = e_step(data, &params)?;
    let mut objective = loglik - penalty_value(&params.b, spec)?;
    let mut trace = vec![objective];
    let mut records = Vec::new();
    if cfg.trace {
        records.push(TraceRecord {
            iteration: 0,
            objective,
            penalty: penalty_value(&params.b, spec)?,
            penalty_whitened: penalty_value(&b_tilde, spec)?,
            d0: count_d0(&params.b, dims.q, true),
            max_abs_delta_b: 0.0,
        });
    }
    if !objective.is_finite() {
        return Err(Error::Divergence { iteration: 0, trace });
    }

    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        iterations += 1;
        let update = m_step_b(&design, data, &moments, &params.sigma, spec, &cfg.solver, Some(&b_tilde))?;
        let psi = m_step_psi(&moments)?;
        let sigma = m_step_sigma(data, &update.b, &moments)?;
        let delta_b = (&update.b - &params.b).amax();
        b_tilde = update.solution.b;
        params = ModelParams { b: update.b, sigma, psi };
        if !(linalg::is_finite(&params.sigma) && linalg::is_finite(&params.psi)) {
            trace.push(f64::NAN);
            return Err(Error::Divergence { iteration: iterations, trace });
        }

        let (m, ll) = match e_step(data, &params) {
            Ok(v) => v,
            Err(Error::SingularCovariance(_)) => {
                trace.push(f64::NAN);
                return Err(Error::Divergence { iteration: iterations, trace });
            }
            Err(e) => return Err(e),
        };
        moments = m;
        loglik = ll;
        let penalty = penalty_value(&params.b, spec)?;
        let previous = objective;
        objective = loglik - penalty;
        trace.push(objective);
        if cfg.trace {
            records.push(TraceRecord {
                iteration: iterations,
                objective,
                penalty,
                penalty_whitened: penalty_value(&b_tilde, spec)?,
                d0: count_d0(&params.b, dims.q, true),
                max_abs_delta_b: delta_b,
            });
        }
        if !objective.is_finite() {
            return Err(Error::Divergence { iteration: iterations, trace });
        }
        if (objective - previous).abs() / previous.abs().max(1.0) < cfg.epsilon {
            converged = true;
            break;
        }
    }

    let blups = moments.blups(data.labels(), dims.q, dims.r);
    Ok(FitResult {
        d0: count_d0(&params.b, dims.q, true),
        params,
        blups,
        moments,
        objective_trace: trace,
        records,
        iterations,
        converged,
        loglik,
        penalty: spec.clone(),
        random_effects: true,
        b_tilde,
    })
}

/// Penalized multitask regression without random effects: B̂ from the
/// solver on Y directly, Σ̂ = Ê'Ê/N and Ψ fixed at 0.
pub fn fit_fixed_effects(
    data: &GroupedDataset,
    spec: &PenaltySpec,
    cfg: &EmConfig,
    warm: Option<&DMatrix<f64>>,
) -> Result<FitResult> {
    cfg.validate()?;
    let dims = data.dims().clone();
    spec.validate(dims.p, dims.r)?;
    let design = Design::new(data.stacked_x())?;
    let y = data.stacked_y();
    let sol = solver::solve(&design, &y, spec, &cfg.solver, warm)?;
    let resid = &y - design.x() * &sol.b;
    let sigma = linalg::symmetrize(&(resid.transpose() * &resid / dims.total() as f64));
    let qr = dims.qr();
    let params = ModelParams::new(sol.b.clone(), sigma, DMatrix::zeros(qr, qr))?;
    let loglik = marginal_loglik(data, &params)?;
    let penalty = penalty_value(&params.b, spec)?;
    let objective = loglik - penalty;
    let records = if cfg.trace {
        vec![TraceRecord {
            iteration: 0,
            objective,
            penalty,
            penalty_whitened: penalty,
            d0: count_d0(&params.b, dims.q, false),
            max_abs_delta_b: 0.0,
        }]
    } else {
        Vec::new()
    };
    let j = dims.groups();
    let moments = PosteriorMoments {
        gamma: vec![DMatrix::zeros(qr, qr); j],
        mean: vec![DVector::zeros(qr); j],
        second_moment: vec![DMatrix::zeros(qr, qr); j],
    };
    Ok(FitResult {
        d0: count_d0(&params.b, dims.q, false),
        blups: RandomEffects::zeros(data.labels(), dims.q, dims.r),
        moments,
        objective_trace: vec![objective],
        records,
        iterations: 1,
        converged: sol.converged,
        loglik,
        penalty: spec.clone(),
        random_effects: false,
        b_tilde: sol.b,
        params,
    })
}
