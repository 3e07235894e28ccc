//! Cyclic coordinate descent for the penalized multitask least-squares
//! problem
//!
//! ```text
//! minimize_B  ½‖Y - XB‖²_F + p(B)
//! ```
//!
//! with the first column of X an unpenalized intercept. There is no 1/N
//! scaling of the loss, so λ is on the scale of the summed squared error.
//!
//! Each sweep visits entries column-major over (row, response), rows
//! 1..p, and finishes with the intercept row. With the active set enabled,
//! sweeps after the first full pass only visit nonzero entries (rows for
//! the group lasso) until they stall, then a full sweep confirms.

mod entrywise;
mod rowwise;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::penalty::{laplacian, PenaltySpec};

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub max_sweeps: usize,
    /// Convergence when the largest absolute coefficient change in a sweep
    /// falls below this.
    pub tol: f64,
    pub active_set: bool,
    /// Record the objective after every sweep in `SolverSolution::history`.
    pub track_objective: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { max_sweeps: 1000, tol: 1e-7, active_set: true, track_objective: false }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_sweeps == 0 {
            return Err(Error::invalid("max_sweeps must be >= 1"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::invalid(format!("solver tol must be > 0, got {}", self.tol)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverSolution {
    pub b: DMatrix<f64>,
    pub sweeps: usize,
    pub converged: bool,
    pub objective: f64,
    /// Largest violation of the stationarity conditions, expressed as a
    /// coefficient step (gradient violation divided by the coordinate's
    /// curvature) so it is comparable to `SolverConfig::tol`.
    pub kkt_residual: f64,
    /// Columns of X with zero norm; their coefficients are held at 0.
    pub degenerate_columns: Vec<usize>,
    /// Objective after each sweep when tracking is enabled.
    pub history: Vec<f64>,
}

/// `sign(z) max(|z| - γ, 0)`; returns 0 at `|z| = γ`.
pub fn soft_threshold(z: f64, gamma: f64) -> f64 {
    if z > gamma {
        z - gamma
    } else if z < -gamma {
        z + gamma
    } else {
        0.0
    }
}

/// `max(1 - γ/‖v‖₂, 0) v`, and the zero vector for `v = 0`.
pub fn group_soft_threshold(v: &DVector<f64>, gamma: f64) -> DVector<f64> {
    let norm = v.norm();
    if norm <= gamma || norm == 0.0 {
        DVector::zeros(v.len())
    } else {
        v * (1.0 - gamma / norm)
    }
}

/// Stacked design with cached column norms. Column 0 must be all ones.
#[derive(Debug, Clone)]
pub struct Design {
    x: DMatrix<f64>,
    sq_norms: Vec<f64>,
}

impl Design {
    pub fn new(x: DMatrix<f64>) -> Result<Self> {
        if x.ncols() == 0 || x.nrows() == 0 {
            return Err(Error::shape("design has no rows or columns"));
        }
        if x.column(0).iter().any(|&v| v != 1.0) {
            return Err(Error::invalid("first design column must be the all-ones intercept"));
        }
        let sq_norms = x.column_iter().map(|c| c.norm_squared()).collect();
        Ok(Self { x, sq_norms })
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn nrows(&self) -> usize {
        self.x.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.x.ncols()
    }

    pub(crate) fn column(&self, l: usize) -> &[f64] {
        let n = self.x.nrows();
        &self.x.as_slice()[l * n..(l + 1) * n]
    }

    pub(crate) fn sq_norm(&self, l: usize) -> f64 {
        self.sq_norms[l]
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub(crate) trait Sweeper {
    /// One cyclic pass; returns the largest absolute coefficient change.
    fn sweep(&mut self, active_only: bool) -> f64;
    fn objective(&self) -> f64;
}

pub(crate) struct DriveOutcome {
    pub sweeps: usize,
    pub converged: bool,
    pub history: Vec<f64>,
}

fn pass(engine: &mut impl Sweeper, active_only: bool, cfg: &SolverConfig, out: &mut DriveOutcome) -> f64 {
    let change = engine.sweep(active_only);
    out.sweeps += 1;
    if cfg.track_objective {
        out.history.push(engine.objective());
    }
    change
}

pub(crate) fn drive(engine: &mut impl Sweeper, cfg: &SolverConfig) -> DriveOutcome {
    let mut out = DriveOutcome { sweeps: 0, converged: false, history: Vec::new() };
    loop {
        if pass(engine, false, cfg, &mut out) < cfg.tol {
            out.converged = true;
            return out;
        }
        if out.sweeps >= cfg.max_sweeps {
            return out;
        }
        if cfg.active_set {
            while pass(engine, true, cfg, &mut out) >= cfg.tol {
                if out.sweeps >= cfg.max_sweeps {
                    return out;
                }
            }
            if out.sweeps >= cfg.max_sweeps {
                return out;
            }
        }
    }
}

fn check_inputs(design: &Design, y: &DMatrix<f64>, warm: Option<&DMatrix<f64>>, cfg: &SolverConfig) -> Result<()> {
    cfg.validate()?;
    if y.nrows() != design.nrows() {
        return Err(Error::shape(format!("Y has {} rows, X has {}", y.nrows(), design.nrows())));
    }
    if let Some(w) = warm {
        if w.shape() != (design.ncols(), y.ncols()) {
            return Err(Error::shape(format!(
                "warm start is {:?}, expected {}x{}",
                w.shape(),
                design.ncols(),
                y.ncols()
            )));
        }
    }
    Ok(())
}

/// Solves the problem for whichever family `spec` names.
pub fn solve(
    design: &Design,
    y: &DMatrix<f64>,
    spec: &PenaltySpec,
    cfg: &SolverConfig,
    warm: Option<&DMatrix<f64>>,
) -> Result<SolverSolution> {
    spec.validate(design.ncols(), y.ncols())?;
    check_inputs(design, y, warm, cfg)?;
    match spec {
        PenaltySpec::ElasticNet { lambda, alpha } => {
            let pen = entrywise::EntryPenalty::elastic_net(*lambda, *alpha);
            Ok(entrywise::solve(design, y, pen, cfg, warm))
        }
        PenaltySpec::GroupLasso { lambda, alpha } => Ok(rowwise::solve(design, y, *lambda, *alpha, cfg, warm)),
        PenaltySpec::NetworkReg { lambda, lambda_x, lambda_y, graph_x, graph_y } => {
            let pen = entrywise::EntryPenalty::network(
                *lambda,
                *lambda_x,
                laplacian(graph_x),
                *lambda_y,
                laplacian(graph_y),
            );
            Ok(entrywise::solve(design, y, pen, cfg, warm))
        }
    }
}

pub fn solve_elastic_net(
    design: &Design,
    y: &DMatrix<f64>,
    lambda: f64,
    alpha: f64,
    cfg: &SolverConfig,
    warm: Option<&DMatrix<f64>>,
) -> Result<SolverSolution> {
    solve(design, y, &PenaltySpec::ElasticNet { lambda, alpha }, cfg, warm)
}

pub fn solve_group_lasso(
    design: &Design,
    y: &DMatrix<f64>,
    lambda: f64,
    alpha: f64,
    cfg: &SolverConfig,
    warm: Option<&DMatrix<f64>>,
) -> Result<SolverSolution> {
    solve(design, y, &PenaltySpec::GroupLasso { lambda, alpha }, cfg, warm)
}

/// `spec` must be the `NetworkReg` variant.
pub fn solve_network_reg(
    design: &Design,
    y: &DMatrix<f64>,
    spec: &PenaltySpec,
    cfg: &SolverConfig,
    warm: Option<&DMatrix<f64>>,
) -> Result<SolverSolution> {
    if !matches!(spec, PenaltySpec::NetworkReg { .. }) {
        return Err(Error::invalid("solve_network_reg needs a NetworkReg penalty"));
    }
    solve(design, y, spec, cfg, warm)
}

/// Smallest λ at which every non-intercept coefficient is zero, for the
/// family of `spec` (its own λ is ignored). For α = 0 the ℓ1 weight is
/// floored at 1e-3 so the value stays finite.
pub fn lambda_max(design: &Design, y: &DMatrix<f64>, spec: &PenaltySpec) -> f64 {
    let n = design.nrows() as f64;
    let mut resid = y.clone();
    for mut c in resid.column_iter_mut() {
        let mean = c.sum() / n;
        c.add_scalar_mut(-mean);
    }
    let r = y.ncols();
    let grads: Vec<Vec<f64>> = (1..design.ncols())
        .map(|l| {
            let col = design.column(l);
            (0..r).map(|c| dot(col, resid.column(c).as_slice())).collect()
        })
        .collect();
    match spec {
        PenaltySpec::ElasticNet { alpha, .. } => {
            let m = grads.iter().flatten().fold(0.0f64, |a, g| a.max(g.abs()));
            m / alpha.max(1e-3)
        }
        PenaltySpec::GroupLasso { alpha, .. } => {
            let m = grads
                .iter()
                .fold(0.0f64, |a, g| a.max(g.iter().map(|v| v * v).sum::<f64>().sqrt()));
            m / alpha.max(1e-3)
        }
        PenaltySpec::NetworkReg { .. } => grads.iter().flatten().fold(0.0f64, |a, g| a.max(g.abs())),
    }
}
