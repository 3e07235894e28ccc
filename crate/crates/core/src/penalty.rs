//! Penalty families on the fixed-effects matrix. Row 0 of B (the intercepts)
//! is never penalized.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum PenaltySpec {
    /// `λ[(1-α) Σ b² + α Σ |b|]` entrywise.
    ElasticNet { lambda: f64, alpha: f64 },
    /// `λ[(1-α) Σ b² + α Σ_l ‖b_l·‖₂]` with rows as groups.
    GroupLasso { lambda: f64, alpha: f64 },
    /// `λ‖B₀‖₁ + λ_X tr(B₀'L_X B₀) + λ_Y tr(B₀ L_Y B₀')` with `L = D_G - G`.
    NetworkReg {
        lambda: f64,
        lambda_x: f64,
        lambda_y: f64,
        /// `(p-1) × (p-1)` predictor adjacency.
        graph_x: DMatrix<f64>,
        /// `r × r` response adjacency.
        graph_y: DMatrix<f64>,
    },
}

impl PenaltySpec {
    pub fn lambda(&self) -> f64 {
        match self {
            PenaltySpec::ElasticNet { lambda, .. }
            | PenaltySpec::GroupLasso { lambda, .. }
            | PenaltySpec::NetworkReg { lambda, .. } => *lambda,
        }
    }

    pub fn with_lambda(&self, value: f64) -> Self {
        let mut out = self.clone();
        match &mut out {
            PenaltySpec::ElasticNet { lambda, .. }
            | PenaltySpec::GroupLasso { lambda, .. }
            | PenaltySpec::NetworkReg { lambda, .. } => *lambda = value,
        }
        out
    }

    /// Short family name used in tables and configs.
    pub fn family(&self) -> &'static str {
        match self {
            PenaltySpec::ElasticNet { .. } => "elastic_net",
            PenaltySpec::GroupLasso { .. } => "group_lasso",
            PenaltySpec::NetworkReg { .. } => "network",
        }
    }

    /// Checks tuning scalars and, for the network family, the adjacency
    /// matrices against a `p × r` coefficient shape.
    pub fn validate(&self, p: usize, r: usize) -> Result<()> {
        let nonneg = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} must be finite and >= 0, got {v}")))
            }
        };
        let unit = |v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::invalid(format!("alpha must lie in [0, 1], got {v}")))
            }
        };
        match self {
            PenaltySpec::ElasticNet { lambda, alpha } | PenaltySpec::GroupLasso { lambda, alpha } => {
                nonneg("lambda", *lambda)?;
                unit(*alpha)
            }
            PenaltySpec::NetworkReg { lambda, lambda_x, lambda_y, graph_x, graph_y } => {
                nonneg("lambda", *lambda)?;
                nonneg("lambda_x", *lambda_x)?;
                nonneg("lambda_y", *lambda_y)?;
                if p == 0 || graph_x.shape() != (p - 1, p - 1) {
                    return Err(Error::shape(format!(
                        "G_X is {:?}, expected {}x{}",
                        graph_x.shape(),
                        p.saturating_sub(1),
                        p.saturating_sub(1)
                    )));
                }
                if graph_y.shape() != (r, r) {
                    return Err(Error::shape(format!("G_Y is {:?}, expected {r}x{r}", graph_y.shape())));
                }
                validate_adjacency("G_X", graph_x)?;
                validate_adjacency("G_Y", graph_y)
            }
        }
    }
}

/// Adjacency matrices must be symmetric, nonnegative and have a zero diagonal.
pub fn validate_adjacency(name: &str, g: &DMatrix<f64>) -> Result<()> {
    let n = g.nrows();
    if g.ncols() != n {
        return Err(Error::shape(format!("{name} is not square")));
    }
    for i in 0..n {
        if g[(i, i)] != 0.0 {
            return Err(Error::invalid(format!("{name} has nonzero diagonal at {i}")));
        }
        for j in 0..n {
            let v = g[(i, j)];
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!("{name}[{i},{j}] = {v} is not a nonnegative weight")));
            }
            if v != g[(j, i)] {
                return Err(Error::invalid(format!("{name} is not symmetric at ({i},{j})")));
            }
        }
    }
    Ok(())
}

/// Graph Laplacian `D_G - G`.
pub fn laplacian(g: &DMatrix<f64>) -> DMatrix<f64> {
    let mut l = -g.clone();
    for i in 0..g.nrows() {
        l[(i, i)] += g.row(i).sum();
    }
    l
}

/// Value of the penalty at `b` (p × r).
pub fn penalty_value(b: &DMatrix<f64>, spec: &PenaltySpec) -> Result<f64> {
    let (p, r) = b.shape();
    spec.validate(p, r)?;
    if p <= 1 {
        return Ok(0.0);
    }
    let b0 = b.rows(1, p - 1);
    let value = match spec {
        PenaltySpec::ElasticNet { lambda, alpha } => {
            let ridge: f64 = b0.iter().map(|v| v * v).sum();
            let l1: f64 = b0.iter().map(|v| v.abs()).sum();
            lambda * ((1.0 - alpha) * ridge + alpha * l1)
        }
        PenaltySpec::GroupLasso { lambda, alpha } => {
            let ridge: f64 = b0.iter().map(|v| v * v).sum();
            let rows: f64 = b0.row_iter().map(|row| row.norm()).sum();
            lambda * ((1.0 - alpha) * ridge + alpha * rows)
        }
        PenaltySpec::NetworkReg { lambda, lambda_x, lambda_y, graph_x, graph_y } => {
            let l1: f64 = b0.iter().map(|v| v.abs()).sum();
            let lx = laplacian(graph_x);
            let ly = laplacian(graph_y);
            let tx = (b0.transpose() * lx * b0).trace();
            let ty = (b0 * ly * b0.transpose()).trace();
            lambda * l1 + lambda_x * tx + lambda_y * ty
        }
    };
    Ok(value)
}
