//! Monte Carlo comparison of the six model configurations (elastic net,
//! group lasso and network penalties, each with and without random effects)
//! on simulated data.
//!
//! Per replication: generate, fit every λ of a shared path on the training
//! split, pick λ by validation RMSE, score on the test split.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::em::{pvre, EmConfig, FitResult};
use crate::error::{Error, Result};
use crate::model::GroupedDataset;
use crate::penalty::PenaltySpec;
use crate::select::{
    active_feature_count, fit_path, frobenius_distance, predict_dataset, rmse, roc_auc, support_roc, LambdaGrid,
    ModelKind,
};
use crate::sim::{adjacency_from_correlation, generate, ScenarioSpec, SimulatedDataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    ElasticNet,
    GroupLasso,
    Network,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub family: Family,
    pub kind: ModelKind,
}

impl ModelConfig {
    /// The six configurations in table order.
    pub fn all() -> [ModelConfig; 6] {
        let mut out = [ModelConfig { family: Family::ElasticNet, kind: ModelKind::Fixed }; 6];
        let mut i = 0;
        for family in [Family::ElasticNet, Family::GroupLasso, Family::Network] {
            for kind in [ModelKind::Fixed, ModelKind::Mixed] {
                out[i] = ModelConfig { family, kind };
                i += 1;
            }
        }
        out
    }

    pub fn name(&self) -> &'static str {
        match (self.family, self.kind) {
            (Family::ElasticNet, ModelKind::Fixed) => "elastic_net_fe",
            (Family::ElasticNet, ModelKind::Mixed) => "elastic_net_re",
            (Family::GroupLasso, ModelKind::Fixed) => "group_lasso_fe",
            (Family::GroupLasso, ModelKind::Mixed) => "group_lasso_re",
            (Family::Network, ModelKind::Fixed) => "network_fe",
            (Family::Network, ModelKind::Mixed) => "network_re",
        }
    }
}

#[derive(Debug, Clone)]
pub struct StudyConfig {
    /// Scenario for every replication; its seed is replaced per replication.
    pub scenario: ScenarioSpec,
    pub replications: usize,
    pub master_seed: u64,
    pub n_lambda: usize,
    pub lambda_min_ratio: f64,
    pub alpha: f64,
    pub graph_threshold: f64,
    pub binary_graph: bool,
    /// Candidate values for both λ_X and λ_Y of the network penalty, tuned on
    /// the validation split at the middle λ of the path.
    pub network_aux_grid: Vec<f64>,
    pub em: EmConfig,
    pub models: Vec<ModelConfig>,
}

impl StudyConfig {
    pub fn new(scenario: ScenarioSpec, replications: usize, master_seed: u64) -> Self {
        Self {
            scenario,
            replications,
            master_seed,
            n_lambda: 30,
            lambda_min_ratio: 1e-3,
            alpha: 0.5,
            graph_threshold: 0.1,
            binary_graph: false,
            network_aux_grid: vec![0.0, 0.1, 1.0],
            em: EmConfig::default(),
            models: ModelConfig::all().to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.em.validate()?;
        if self.replications == 0 {
            return Err(Error::invalid("replications must be >= 1"));
        }
        if self.n_lambda == 0 {
            return Err(Error::invalid("n_lambda must be >= 1"));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::invalid("alpha must lie in (0, 1]"));
        }
        if self.network_aux_grid.is_empty() || self.network_aux_grid.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid("network_aux_grid must be nonempty with finite values >= 0"));
        }
        if self.models.is_empty() {
            return Err(Error::invalid("no models selected"));
        }
        Ok(())
    }
}

/// Seed of replication `rep`, derived from the master seed by stream.
pub fn replication_seed(master: u64, rep: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(rep as u64 + 1);
    rng.next_u64()
}

#[derive(Debug, Clone)]
pub struct ModelOutcome {
    pub model: ModelConfig,
    pub lambda: f64,
    pub lambda_x: Option<f64>,
    pub lambda_y: Option<f64>,
    pub validation_rmse: f64,
    pub test_rmse: DVector<f64>,
    pub b_distance: f64,
    pub psi_distance: f64,
    pub psi_diag: DVector<f64>,
    pub pvre: DVector<f64>,
    pub sensitivity: f64,
    pub specificity: f64,
    pub auc: f64,
    pub active_rows: usize,
    /// Path fits that stopped at the iteration limit.
    pub unconverged: usize,
}

#[derive(Debug, Clone)]
pub struct ReplicationResult {
    pub replication: usize,
    pub seed: u64,
    pub psi_true: DMatrix<f64>,
    pub outcomes: Vec<ModelOutcome>,
}

impl ReplicationResult {
    pub fn outcome(&self, name: &str) -> Option<&ModelOutcome> {
        self.outcomes.iter().find(|o| o.model.name() == name)
    }
}

struct Splits {
    train: GroupedDataset,
    validation: GroupedDataset,
    test: GroupedDataset,
}

fn base_spec(family: Family, alpha: f64, graphs: &(DMatrix<f64>, DMatrix<f64>), lx: f64, ly: f64) -> PenaltySpec {
    match family {
        Family::ElasticNet => PenaltySpec::ElasticNet { lambda: 1.0, alpha },
        Family::GroupLasso => PenaltySpec::GroupLasso { lambda: 1.0, alpha },
        Family::Network => PenaltySpec::NetworkReg {
            lambda: 1.0,
            lambda_x: lx,
            lambda_y: ly,
            graph_x: graphs.0.clone(),
            graph_y: graphs.1.clone(),
        },
    }
}

fn validation_loss(fit: &FitResult, validation: &GroupedDataset) -> Result<f64> {
    Ok(rmse(&validation.stacked_y(), &predict_dataset(fit, validation)?)?.mean())
}

fn run_model(
    cfg: &StudyConfig,
    model: ModelConfig,
    sim: &SimulatedDataset,
    splits: &Splits,
    graphs: &(DMatrix<f64>, DMatrix<f64>),
) -> Result<ModelOutcome> {
    let probe = base_spec(model.family, cfg.alpha, graphs, 0.0, 0.0);
    let grid = LambdaGrid::for_data(&splits.train, &probe, cfg.n_lambda, cfg.lambda_min_ratio)?;

    let (lx, ly) = if model.family == Family::Network {
        let mid = grid.values()[grid.len() / 2];
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for &lx in &cfg.network_aux_grid {
            for &ly in &cfg.network_aux_grid {
                let spec = base_spec(model.family, cfg.alpha, graphs, lx, ly);
                let single = LambdaGrid::new(vec![mid])?;
                let fit = fit_path(&splits.train, &spec, &single, &cfg.em, model.kind, false)?.remove(0);
                let loss = validation_loss(&fit, &splits.validation)?;
                if loss < best.0 {
                    best = (loss, lx, ly);
                }
            }
        }
        (best.1, best.2)
    } else {
        (0.0, 0.0)
    };

    let spec = base_spec(model.family, cfg.alpha, graphs, lx, ly);
    let path = fit_path(&splits.train, &spec, &grid, &cfg.em, model.kind, true)?;
    let losses = path.iter().map(|f| validation_loss(f, &splits.validation)).collect::<Result<Vec<_>>>()?;
    let chosen = losses
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |best, (i, &v)| if v < best.1 { (i, v) } else { best })
        .0;
    let fit = &path[chosen];

    let test_rmse = rmse(&splits.test.stacked_y(), &predict_dataset(fit, &splits.test)?)?;
    let bs: Vec<(f64, DMatrix<f64>)> = path.iter().map(|f| (f.penalty.lambda(), f.params.b.clone())).collect();
    let roc = support_roc(&sim.b_true, &bs)?;
    let at_chosen = roc[chosen];
    let network = model.family == Family::Network;

    Ok(ModelOutcome {
        model,
        lambda: grid.values()[chosen],
        lambda_x: network.then_some(lx),
        lambda_y: network.then_some(ly),
        validation_rmse: losses[chosen],
        test_rmse,
        b_distance: frobenius_distance(&sim.b_true, &fit.params.b)?,
        psi_distance: frobenius_distance(&sim.psi_true, &fit.params.psi)?,
        psi_diag: fit.params.psi.diagonal(),
        pvre: pvre(&fit.params)?,
        sensitivity: at_chosen.sensitivity,
        specificity: at_chosen.specificity,
        auc: roc_auc(&roc),
        active_rows: active_feature_count(&fit.params.b).joint_rows,
        unconverged: path.iter().filter(|f| !f.converged).count(),
    })
}

/// Runs one replication with the given data seed.
pub fn run_replication(cfg: &StudyConfig, replication: usize, seed: u64) -> Result<ReplicationResult> {
    let mut spec = cfg.scenario.clone();
    spec.seed = seed;
    let sim = generate(&spec)?;
    let splits = Splits {
        train: sim.data.subset(&sim.split.train)?,
        validation: sim.data.subset(&sim.split.validation)?,
        test: sim.data.subset(&sim.split.test)?,
    };
    let needs_graphs = cfg.models.iter().any(|m| m.family == Family::Network);
    let graphs = if needs_graphs {
        let x = splits.train.stacked_x();
        let gx = adjacency_from_correlation(&x.columns(1, x.ncols() - 1).into_owned(), cfg.graph_threshold, cfg.binary_graph)?;
        let gy = adjacency_from_correlation(&splits.train.stacked_y(), cfg.graph_threshold, cfg.binary_graph)?;
        (gx, gy)
    } else {
        (DMatrix::zeros(0, 0), DMatrix::zeros(0, 0))
    };
    let outcomes = cfg
        .models
        .par_iter()
        .map(|&m| run_model(cfg, m, &sim, &splits, &graphs))
        .collect::<Result<Vec<_>>>()?;
    Ok(ReplicationResult { replication, seed, psi_true: sim.psi_true.clone(), outcomes })
}

pub fn run_study(cfg: &StudyConfig) -> Result<Vec<ReplicationResult>> {
    cfg.validate()?;
    (0..cfg.replications)
        .into_par_iter()
        .map(|rep| run_replication(cfg, rep, replication_seed(cfg.master_seed, rep)))
        .collect()
}

/// `(metric, component, value)` triples of one outcome, in table order.
/// `component` is 1-based for per-response metrics and 0 for scalars.
pub fn outcome_metrics(o: &ModelOutcome) -> Vec<(&'static str, usize, f64)> {
    let mut rows = vec![("lambda", 0, o.lambda)];
    if let (Some(lx), Some(ly)) = (o.lambda_x, o.lambda_y) {
        rows.push(("lambda_x", 0, lx));
        rows.push(("lambda_y", 0, ly));
    }
    rows.push(("validation_rmse", 0, o.validation_rmse));
    for (c, v) in o.test_rmse.iter().enumerate() {
        rows.push(("test_rmse", c + 1, *v));
    }
    rows.push(("test_rmse_mean", 0, o.test_rmse.mean()));
    rows.push(("b_frobenius", 0, o.b_distance));
    rows.push(("psi_frobenius", 0, o.psi_distance));
    for (c, v) in o.psi_diag.iter().enumerate() {
        rows.push(("psi_diag", c + 1, *v));
    }
    for (c, v) in o.pvre.iter().enumerate() {
        rows.push(("pvre", c + 1, *v));
    }
    rows.push(("sensitivity", 0, o.sensitivity));
    rows.push(("specificity", 0, o.specificity));
    rows.push(("auc", 0, o.auc));
    rows.push(("active_rows", 0, o.active_rows as f64));
    rows.push(("unconverged_fits", 0, o.unconverged as f64));
    rows
}

/// Long-format table, one row per (replication, model, metric, component).
pub fn replication_table(results: &[ReplicationResult]) -> String {
    let mut out = String::from("replication,seed,model,metric,component,value\n");
    for r in results {
        for o in &r.outcomes {
            for (metric, comp, v) in outcome_metrics(o) {
                let _ = writeln!(out, "{},{},{},{},{},{}", r.replication, r.seed, o.model.name(), metric, comp, v);
            }
        }
    }
    out
}

/// Mean, sample standard deviation, min and max over replications per
/// (model, metric, component).
pub fn summary_table(results: &[ReplicationResult]) -> String {
    let mut out = String::from("model,metric,component,n,mean,sd,min,max\n");
    let Some(first) = results.first() else {
        return out;
    };
    for (m, o) in first.outcomes.iter().enumerate() {
        for (k, (metric, comp, _)) in outcome_metrics(o).into_iter().enumerate() {
            let values: Vec<f64> = results
                .iter()
                .filter_map(|r| r.outcomes.get(m).and_then(|o| outcome_metrics(o).get(k).map(|t| t.2)))
                .collect();
            let n = values.len();
            let mean = values.iter().sum::<f64>() / n as f64;
            let sd = if n > 1 {
                (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            let min = values.iter().copied().fold(f64::INFINITY, f64::min);
            let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let _ = writeln!(out, "{},{},{},{},{},{},{},{}", o.model.name(), metric, comp, n, mean, sd, min, max);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_are_distinct_and_stable() {
        let s: Vec<u64> = (0..5).map(|r| replication_seed(42, r)).collect();
        assert_eq!(s, (0..5).map(|r| replication_seed(42, r)).collect::<Vec<_>>());
        for i in 0..5 {
            for j in (i + 1)..5 {
                assert_ne!(s[i], s[j]);
            }
        }
    }

    #[test]
    fn six_distinct_model_names() {
        let mut names: Vec<&str> = ModelConfig::all().iter().map(|m| m.name()).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), 6);
    }
}
