//! TOML run configuration. Every table and key is optional except where a
//! command needs it; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use penmlmm::sim::{reference_psi, reference_sigma, Scenario, ScenarioSpec};
use penmlmm::{EmConfig, SolverConfig};

use crate::CliError;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub output_dir: Option<PathBuf>,
    pub threads: Option<usize>,
    pub data: Option<DataConfig>,
    pub penalty: PenaltyConfig,
    pub grid: GridConfig,
    pub em: EmSettings,
    pub cv: CvConfig,
    pub fit: FitConfig,
    pub simulate: SimulateConfig,
    pub predict: PredictConfig,
    pub evaluate: EvaluateConfig,
    pub replicate: ReplicateConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub path: PathBuf,
    #[serde(default = "default_group_column")]
    pub group_column: String,
    pub response_columns: Vec<String>,
    /// Random-effect design columns; empty means a random intercept.
    #[serde(default)]
    pub random_columns: Vec<String>,
    /// Fixed-effect predictors; absent means every remaining column.
    #[serde(default)]
    pub predictor_columns: Option<Vec<String>>,
}

fn default_group_column() -> String {
    "group".into()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyName {
    ElasticNet,
    GroupLasso,
    Network,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PenaltyConfig {
    pub family: FamilyName,
    pub lambda: f64,
    pub alpha: f64,
    pub lambda_x: f64,
    pub lambda_y: f64,
    /// Predictor adjacency matrix file; built from thresholded correlations when absent.
    pub graph_x: Option<PathBuf>,
    pub graph_y: Option<PathBuf>,
    pub graph_threshold: f64,
    pub binary_graph: bool,
    pub random_effects: bool,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self {
            family: FamilyName::GroupLasso,
            lambda: 0.1,
            alpha: 0.5,
            lambda_x: 0.0,
            lambda_y: 0.0,
            graph_x: None,
            graph_y: None,
            graph_threshold: 0.1,
            binary_graph: false,
            random_effects: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    /// Explicit λ values, strictly decreasing. Overrides `n_lambda`/`min_ratio`.
    pub values: Option<Vec<f64>>,
    pub n_lambda: usize,
    pub min_ratio: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { values: None, n_lambda: 50, min_ratio: 1e-3 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmSettings {
    pub epsilon: f64,
    pub max_iter: usize,
    pub solver_tol: f64,
    pub max_sweeps: usize,
    pub active_set: bool,
}

impl Default for EmSettings {
    fn default() -> Self {
        let em = EmConfig::default();
        Self {
            epsilon: em.epsilon,
            max_iter: em.max_iter,
            solver_tol: em.solver.tol,
            max_sweeps: em.solver.max_sweeps,
            active_set: em.solver.active_set,
        }
    }
}

impl EmSettings {
    pub fn to_em(&self, trace: bool) -> EmConfig {
        EmConfig {
            epsilon: self.epsilon,
            max_iter: self.max_iter,
            solver: SolverConfig {
                max_sweeps: self.max_sweeps,
                tol: self.solver_tol,
                active_set: self.active_set,
                track_objective: false,
            },
            trace,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionRule {
    Min,
    OneSe,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvConfig {
    pub k: usize,
    pub seed: u64,
    pub warm_start: bool,
    pub rule: SelectionRule,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self { k: 10, seed: 1, warm_start: true, rule: SelectionRule::Min }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    /// Directory of a previous fit whose estimates start the EM iterations.
    pub warm_start_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    pub scenario: Scenario,
    pub n_total: usize,
    pub groups: usize,
    pub p: usize,
    pub r: usize,
    pub q: usize,
    pub seed: u64,
    pub signal: f64,
    pub nonzero_fraction: f64,
    pub support_rows: usize,
    pub shift_support: bool,
    pub split: [usize; 3],
    /// Row-major `qr × qr`; defaults to the reference matrix when r = 5, q = 1.
    pub psi_true: Option<Vec<Vec<f64>>>,
    pub sigma_true: Option<Vec<Vec<f64>>>,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        let s = ScenarioSpec::reference(Scenario::RowWiseSparse, 1);
        Self {
            scenario: s.scenario,
            n_total: s.n_total,
            groups: s.groups,
            p: s.p,
            r: s.r,
            q: s.q,
            seed: s.seed,
            signal: s.signal,
            nonzero_fraction: s.nonzero_fraction,
            support_rows: s.support_rows,
            shift_support: s.shift_support,
            split: s.split,
            psi_true: None,
            sigma_true: None,
        }
    }
}

fn nested_matrix(name: &str, rows: &[Vec<f64>], n: usize) -> Result<nalgebra::DMatrix<f64>, CliError> {
    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
        return Err(CliError::Config(format!("simulate.{name} must be {n}x{n}")));
    }
    Ok(nalgebra::DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

impl SimulateConfig {
    pub fn to_spec(&self) -> Result<ScenarioSpec, CliError> {
        let qr = self.q * self.r;
        let psi_true = match &self.psi_true {
            Some(rows) => nested_matrix("psi_true", rows, qr)?,
            None if self.r == 5 && self.q == 1 => reference_psi(),
            None => return Err(CliError::Config("simulate.psi_true is required unless r = 5 and q = 1".into())),
        };
        let sigma_true = match &self.sigma_true {
            Some(rows) => nested_matrix("sigma_true", rows, self.r)?,
            None if self.r == 5 => reference_sigma(),
            None => return Err(CliError::Config("simulate.sigma_true is required unless r = 5".into())),
        };
        let spec = ScenarioSpec {
            scenario: self.scenario,
            n_total: self.n_total,
            groups: self.groups,
            p: self.p,
            r: self.r,
            q: self.q,
            seed: self.seed,
            signal: self.signal,
            nonzero_fraction: self.nonzero_fraction,
            support_rows: self.support_rows,
            shift_support: self.shift_support,
            psi_true,
            sigma_true,
            split: self.split,
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictConfig {
    pub fit_dir: Option<PathBuf>,
    pub path: Option<PathBuf>,
    /// Group column of the new data; defaults to the fit's group column.
    pub group_column: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateConfig {
    pub fit_dir: Option<PathBuf>,
    /// Directory with `b_true.csv` and `psi_true.csv` as written by `simulate`.
    pub truth_dir: Option<PathBuf>,
    /// Test dataset with the fit's column layout.
    pub test_path: Option<PathBuf>,
    pub replication: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReplicateConfig {
    pub replications: usize,
    pub master_seed: u64,
    pub n_lambda: usize,
    pub min_ratio: f64,
    pub alpha: f64,
    pub graph_threshold: f64,
    pub binary_graph: bool,
    pub network_aux_grid: Vec<f64>,
    /// Subset of the six model names; empty means all six.
    pub models: Vec<String>,
}

impl Default for ReplicateConfig {
    fn default() -> Self {
        Self {
            replications: 10,
            master_seed: 1,
            n_lambda: 30,
            min_ratio: 1e-3,
            alpha: 0.5,
            graph_threshold: 0.1,
            binary_graph: false,
            network_aux_grid: vec![0.0, 0.1, 1.0],
            models: Vec::new(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    /// Makes relative paths relative to the config file's directory.
    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = self.output_dir.as_mut() {
            fix(p);
        }
        if let Some(d) = self.data.as_mut() {
            fix(&mut d.path);
        }
        for p in [
            self.penalty.graph_x.as_mut(),
            self.penalty.graph_y.as_mut(),
            self.fit.warm_start_dir.as_mut(),
            self.predict.fit_dir.as_mut(),
            self.predict.path.as_mut(),
            self.evaluate.fit_dir.as_mut(),
            self.evaluate.truth_dir.as_mut(),
            self.evaluate.test_path.as_mut(),
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    /// `--seed` replaces every seed the commands read.
    pub fn override_seed(&mut self, seed: u64) {
        self.cv.seed = seed;
        self.simulate.seed = seed;
        self.replicate.master_seed = seed;
    }

    /// SHA-256 of the canonical JSON form of the effective configuration,
    /// leaving out the output directory and thread count.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        c.threads = None;
        let json = serde_json::to_string(&c).expect("config serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn data(&self) -> Result<&DataConfig, CliError> {
        self.data.as_ref().ok_or_else(|| CliError::Config("missing [data] table".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<RunConfig>("bogus = 1").is_err());
        assert!(toml::from_str::<RunConfig>("[penalty]\nlamda = 1.0").is_err());
    }

    #[test]
    fn empty_config_uses_defaults() {
        let c: RunConfig = toml::from_str("").unwrap();
        assert_eq!(c.cv.k, 10);
        assert_eq!(c.grid.n_lambda, 50);
        assert_eq!(c.penalty.alpha, 0.5);
        assert!(c.simulate.to_spec().is_ok());
    }

    #[test]
    fn hash_tracks_content() {
        let a: RunConfig = toml::from_str("").unwrap();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.override_seed(9);
        assert_ne!(a.hash(), b.hash());
    }
}
