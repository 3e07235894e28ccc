//! Seeded generator for the grouped simulation design: Gaussian predictors,
//! random intercepts per group, correlated Gaussian errors, and a stratified
//! train/validation/test split.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::model::{Group, GroupedDataset, RandomEffects};

/// Random-effects covariance of the reference design (r = 5, q = 1), as
/// published. It has one slightly negative eigenvalue (about -2.4e-3) and is
/// projected onto the PSD cone before use.
pub fn reference_psi() -> DMatrix<f64> {
    DMatrix::from_row_slice(
        5,
        5,
        &[
            50.00, -1.59, -0.60, -0.22, 2.38, //
            -1.59, 40.00, -0.96, -0.91, 0.37, //
            -0.60, -0.96, 30.00, -0.43, 0.50, //
            -0.22, -0.91, -0.43, 20.00, 0.80, //
            2.38, 0.37, 0.50, 0.80, 0.16,
        ],
    )
}

/// Residual covariance of the reference design.
pub fn reference_sigma() -> DMatrix<f64> {
    DMatrix::from_row_slice(
        5,
        5,
        &[
            3.56, -2.17, 1.15, 2.52, 0.00, //
            -2.17, 9.04, 0.20, 0.59, 0.00, //
            1.15, 0.20, 4.35, 2.85, 0.02, //
            2.52, 0.59, 2.85, 5.34, 0.03, //
            0.00, 0.00, 0.02, 0.03, 5.03,
        ],
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// The first `support_rows` rows of B equal the signal, the rest are 0.
    RowWiseSparse,
    /// Each non-intercept entry equals the signal with probability
    /// `nonzero_fraction`, independently.
    SparseAtRandom,
}

impl Scenario {
    pub fn name(&self) -> &'static str {
        match self {
            Scenario::RowWiseSparse => "row_wise_sparse",
            Scenario::SparseAtRandom => "sparse_at_random",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub scenario: Scenario,
    pub n_total: usize,
    pub groups: usize,
    /// Fixed-effect columns including the intercept.
    pub p: usize,
    pub r: usize,
    pub q: usize,
    pub seed: u64,
    pub signal: f64,
    pub nonzero_fraction: f64,
    /// Row count of the row-wise support.
    pub support_rows: usize,
    /// Row-wise support counts the intercept among its rows unless shifted,
    /// in which case it covers rows 1..=support_rows after the intercept.
    pub shift_support: bool,
    pub psi_true: DMatrix<f64>,
    pub sigma_true: DMatrix<f64>,
    /// Train / validation / test sizes.
    pub split: [usize; 3],
}

impl ScenarioSpec {
    /// N = 600, J = 10, p = 101, r = 5, q = 1 with the reference Ψ and Σ.
    pub fn reference(scenario: Scenario, seed: u64) -> Self {
        Self {
            scenario,
            n_total: 600,
            groups: 10,
            p: 101,
            r: 5,
            q: 1,
            seed,
            signal: 0.5,
            nonzero_fraction: 0.7,
            support_rows: 21,
            shift_support: false,
            psi_true: reference_psi(),
            sigma_true: reference_sigma(),
            split: [200, 200, 200],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || !self.n_total.is_multiple_of(self.groups) {
            return Err(Error::invalid(format!(
                "N = {} must be divisible by the number of groups J = {} for equally-sized groups",
                self.n_total, self.groups
            )));
        }
        if self.p < 1 || self.r < 1 || self.q < 1 {
            return Err(Error::invalid("p, r, q must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.nonzero_fraction) {
            return Err(Error::invalid("nonzero_fraction must lie in [0, 1]"));
        }
        let qr = self.q * self.r;
        if self.psi_true.shape() != (qr, qr) {
            return Err(Error::shape(format!("psi_true is {:?}, expected {qr}x{qr}", self.psi_true.shape())));
        }
        if self.sigma_true.shape() != (self.r, self.r) {
            return Err(Error::shape(format!("sigma_true is {:?}, expected {0}x{0}", self.r)));
        }
        linalg::cholesky(&self.sigma_true, "sigma_true")?;
        if self.split.iter().sum::<usize>() != self.n_total {
            return Err(Error::invalid(format!("split {:?} does not sum to N = {}", self.split, self.n_total)));
        }
        let nj = self.n_total / self.groups;
        for &s in &self.split {
            if !(s * nj).is_multiple_of(self.n_total) {
                return Err(Error::invalid(format!(
                    "split size {s} cannot be stratified evenly over {} groups",
                    self.groups
                )));
            }
        }
        Ok(())
    }

    fn support_range(&self) -> std::ops::Range<usize> {
        if self.shift_support {
            1..(self.support_rows + 1).min(self.p)
        } else {
            0..self.support_rows.min(self.p)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    /// Per group, local row indices.
    pub train: Vec<Vec<usize>>,
    pub validation: Vec<Vec<usize>>,
    pub test: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct SimulatedDataset {
    pub data: GroupedDataset,
    pub b_true: DMatrix<f64>,
    pub lambda_true: RandomEffects,
    /// Drawn error matrices E_j.
    pub errors: Vec<DMatrix<f64>>,
    pub split: Split,
    /// Ψ used for sampling (after PSD projection when needed).
    pub psi_true: DMatrix<f64>,
    pub psi_projected: bool,
    pub sigma_true: DMatrix<f64>,
}

const DATA_STREAM: u64 = 0;
const MASK_STREAM: u64 = 1;
const SPLIT_STREAM: u64 = 2;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// True fixed effects for the scenario. The intercept row carries the
/// signal in both scenarios.
pub fn make_b_true(spec: &ScenarioSpec) -> DMatrix<f64> {
    let mut b = DMatrix::zeros(spec.p, spec.r);
    match spec.scenario {
        Scenario::RowWiseSparse => {
            for l in spec.support_range() {
                b.row_mut(l).fill(spec.signal);
            }
            if spec.shift_support {
                b.row_mut(0).fill(spec.signal);
            }
        }
        Scenario::SparseAtRandom => {
            let mut rng = rng_for(spec.seed, MASK_STREAM);
            b.row_mut(0).fill(spec.signal);
            for c in 0..spec.r {
                for l in 1..spec.p {
                    if rng.random::<f64>() < spec.nonzero_fraction {
                        b[(l, c)] = spec.signal;
                    }
                }
            }
        }
    }
    b
}

fn standard_normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    // filled row by row so the draw order does not depend on storage layout
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            m[(i, j)] = rng.sample(StandardNormal);
        }
    }
    m
}

pub fn generate(spec: &ScenarioSpec) -> Result<SimulatedDataset> {
    spec.validate()?;
    let (p, r, q) = (spec.p, spec.r, spec.q);
    let nj = spec.n_total / spec.groups;
    let b_true = make_b_true(spec);

    let psi_raw = linalg::symmetrize(&spec.psi_true);
    let psi_projected = linalg::min_eigenvalue(&psi_raw) < 0.0;
    let psi_true = if psi_projected { linalg::psd_project(&psi_raw) } else { psi_raw };
    let psi_root = linalg::psd_sqrt(&psi_true);
    let sigma_true = linalg::symmetrize(&spec.sigma_true);
    let sigma_chol = linalg::cholesky(&sigma_true, "sigma_true")?.l();

    let mut rng = rng_for(spec.seed, DATA_STREAM);
    let mut groups = Vec::with_capacity(spec.groups);
    let mut lambdas = Vec::with_capacity(spec.groups);
    let mut errors = Vec::with_capacity(spec.groups);
    let width = (spec.groups - 1).to_string().len();
    for j in 0..spec.groups {
        let mut x = DMatrix::from_element(nj, p, 1.0);
        if p > 1 {
            x.columns_mut(1, p - 1).copy_from(&standard_normal(&mut rng, nj, p - 1));
        }
        let z = DMatrix::from_element(nj, q, 1.0);
        let vec_lambda = &psi_root * standard_normal(&mut rng, q * r, 1);
        let lambda = DMatrix::from_column_slice(q, r, vec_lambda.as_slice());
        // rows of E are N(0, Σ): E = W L' with W standard normal
        let e = standard_normal(&mut rng, nj, r) * sigma_chol.transpose();
        let y = &x * &b_true + &z * &lambda + &e;
        groups.push(Group { label: format!("g{j:0width$}"), x, z, y });
        lambdas.push(lambda);
        errors.push(e);
    }
    let data = GroupedDataset::new(groups)?;
    let labels = data.labels();

    let mut split_rng = rng_for(spec.seed, SPLIT_STREAM);
    let per_group: Vec<usize> = spec.split.iter().map(|&s| s * nj / spec.n_total).collect();
    let mut split = Split { train: Vec::new(), validation: Vec::new(), test: Vec::new() };
    for _ in 0..spec.groups {
        let mut idx: Vec<usize> = (0..nj).collect();
        idx.shuffle(&mut split_rng);
        let (a, rest) = idx.split_at(per_group[0]);
        let (b, c) = rest.split_at(per_group[1]);
        let sorted = |s: &[usize]| {
            let mut v = s.to_vec();
            v.sort_unstable();
            v
        };
        split.train.push(sorted(a));
        split.validation.push(sorted(b));
        split.test.push(sorted(c));
    }

    Ok(SimulatedDataset {
        data,
        b_true,
        lambda_true: RandomEffects { labels, lambdas },
        errors,
        split,
        psi_true,
        psi_projected,
        sigma_true,
    })
}

/// Weighted adjacency from thresholded absolute correlations between the
/// columns of `m`: `G_ab = |corr_ab|` when it exceeds `threshold` (or 1 with
/// `binary`), zero otherwise and on the diagonal.
pub fn adjacency_from_correlation(m: &DMatrix<f64>, threshold: f64, binary: bool) -> Result<DMatrix<f64>> {
    let (n, d) = m.shape();
    if d < 2 {
        return Err(Error::invalid("need at least two columns to build an adjacency"));
    }
    if n < 2 {
        return Err(Error::invalid("need at least two rows to compute correlations"));
    }
    let mut centered = m.clone();
    let mut scale = vec![0.0; d];
    for (c, mut col) in centered.column_iter_mut().enumerate() {
        let mean = col.sum() / n as f64;
        col.add_scalar_mut(-mean);
        scale[c] = col.norm();
        if scale[c] == 0.0 || !scale[c].is_finite() {
            return Err(Error::UndefinedCorrelation(c));
        }
    }
    let gram = centered.transpose() * &centered;
    let mut g = DMatrix::zeros(d, d);
    for a in 0..d {
        for b in (a + 1)..d {
            let corr = (gram[(a, b)] / (scale[a] * scale[b])).abs().min(1.0);
            if corr > threshold {
                let w = if binary { 1.0 } else { corr };
                g[(a, b)] = w;
                g[(b, a)] = w;
            }
        }
    }
    Ok(g)
}
