//! Tuning-parameter selection (k-fold CV, holdout, modified BIC) and the
//! evaluation metrics used to compare fits.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::em::{fit_fixed_effects, fit_from, EmConfig, FitResult};
use crate::error::{Error, Result};
use crate::model::{predict, GroupedDataset};
use crate::penalty::PenaltySpec;
use crate::solver::{lambda_max, Design};

/// Strictly decreasing positive λ values, fitted in order with warm starts.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaGrid {
    values: Vec<f64>,
}

impl LambdaGrid {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("lambda grid is empty"));
        }
        if values.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::invalid("lambda grid values must be finite and > 0"));
        }
        if values.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::invalid("lambda grid must be strictly decreasing"));
        }
        Ok(Self { values })
    }

    /// `n` log-spaced values from `max` down to `min_ratio * max`.
    pub fn log_spaced(max: f64, min_ratio: f64, n: usize) -> Result<Self> {
        if n == 0 || !(min_ratio > 0.0 && min_ratio < 1.0) {
            return Err(Error::invalid("log-spaced grid needs n >= 1 and min_ratio in (0, 1)"));
        }
        if n == 1 {
            return Self::new(vec![max]);
        }
        let (hi, lo) = (max.ln(), (max * min_ratio).ln());
        let values = (0..n).map(|i| (hi + (lo - hi) * i as f64 / (n - 1) as f64).exp()).collect();
        Self::new(values)
    }

    /// Default grid: `n` values from the λ that zeroes every coefficient of
    /// the fixed-effects problem down to `min_ratio` of it.
    pub fn for_data(data: &GroupedDataset, spec: &PenaltySpec, n: usize, min_ratio: f64) -> Result<Self> {
        let design = Design::new(data.stacked_x())?;
        let top = lambda_max(&design, &data.stacked_y(), spec);
        if !(top > 0.0) {
            return Err(Error::invalid("lambda_max is zero: responses are constant"));
        }
        Self::log_spaced(top, min_ratio, n)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Whether fits include the random effects.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Mixed,
    Fixed,
}

/// Fits every λ of the grid in order. With `warm_start`, each fit starts
/// from the previous estimate.
pub fn fit_path(
    data: &GroupedDataset,
    spec: &PenaltySpec,
    grid: &LambdaGrid,
    cfg: &EmConfig,
    kind: ModelKind,
    warm_start: bool,
) -> Result<Vec<FitResult>> {
    let mut out: Vec<FitResult> = Vec::with_capacity(grid.len());
    for &lambda in grid.values() {
        let s = spec.with_lambda(lambda);
        let prev = if warm_start { out.last() } else { None };
        let fit = match kind {
            ModelKind::Mixed => fit_from(data, &s, cfg, prev.map(|f| &f.params))?,
            ModelKind::Fixed => fit_fixed_effects(data, &s, cfg, prev.map(|f| &f.params.b))?,
        };
        out.push(fit);
    }
    Ok(out)
}

/// Predictions for every row of `data`, stacked in group order, using the
/// fit's BLUP for groups it has seen and population level otherwise.
pub fn predict_dataset(fit: &FitResult, data: &GroupedDataset) -> Result<DMatrix<f64>> {
    let dims = data.dims();
    let mut out = DMatrix::zeros(dims.total(), dims.r);
    let mut row = 0;
    for g in data.groups() {
        let group = fit.blups.get(&g.label).map(|_| (g.label.as_str(), &g.z));
        let pred = predict(&g.x, &fit.params, &fit.blups, group)?;
        out.rows_mut(row, pred.nrows()).copy_from(&pred);
        row += pred.nrows();
    }
    Ok(out)
}

/// Per-response root mean squared error.
pub fn rmse(y_true: &DMatrix<f64>, y_pred: &DMatrix<f64>) -> Result<DVector<f64>> {
    if y_true.shape() != y_pred.shape() {
        return Err(Error::shape(format!("{:?} vs {:?}", y_true.shape(), y_pred.shape())));
    }
    let m = y_true.nrows();
    if m == 0 {
        return Err(Error::UndefinedMetric("RMSE of zero rows".into()));
    }
    let diff = y_true - y_pred;
    Ok(DVector::from_iterator(
        diff.ncols(),
        diff.column_iter().map(|c| (c.norm_squared() / m as f64).sqrt()),
    ))
}

pub fn frobenius_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok((a - b).norm())
}

/// Modified BIC `2ℓ(θ̂) − d₀ log N`; larger is better.
pub fn modified_bic(fit: &FitResult, data: &GroupedDataset) -> f64 {
    bic_value(fit.loglik, fit.d0, data.dims().total())
}

pub fn bic_value(loglik: f64, d0: usize, n: usize) -> f64 {
    2.0 * loglik - d0 as f64 * (n as f64).ln()
}

/// One point of a support-recovery curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RocPoint {
    pub lambda: f64,
    /// True zeros estimated as exactly zero, over all true zeros.
    pub sensitivity: f64,
    /// True nonzeros estimated as nonzero, over all true nonzeros.
    pub specificity: f64,
}

/// Support recovery along a path, intercept row excluded.
pub fn support_roc(b_true: &DMatrix<f64>, path: &[(f64, DMatrix<f64>)]) -> Result<Vec<RocPoint>> {
    let p = b_true.nrows();
    if p < 2 {
        return Err(Error::UndefinedMetric("no coefficient rows beyond the intercept".into()));
    }
    let truth = b_true.rows(1, p - 1);
    let zeros = truth.iter().filter(|&&v| v == 0.0).count();
    let nonzeros = truth.len() - zeros;
    if zeros == 0 {
        return Err(Error::UndefinedMetric("sensitivity: true B has no zero entries".into()));
    }
    if nonzeros == 0 {
        return Err(Error::UndefinedMetric("specificity: true B has no nonzero entries".into()));
    }
    path.iter()
        .map(|(lambda, b)| {
            if b.shape() != b_true.shape() {
                return Err(Error::shape(format!("{:?} vs {:?}", b.shape(), b_true.shape())));
            }
            let est = b.rows(1, p - 1);
            let (mut tz, mut tn) = (0usize, 0usize);
            for (t, e) in truth.iter().zip(est.iter()) {
                match (*t == 0.0, *e == 0.0) {
                    (true, true) => tz += 1,
                    (false, false) => tn += 1,
                    _ => {}
                }
            }
            Ok(RocPoint {
                lambda: *lambda,
                sensitivity: tz as f64 / zeros as f64,
                specificity: tn as f64 / nonzeros as f64,
            })
        })
        .collect()
}

/// Area under the sensitivity-versus-specificity curve by the trapezoid
/// rule, anchored at (specificity 0, sensitivity 1) and (1, 0).
pub fn roc_auc(points: &[RocPoint]) -> f64 {
    let mut pts: Vec<(f64, f64)> = points.iter().map(|p| (p.specificity, p.sensitivity)).collect();
    pts.push((0.0, 1.0));
    pts.push((1.0, 0.0));
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) * 0.5).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActiveCounts {
    /// Nonzero non-intercept coefficients per response.
    pub per_response: Vec<usize>,
    /// Non-intercept rows with any nonzero entry.
    pub joint_rows: usize,
}

pub fn active_feature_count(b: &DMatrix<f64>) -> ActiveCounts {
    let p = b.nrows();
    if p < 2 {
        return ActiveCounts { per_response: vec![0; b.ncols()], joint_rows: 0 };
    }
    let b0 = b.rows(1, p - 1);
    ActiveCounts {
        per_response: b0.column_iter().map(|c| c.iter().filter(|&&v| v != 0.0).count()).collect(),
        joint_rows: b0.row_iter().filter(|r| r.iter().any(|&v| v != 0.0)).count(),
    }
}

/// Fold index for every row, per group.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldAssignment {
    pub k: usize,
    pub folds: Vec<Vec<usize>>,
}

impl FoldAssignment {
    /// Within each group, rows are shuffled and dealt round-robin into `k`
    /// folds, so every group keeps rows in every training set.
    pub fn stratified(data: &GroupedDataset, k: usize, seed: u64) -> Result<Self> {
        if k < 2 {
            return Err(Error::invalid("k-fold CV needs k >= 2"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut folds = Vec::with_capacity(data.groups().len());
        for g in data.groups() {
            let n = g.y.nrows();
            if n < 2 {
                return Err(Error::Stratification(format!(
                    "group `{}` has {n} row(s); every group needs at least 2",
                    g.label
                )));
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let mut f = vec![0; n];
            for (pos, &row) in order.iter().enumerate() {
                f[row] = pos % k;
            }
            folds.push(f);
        }
        Ok(Self { k, folds })
    }

    fn rows(&self, fold: usize, held_out: bool) -> Vec<Vec<usize>> {
        self.folds
            .iter()
            .map(|f| (0..f.len()).filter(|&i| (f[i] == fold) == held_out).collect())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvResult {
    pub lambdas: Vec<f64>,
    /// Per λ, held-out RMSE per response pooled over folds.
    pub rmse: Vec<DVector<f64>>,
    /// Per λ, unweighted mean of the per-response RMSEs.
    pub pooled: Vec<f64>,
    /// Per λ, standard deviation over folds of the per-fold pooled RMSE
    /// (zero for a single holdout fold).
    pub fold_sd: Vec<f64>,
    /// `fold_losses[λ][fold]`: pooled RMSE on that fold.
    pub fold_losses: Vec<Vec<f64>>,
    pub chosen_index: usize,
    pub chosen_lambda: f64,
    /// Largest λ whose pooled RMSE is within one standard error of the minimum.
    pub one_se_lambda: f64,
    /// Per response, the λ minimizing that response's RMSE.
    pub per_response_lambda: Vec<f64>,
    pub seed: u64,
}

struct FoldLoss {
    sse: Vec<DVector<f64>>,
    count: usize,
}

fn evaluate_path(
    train: &GroupedDataset,
    held: &GroupedDataset,
    spec: &PenaltySpec,
    grid: &LambdaGrid,
    cfg: &EmConfig,
    kind: ModelKind,
    warm_start: bool,
) -> Result<FoldLoss> {
    let fits = fit_path(train, spec, grid, cfg, kind, warm_start)?;
    let y = held.stacked_y();
    let sse = fits
        .iter()
        .map(|f| {
            let diff = &y - predict_dataset(f, held)?;
            Ok(DVector::from_iterator(diff.ncols(), diff.column_iter().map(|c| c.norm_squared())))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FoldLoss { sse, count: y.nrows() })
}

fn summarize(grid: &LambdaGrid, losses: Vec<FoldLoss>, seed: u64) -> CvResult {
    let nl = grid.len();
    let r = losses[0].sse[0].len();
    let total: usize = losses.iter().map(|l| l.count).sum();
    let mut rmse = Vec::with_capacity(nl);
    let mut pooled = Vec::with_capacity(nl);
    let mut fold_sd = Vec::with_capacity(nl);
    let mut fold_losses = Vec::with_capacity(nl);
    for i in 0..nl {
        let mut sse = DVector::zeros(r);
        for l in &losses {
            sse += &l.sse[i];
        }
        let per = sse.map(|v| (v / total as f64).sqrt());
        pooled.push(per.mean());
        rmse.push(per);
        let per_fold: Vec<f64> = losses
            .iter()
            .map(|l| l.sse[i].map(|v| (v / l.count as f64).sqrt()).mean())
            .collect();
        let m = per_fold.iter().sum::<f64>() / per_fold.len() as f64;
        let sd = if per_fold.len() > 1 {
            (per_fold.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (per_fold.len() - 1) as f64).sqrt()
        } else {
            0.0
        };
        fold_sd.push(sd);
        fold_losses.push(per_fold);
    }
    let argmin = |v: &[f64]| {
        v.iter()
            .enumerate()
            .fold((0, f64::INFINITY), |best, (i, &x)| if x < best.1 { (i, x) } else { best })
            .0
    };
    let chosen_index = argmin(&pooled);
    let se = fold_sd[chosen_index] / (losses.len() as f64).sqrt();
    let bound = pooled[chosen_index] + se;
    let one_se = (0..nl).find(|&i| pooled[i] <= bound).unwrap_or(chosen_index);
    let per_response_lambda = (0..r)
        .map(|c| grid.values()[argmin(&rmse.iter().map(|v| v[c]).collect::<Vec<_>>())])
        .collect();
    CvResult {
        lambdas: grid.values().to_vec(),
        rmse,
        pooled,
        fold_sd,
        fold_losses,
        chosen_index,
        chosen_lambda: grid.values()[chosen_index],
        one_se_lambda: grid.values()[one_se],
        per_response_lambda,
        seed,
    }
}

/// k-fold cross-validation over `grid` with group-stratified folds.
/// Held-out rows are predicted with the training fit's BLUPs.
#[allow(clippy::too_many_arguments)]
pub fn kfold_cv(
    data: &GroupedDataset,
    spec: &PenaltySpec,
    grid: &LambdaGrid,
    k: usize,
    seed: u64,
    cfg: &EmConfig,
    kind: ModelKind,
    warm_start: bool,
) -> Result<CvResult> {
    let folds = FoldAssignment::stratified(data, k, seed)?;
    kfold_cv_with(data, spec, grid, &folds, seed, cfg, kind, warm_start)
}

/// As [`kfold_cv`] with an explicit fold assignment.
#[allow(clippy::too_many_arguments)]
pub fn kfold_cv_with(
    data: &GroupedDataset,
    spec: &PenaltySpec,
    grid: &LambdaGrid,
    folds: &FoldAssignment,
    seed: u64,
    cfg: &EmConfig,
    kind: ModelKind,
    warm_start: bool,
) -> Result<CvResult> {
    if folds.folds.len() != data.groups().len() {
        return Err(Error::shape("fold assignment does not match the dataset's groups"));
    }
    let losses = (0..folds.k)
        .into_par_iter()
        .map(|fold| {
            let train_rows = folds.rows(fold, false);
            if let Some(j) = train_rows.iter().position(|r| r.is_empty()) {
                return Err(Error::Stratification(format!(
                    "group `{}` has no training rows in fold {fold}",
                    data.groups()[j].label
                )));
            }
            let train = data.subset(&train_rows)?;
            let held = data.subset(&folds.rows(fold, true))?;
            evaluate_path(&train, &held, spec, grid, cfg, kind, warm_start)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(grid, losses, seed))
}

/// Fits on `train`, scores every λ on `validation`.
pub fn holdout_select(
    train: &GroupedDataset,
    validation: &GroupedDataset,
    spec: &PenaltySpec,
    grid: &LambdaGrid,
    cfg: &EmConfig,
    kind: ModelKind,
) -> Result<CvResult> {
    let loss = evaluate_path(train, validation, spec, grid, cfg, kind, true)?;
    Ok(summarize(grid, vec![loss], 0))
}
