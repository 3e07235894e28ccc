use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use penmlmm::em::{fit_from, pvre};
use penmlmm::select::{
    active_feature_count, frobenius_distance, kfold_cv, modified_bic, rmse, support_roc, LambdaGrid, ModelKind,
};
use penmlmm::sim::{adjacency_from_correlation, generate};
use penmlmm::study::{replication_table, run_study, summary_table, ModelConfig, StudyConfig};
use penmlmm::{fit_fixed_effects, FitResult, GroupedDataset, ModelParams, PenaltySpec, RandomEffects};

use crate::config::{FamilyName, RunConfig, SelectionRule};
use crate::io::{self, load_dataset, read_blups, read_matrix, vec_names, write_blups, write_file, write_matrix, LoadedData, INTERCEPT};
use crate::CliError;

pub struct Context {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub quiet: bool,
    pub hash: String,
}

impl Context {
    fn note(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}

fn json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    write_file(path, &s)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitSummary {
    pub family: String,
    pub lambda: f64,
    pub alpha: Option<f64>,
    pub lambda_x: Option<f64>,
    pub lambda_y: Option<f64>,
    pub random_effects: bool,
    pub converged: bool,
    pub iterations: usize,
    pub loglik: f64,
    pub objective: f64,
    pub d0: usize,
    pub bic: f64,
    pub pvre: Vec<f64>,
    pub active_rows: usize,
    pub active_per_response: Vec<usize>,
    pub n: usize,
    pub groups: usize,
    pub p: usize,
    pub r: usize,
    pub q: usize,
    pub group_column: String,
    pub predictors: Vec<String>,
    pub responses: Vec<String>,
    pub random_columns: Vec<String>,
    pub config_hash: String,
}

fn require_data(loaded: &LoadedData) -> Result<&GroupedDataset, CliError> {
    loaded.dataset.as_ref().ok_or_else(|| CliError::Core(penmlmm::Error::Invalid("dataset has no rows".into())))
}

fn penalty_spec(cfg: &RunConfig, data: &GroupedDataset, lambda: f64) -> Result<PenaltySpec, CliError> {
    let pc = &cfg.penalty;
    Ok(match pc.family {
        FamilyName::ElasticNet => PenaltySpec::ElasticNet { lambda, alpha: pc.alpha },
        FamilyName::GroupLasso => PenaltySpec::GroupLasso { lambda, alpha: pc.alpha },
        FamilyName::Network => {
            let graph_x = match &pc.graph_x {
                Some(path) => read_matrix(path)?.values,
                None => {
                    let x = data.stacked_x();
                    adjacency_from_correlation(&x.columns(1, x.ncols() - 1).into_owned(), pc.graph_threshold, pc.binary_graph)?
                }
            };
            let graph_y = match &pc.graph_y {
                Some(path) => read_matrix(path)?.values,
                None => adjacency_from_correlation(&data.stacked_y(), pc.graph_threshold, pc.binary_graph)?,
            };
            PenaltySpec::NetworkReg { lambda, lambda_x: pc.lambda_x, lambda_y: pc.lambda_y, graph_x, graph_y }
        }
    })
}

fn run_fit(
    cfg: &RunConfig,
    data: &GroupedDataset,
    spec: &PenaltySpec,
    warm: Option<&ModelParams>,
) -> Result<FitResult, CliError> {
    let em = cfg.em.to_em(true);
    Ok(if cfg.penalty.random_effects {
        fit_from(data, spec, &em, warm)?
    } else {
        fit_fixed_effects(data, spec, &em, warm.map(|p| &p.b))?
    })
}

fn summarize_fit(ctx: &Context, fit: &FitResult, loaded: &LoadedData, data: &GroupedDataset) -> Result<FitSummary, CliError> {
    let dims = data.dims();
    let active = active_feature_count(&fit.params.b);
    let (alpha, lx, ly) = match &fit.penalty {
        PenaltySpec::ElasticNet { alpha, .. } | PenaltySpec::GroupLasso { alpha, .. } => (Some(*alpha), None, None),
        PenaltySpec::NetworkReg { lambda_x, lambda_y, .. } => (None, Some(*lambda_x), Some(*lambda_y)),
    };
    Ok(FitSummary {
        family: fit.penalty.family().into(),
        lambda: fit.penalty.lambda(),
        alpha,
        lambda_x: lx,
        lambda_y: ly,
        random_effects: fit.random_effects,
        converged: fit.converged,
        iterations: fit.iterations,
        loglik: fit.loglik,
        objective: fit.objective(),
        d0: fit.d0,
        bic: modified_bic(fit, data),
        pvre: pvre(&fit.params)?.iter().copied().collect(),
        active_rows: active.joint_rows,
        active_per_response: active.per_response,
        n: dims.total(),
        groups: dims.groups(),
        p: dims.p,
        r: dims.r,
        q: dims.q,
        group_column: ctx.cfg.data()?.group_column.clone(),
        predictors: loaded.predictors.clone(),
        responses: loaded.responses.clone(),
        random_columns: loaded.random.clone(),
        config_hash: ctx.hash.clone(),
    })
}

fn b_row_names(predictors: &[String]) -> Vec<String> {
    std::iter::once(INTERCEPT.to_string()).chain(predictors.iter().cloned()).collect()
}

fn write_fit_files(dir: &Path, fit: &FitResult, summary: &FitSummary) -> Result<(), CliError> {
    let psi_names = vec_names(&summary.responses, &summary.random_columns);
    write_matrix(&dir.join("b_hat.csv"), "term", &b_row_names(&summary.predictors), &summary.responses, &fit.params.b)?;
    write_matrix(&dir.join("sigma_hat.csv"), "response", &summary.responses, &summary.responses, &fit.params.sigma)?;
    write_matrix(&dir.join("psi_hat.csv"), "effect", &psi_names, &psi_names, &fit.params.psi)?;
    write_blups(&dir.join("blups.csv"), &fit.blups, &psi_names)?;
    let mut trace = String::from("iteration,objective,penalty,penalty_whitened,d0,max_abs_delta_b\n");
    for r in &fit.records {
        let _ = writeln!(
            trace,
            "{},{},{},{},{},{}",
            r.iteration, r.objective, r.penalty, r.penalty_whitened, r.d0, r.max_abs_delta_b
        );
    }
    write_file(&dir.join("trace.csv"), &trace)
}

/// A fit read back from its output directory.
pub struct FitFiles {
    pub summary: FitSummary,
    pub params: ModelParams,
    pub blups: RandomEffects,
}

pub fn read_fit(dir: &Path) -> Result<FitFiles, CliError> {
    let path = dir.join("summary.json");
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let summary: FitSummary = serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: not a fit summary: {e}", path.display())))?;
    let b = read_matrix(&dir.join("b_hat.csv"))?.values;
    let sigma = read_matrix(&dir.join("sigma_hat.csv"))?.values;
    let psi = read_matrix(&dir.join("psi_hat.csv"))?.values;
    let params = ModelParams::new(b, sigma, psi)?;
    let blups = read_blups(&dir.join("blups.csv"), summary.q, summary.r)?;
    Ok(FitFiles { summary, params, blups })
}

fn fit_status(fit: &FitResult) -> Result<(), CliError> {
    if fit.converged {
        Ok(())
    } else {
        Err(CliError::NotConverged(format!("EM stopped after {} iterations without converging", fit.iterations)))
    }
}

pub fn simulate(ctx: &Context) -> Result<(), CliError> {
    let spec = ctx.cfg.simulate.to_spec()?;
    let sim = generate(&spec)?;
    let dims = sim.data.dims();
    let predictors: Vec<String> = (1..dims.p).map(|i| format!("x{i}")).collect();
    let responses: Vec<String> = (1..=dims.r).map(|i| format!("y{i}")).collect();
    let random = vec![INTERCEPT.to_string()];

    let dataset_text = |rows: Option<&[Vec<usize>]>| {
        let mut s = String::from("group");
        for n in predictors.iter().chain(&responses) {
            s.push(',');
            s.push_str(n);
        }
        s.push('\n');
        for (j, g) in sim.data.groups().iter().enumerate() {
            let idx: Vec<usize> = match rows {
                Some(r) => r[j].clone(),
                None => (0..g.y.nrows()).collect(),
            };
            for i in idx {
                s.push_str(&g.label);
                for l in 1..dims.p {
                    let _ = write!(s, ",{}", g.x[(i, l)]);
                }
                for c in 0..dims.r {
                    let _ = write!(s, ",{}", g.y[(i, c)]);
                }
                s.push('\n');
            }
        }
        s
    };
    let out = &ctx.out;
    write_file(&out.join("dataset.csv"), &dataset_text(None))?;
    write_file(&out.join("train.csv"), &dataset_text(Some(&sim.split.train)))?;
    write_file(&out.join("validation.csv"), &dataset_text(Some(&sim.split.validation)))?;
    write_file(&out.join("test.csv"), &dataset_text(Some(&sim.split.test)))?;

    let mut split = String::from("row,group,split\n");
    let mut offset = 0;
    for (j, g) in sim.data.groups().iter().enumerate() {
        let n = g.y.nrows();
        let mut labels = vec![""; n];
        for (name, part) in [("train", &sim.split.train), ("validation", &sim.split.validation), ("test", &sim.split.test)] {
            for &i in &part[j] {
                labels[i] = name;
            }
        }
        for (i, l) in labels.iter().enumerate() {
            let _ = writeln!(split, "{},{},{}", offset + i, g.label, l);
        }
        offset += n;
    }
    write_file(&out.join("split.csv"), &split)?;

    let psi_names = vec_names(&responses, &random);
    write_matrix(&out.join("b_true.csv"), "term", &b_row_names(&predictors), &responses, &sim.b_true)?;
    write_matrix(&out.join("psi_true.csv"), "effect", &psi_names, &psi_names, &sim.psi_true)?;
    write_matrix(&out.join("sigma_true.csv"), "response", &responses, &responses, &sim.sigma_true)?;
    write_blups(&out.join("lambda_true.csv"), &sim.lambda_true, &psi_names)?;

    #[derive(Serialize)]
    struct Metadata<'a> {
        scenario: &'a str,
        seed: u64,
        n: usize,
        groups: usize,
        p: usize,
        r: usize,
        q: usize,
        psi_projected: bool,
        dataset: &'a str,
        train: &'a str,
        validation: &'a str,
        test: &'a str,
        split: &'a str,
        b_true: &'a str,
        psi_true: &'a str,
        sigma_true: &'a str,
        lambda_true: &'a str,
        config_hash: &'a str,
    }
    json(
        &out.join("metadata.json"),
        &Metadata {
            scenario: spec.scenario.name(),
            seed: spec.seed,
            n: dims.total(),
            groups: dims.groups(),
            p: dims.p,
            r: dims.r,
            q: dims.q,
            psi_projected: sim.psi_projected,
            dataset: "dataset.csv",
            train: "train.csv",
            validation: "validation.csv",
            test: "test.csv",
            split: "split.csv",
            b_true: "b_true.csv",
            psi_true: "psi_true.csv",
            sigma_true: "sigma_true.csv",
            lambda_true: "lambda_true.csv",
            config_hash: &ctx.hash,
        },
    )?;
    ctx.note(format!("simulated {} rows in {} groups -> {}", dims.total(), dims.groups(), out.display()));
    Ok(())
}

pub fn fit(ctx: &Context) -> Result<(), CliError> {
    let loaded = load_dataset(ctx.cfg.data()?, 2)?;
    let data = require_data(&loaded)?;
    let spec = penalty_spec(&ctx.cfg, data, ctx.cfg.penalty.lambda)?;
    let warm = match &ctx.cfg.fit.warm_start_dir {
        Some(dir) => Some(read_fit(dir)?.params),
        None => None,
    };
    let fit = run_fit(&ctx.cfg, data, &spec, warm.as_ref())?;
    let summary = summarize_fit(ctx, &fit, &loaded, data)?;
    write_fit_files(&ctx.out, &fit, &summary)?;
    json(&ctx.out.join("summary.json"), &summary)?;
    ctx.note(format!(
        "fit {} lambda={} iterations={} converged={} loglik={}",
        summary.family, summary.lambda, summary.iterations, summary.converged, summary.loglik
    ));
    fit_status(&fit)
}

fn grid_for(cfg: &RunConfig, data: &GroupedDataset, spec: &PenaltySpec) -> Result<LambdaGrid, CliError> {
    Ok(match &cfg.grid.values {
        Some(v) => LambdaGrid::new(v.clone())?,
        None => LambdaGrid::for_data(data, spec, cfg.grid.n_lambda, cfg.grid.min_ratio)?,
    })
}

pub fn cv(ctx: &Context) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let loaded = load_dataset(cfg.data()?, 2)?;
    let data = require_data(&loaded)?;
    let spec = penalty_spec(cfg, data, cfg.penalty.lambda)?;
    let grid = grid_for(cfg, data, &spec)?;
    let kind = if cfg.penalty.random_effects { ModelKind::Mixed } else { ModelKind::Fixed };
    let em = cfg.em.to_em(false);
    ctx.note(format!("{}-fold CV over {} lambda values", cfg.cv.k, grid.len()));
    let res = kfold_cv(data, &spec, &grid, cfg.cv.k, cfg.cv.seed, &em, kind, cfg.cv.warm_start)?;

    let mut table = String::from("lambda");
    for y in &loaded.responses {
        let _ = write!(table, ",rmse_{y}");
    }
    table.push_str(",pooled_rmse,fold_sd\n");
    for i in 0..res.lambdas.len() {
        let _ = write!(table, "{}", res.lambdas[i]);
        for v in res.rmse[i].iter() {
            let _ = write!(table, ",{v}");
        }
        let _ = writeln!(table, ",{},{}", res.pooled[i], res.fold_sd[i]);
    }
    write_file(&ctx.out.join("cv.csv"), &table)?;

    let chosen = match cfg.cv.rule {
        SelectionRule::Min => res.chosen_lambda,
        SelectionRule::OneSe => res.one_se_lambda,
    };
    let fit = run_fit(cfg, data, &spec.with_lambda(chosen), None)?;
    let summary = summarize_fit(ctx, &fit, &loaded, data)?;
    write_fit_files(&ctx.out, &fit, &summary)?;
    json(&ctx.out.join("summary.json"), &summary)?;

    #[derive(Serialize)]
    struct CvSummary<'a> {
        k: usize,
        seed: u64,
        warm_start: bool,
        rule: SelectionRule,
        min_lambda: f64,
        one_se_lambda: f64,
        chosen_lambda: f64,
        per_response_lambda: &'a [f64],
        config_hash: &'a str,
    }
    json(
        &ctx.out.join("cv_summary.json"),
        &CvSummary {
            k: cfg.cv.k,
            seed: res.seed,
            warm_start: cfg.cv.warm_start,
            rule: cfg.cv.rule,
            min_lambda: res.chosen_lambda,
            one_se_lambda: res.one_se_lambda,
            chosen_lambda: chosen,
            per_response_lambda: &res.per_response_lambda,
            config_hash: &ctx.hash,
        },
    )?;
    ctx.note(format!("chosen lambda {chosen}"));
    fit_status(&fit)
}

pub fn predict(ctx: &Context) -> Result<(), CliError> {
    let pc = &ctx.cfg.predict;
    let fit_dir = pc.fit_dir.as_ref().ok_or_else(|| CliError::Config("missing predict.fit_dir".into()))?;
    let path = pc.path.as_ref().ok_or_else(|| CliError::Config("missing predict.path".into()))?;
    let files = read_fit(fit_dir)?;
    let s = &files.summary;
    let group_column = pc.group_column.clone().unwrap_or_else(|| s.group_column.clone());
    let rows = io::load_predict_rows(path, &group_column, &s.predictors, &s.random_columns)?;
    let mut pred = &rows.x * &files.params.b;
    let mut table = String::from("row,group");
    for y in &s.responses {
        let _ = write!(table, ",{y}");
    }
    table.push_str(",unseen_group\n");
    for i in 0..pred.nrows() {
        let label = rows.labels[i].as_deref();
        let blup = label.and_then(|l| files.blups.get(l));
        if let Some(lambda) = blup {
            let add = rows.z.row(i) * lambda;
            let mut row = pred.row_mut(i);
            row += add;
        }
        let _ = write!(table, "{},{}", i, label.unwrap_or(""));
        for c in 0..pred.ncols() {
            let _ = write!(table, ",{}", pred[(i, c)]);
        }
        let _ = writeln!(table, ",{}", u8::from(blup.is_none()));
    }
    write_file(&ctx.out.join("predictions.csv"), &table)?;
    ctx.note(format!("predicted {} rows", pred.nrows()));
    Ok(())
}

pub fn evaluate(ctx: &Context) -> Result<(), CliError> {
    let ec = &ctx.cfg.evaluate;
    let fit_dir = ec.fit_dir.as_ref().ok_or_else(|| CliError::Config("missing evaluate.fit_dir".into()))?;
    let files = read_fit(fit_dir)?;
    let s = &files.summary;
    let rep = ec.replication;
    let mut table = String::from("replication,metric,component,value,status\n");
    let ok = |t: &mut String, metric: &str, comp: usize, v: f64| {
        let _ = writeln!(t, "{rep},{metric},{comp},{v},ok");
    };
    let omit = |t: &mut String, metric: &str, reason: &str| {
        let _ = writeln!(t, "{rep},{metric},0,,omitted: {reason}");
    };

    match &ec.test_path {
        Some(path) => {
            let data_cfg = crate::config::DataConfig {
                path: path.clone(),
                group_column: s.group_column.clone(),
                response_columns: s.responses.clone(),
                random_columns: s.random_columns.iter().filter(|n| n.as_str() != INTERCEPT).cloned().collect(),
                predictor_columns: Some(s.predictors.clone()),
            };
            let test = load_dataset(&data_cfg, 1)?;
            match &test.dataset {
                Some(d) => {
                    let mut pred = DMatrix::zeros(d.dims().total(), s.r);
                    let mut row = 0;
                    for g in d.groups() {
                        let group = files.blups.get(&g.label).map(|_| (g.label.as_str(), &g.z));
                        let p = penmlmm::predict(&g.x, &files.params, &files.blups, group)?;
                        pred.rows_mut(row, p.nrows()).copy_from(&p);
                        row += p.nrows();
                    }
                    let e = rmse(&d.stacked_y(), &pred)?;
                    for (c, v) in e.iter().enumerate() {
                        ok(&mut table, "rmse", c + 1, *v);
                    }
                    ok(&mut table, "rmse_mean", 0, e.mean());
                }
                None => omit(&mut table, "rmse", "test dataset is empty"),
            }
        }
        None => omit(&mut table, "rmse", "no test dataset supplied"),
    }

    match &ec.truth_dir {
        Some(dir) => {
            let b_true = read_matrix(&dir.join("b_true.csv"))?.values;
            let psi_true = read_matrix(&dir.join("psi_true.csv"))?.values;
            ok(&mut table, "b_frobenius", 0, frobenius_distance(&b_true, &files.params.b)?);
            ok(&mut table, "psi_frobenius", 0, frobenius_distance(&psi_true, &files.params.psi)?);
            match support_roc(&b_true, &[(s.lambda, files.params.b.clone())]) {
                Ok(pts) => {
                    ok(&mut table, "sensitivity", 0, pts[0].sensitivity);
                    ok(&mut table, "specificity", 0, pts[0].specificity);
                }
                Err(e) => {
                    omit(&mut table, "sensitivity", &e.to_string());
                    omit(&mut table, "specificity", &e.to_string());
                }
            }
        }
        None => {
            for m in ["b_frobenius", "psi_frobenius", "sensitivity", "specificity"] {
                omit(&mut table, m, "no truth supplied");
            }
        }
    }

    let v: DVector<f64> = pvre(&files.params)?;
    for (c, x) in v.iter().enumerate() {
        ok(&mut table, "pvre", c + 1, *x);
    }
    let active = active_feature_count(&files.params.b);
    ok(&mut table, "active_rows", 0, active.joint_rows as f64);
    for (c, n) in active.per_response.iter().enumerate() {
        ok(&mut table, "active_coefficients", c + 1, *n as f64);
    }
    write_file(&ctx.out.join("metrics.csv"), &table)?;
    ctx.note(format!("metrics written to {}", ctx.out.join("metrics.csv").display()));
    Ok(())
}

pub fn replicate(ctx: &Context) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let rc = &cfg.replicate;
    let mut study = StudyConfig::new(cfg.simulate.to_spec()?, rc.replications, rc.master_seed);
    study.n_lambda = rc.n_lambda;
    study.lambda_min_ratio = rc.min_ratio;
    study.alpha = rc.alpha;
    study.graph_threshold = rc.graph_threshold;
    study.binary_graph = rc.binary_graph;
    study.network_aux_grid = rc.network_aux_grid.clone();
    study.em = cfg.em.to_em(false);
    if !rc.models.is_empty() {
        let all = ModelConfig::all();
        study.models = rc
            .models
            .iter()
            .map(|name| {
                all.iter().copied().find(|m| m.name() == name).ok_or_else(|| {
                    CliError::Config(format!(
                        "unknown model `{name}`; expected one of {}",
                        all.iter().map(|m| m.name()).collect::<Vec<_>>().join(", ")
                    ))
                })
            })
            .collect::<Result<_, _>>()?;
    }
    ctx.note(format!("running {} replications of {} models", study.replications, study.models.len()));
    let results = run_study(&study)?;
    write_file(&ctx.out.join("replications.csv"), &replication_table(&results))?;
    write_file(&ctx.out.join("summary.csv"), &summary_table(&results))?;

    #[derive(Serialize)]
    struct StudySummary {
        scenario: &'static str,
        replications: usize,
        master_seed: u64,
        seeds: Vec<u64>,
        models: Vec<&'static str>,
        config_hash: String,
    }
    json(
        &ctx.out.join("study.json"),
        &StudySummary {
            scenario: study.scenario.scenario.name(),
            replications: study.replications,
            master_seed: study.master_seed,
            seeds: results.iter().map(|r| r.seed).collect(),
            models: study.models.iter().map(|m| m.name()).collect(),
            config_hash: ctx.hash.clone(),
        },
    )?;
    ctx.note(format!("tables written to {}", ctx.out.display()));
    Ok(())
}
