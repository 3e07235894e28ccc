//! One PASS/FAIL line per acceptance criterion. Exits non-zero when any
//! criterion fails.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use common::*;
use penmlmm::em::{adjusted_responses, m_step_b};
use penmlmm::estep::e_step;
use penmlmm::sim::{adjacency_from_correlation, generate, reference_psi, reference_sigma, Scenario, ScenarioSpec};
use penmlmm::solver::{solve, Design, SolverConfig};
use penmlmm::{fit, loglik_gradient, marginal_loglik, pvre, EmConfig, ModelParams, PenaltySpec};

const MASTER_SEED: u64 = 20260601;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn family_spec(family: usize, lambda: f64, x: &DMatrix<f64>, y: &DMatrix<f64>) -> PenaltySpec {
    match family {
        0 => PenaltySpec::ElasticNet { lambda, alpha: 0.5 },
        1 => PenaltySpec::GroupLasso { lambda, alpha: 0.5 },
        _ => PenaltySpec::NetworkReg {
            lambda,
            lambda_x: 0.1,
            lambda_y: 0.1,
            graph_x: adjacency_from_correlation(&x.columns(1, x.ncols() - 1).into_owned(), 0.1, false).unwrap(),
            graph_y: adjacency_from_correlation(y, 0.1, false).unwrap(),
        },
    }
}

fn em_ascent() -> Outcome {
    let mut worst = 0.0f64;
    let mut violations = 0;
    let mut fits = 0;
    for family in 0..3 {
        for i in 0..20u64 {
            let scenario = if i % 2 == 0 { Scenario::RowWiseSparse } else { Scenario::SparseAtRandom };
            let sim = generate(&ScenarioSpec::reference(scenario, 1000 + i)).unwrap();
            let (x, y) = (sim.data.stacked_x(), sim.data.stacked_y());
            for lambda in [0.01, 0.1, 1.0] {
                let f = fit(&sim.data, &family_spec(family, lambda, &x, &y), &EmConfig::default()).unwrap();
                fits += 1;
                for w in f.objective_trace.windows(2) {
                    let drop = w[0] - w[1];
                    let slack = 1e-8 * (1.0 + w[0].abs());
                    if drop > slack {
                        violations += 1;
                    }
                    worst = worst.max(drop / (1.0 + w[0].abs()));
                }
            }
        }
    }
    outcome(violations == 0, format!("{fits} fits, {violations} iterations below slack, worst relative drop {worst:.2e}"))
}

fn solver_oracle() -> Outcome {
    let cfg = SolverConfig { tol: 1e-10, max_sweeps: 100_000, ..SolverConfig::default() };
    let (mut worst_obj, mut worst_coef) = (0.0f64, 0.0f64);
    for seed in 0..50u64 {
        let mut rng = rng(5000 + seed);
        let p = rng.random_range(2..=8);
        let r = rng.random_range(1..=3);
        let n = rng.random_range((2 * p).max(10)..=40);
        let x = design(&mut rng, n, p);
        let y = &x * normal(&mut rng, p, r) + normal(&mut rng, n, r);
        let d = Design::new(x.clone()).unwrap();
        for family in 0..3 {
            let lambda = 10f64.powf(rng.random_range(-1.0..1.5));
            let alpha = rng.random_range(0.2..1.0);
            let spec = match family {
                0 => PenaltySpec::ElasticNet { lambda, alpha },
                1 => PenaltySpec::GroupLasso { lambda, alpha },
                _ => PenaltySpec::NetworkReg {
                    lambda,
                    lambda_x: rng.random_range(0.0..2.0),
                    lambda_y: rng.random_range(0.0..2.0),
                    graph_x: random_adjacency(&mut rng, p - 1),
                    graph_y: random_adjacency(&mut rng, r),
                },
            };
            let cd = solve(&d, &y, &spec, &cfg, None).unwrap();
            let pg = proximal_gradient(&x, &y, &spec);
            let (a, b) = (objective(&x, &y, &cd.b, &spec), objective(&x, &y, &pg, &spec));
            worst_obj = worst_obj.max((a - b).abs() / b.abs().max(1.0));
            worst_coef = worst_coef.max((&cd.b - &pg).amax());
        }
    }
    outcome(
        worst_obj <= 1e-5 && worst_coef <= 1e-4,
        format!("150 solves, max objective gap {worst_obj:.2e} (tol 1e-5), max coefficient gap {worst_coef:.2e} (tol 1e-4)"),
    )
}

fn gls_reduction() -> Outcome {
    let mut spec = ScenarioSpec::reference(Scenario::RowWiseSparse, 77);
    spec.p = 20;
    spec.support_rows = 6;
    let sim = generate(&spec).unwrap();
    let mut rng = rng(77);
    let params = ModelParams::new(normal(&mut rng, 20, 5), spd(&mut rng, 5, 0.5), sim.psi_true.clone()).unwrap();
    let (moments, _) = e_step(&sim.data, &params).unwrap();
    let design = Design::new(sim.data.stacked_x()).unwrap();
    let zero = PenaltySpec::GroupLasso { lambda: 0.0, alpha: 0.5 };
    let cfg = SolverConfig { tol: 1e-12, max_sweeps: 100_000, ..SolverConfig::default() };
    let update = m_step_b(&design, &sim.data, &moments, &params.sigma, &zero, &cfg, None).unwrap();
    let oracle = normal_equations(&sim.data.stacked_x(), &adjusted_responses(&sim.data, &moments));
    let gap = (&update.b - &oracle).amax();
    outcome(gap <= 1e-6, format!("p = 20, N = 600, max |B̂ − B_ls| = {gap:.2e} (tol 1e-6)"))
}

/// `table[(model, metric, component)]` holds one value per replication.
type Table = BTreeMap<(String, String, usize), Vec<f64>>;

fn read_table(path: &Path) -> Table {
    let mut t = Table::new();
    for line in fs::read_to_string(path).unwrap().lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        t.entry((f[2].to_string(), f[3].to_string(), f[4].parse().unwrap()))
            .or_default()
            .push(f[5].parse().unwrap());
    }
    t
}

fn column<'a>(t: &'a Table, model: &str, metric: &str, comp: usize) -> &'a [f64] {
    &t[&(model.to_string(), metric.to_string(), comp)]
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn random_vs_fixed(t: &Table) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for family in ["elastic_net", "group_lasso", "network"] {
        let (fe, re) = (format!("{family}_fe"), format!("{family}_re"));
        let wins: Vec<usize> = (1..=4)
            .map(|c| {
                let (a, b) = (column(t, &re, "test_rmse", c), column(t, &fe, "test_rmse", c));
                a.iter().zip(b).filter(|(r, f)| r < f).count()
            })
            .collect();
        let (m_re, m_fe) = (mean(column(t, &re, "test_rmse", 5)), mean(column(t, &fe, "test_rmse", 5)));
        let rel = (m_re - m_fe).abs() / m_fe;
        pass &= wins.iter().all(|&w| w >= 9) && rel < 0.10;
        parts.push(format!("{family}: wins {wins:?}/10, component 5 gap {:.1}%", 100.0 * rel));
    }
    outcome(pass, parts.join("; "))
}

fn psi_recovery(t: &Table) -> Outcome {
    let model = "group_lasso_re";
    let dist = column(t, model, "psi_frobenius", 0);
    let diag: Vec<&[f64]> = (1..=5).map(|c| column(t, model, "psi_diag", c)).collect();
    let ordered = (0..dist.len()).filter(|&i| (0..4).all(|c| diag[c][i] > diag[c + 1][i])).count();
    let means: Vec<String> = diag.iter().map(|d| format!("{:.1}", mean(d))).collect();
    outcome(
        dist.iter().all(|v| v.is_finite()) && ordered >= 8,
        format!(
            "mean ‖Ψ − Ψ̂‖_F = {:.2}, ordering held in {ordered}/{} replications (need 8), mean diag(Ψ̂) = [{}]",
            mean(dist),
            dist.len(),
            means.join(", ")
        ),
    )
}

fn roc_dominance(t: &Table) -> Outcome {
    let models = ["elastic_net_fe", "elastic_net_re", "group_lasso_fe", "group_lasso_re", "network_fe", "network_re"];
    let aucs: Vec<&[f64]> = models.iter().map(|m| column(t, m, "auc", 0)).collect();
    let n = aucs[3].len();
    let best = (0..n).filter(|&i| aucs.iter().all(|a| aucs[3][i] >= a[i])).count();
    let means: Vec<String> = models.iter().zip(&aucs).map(|(m, a)| format!("{m} {:.3}", mean(a))).collect();
    outcome(best >= 8, format!("group_lasso_re highest in {best}/{n} (need 8); mean AUC {}", means.join(", ")))
}

fn pvre_arithmetic() -> Outcome {
    let expect = [0.9335, 0.8157, 0.8734, 0.7892, 0.0308];
    let sim = generate(&ScenarioSpec::reference(Scenario::RowWiseSparse, 1)).unwrap();
    let params = ModelParams::new(DMatrix::zeros(1, 5), reference_sigma(), sim.psi_true.clone()).unwrap();
    let got = pvre(&params).unwrap();
    let gap = got.iter().zip(expect).map(|(g, e)| (g - e).abs()).fold(0.0, f64::max);
    let published_diag = reference_psi().diagonal();
    let from_published: Vec<f64> =
        (0..5).map(|c| published_diag[c] / (published_diag[c] + reference_sigma()[(c, c)])).collect();
    let gap_published = from_published.iter().zip(expect).map(|(g, e)| (g - e).abs()).fold(0.0, f64::max);
    outcome(
        gap <= 5e-4,
        format!(
            "pvre = [{}], max gap {gap:.1e} (tol 5e-4; {gap_published:.1e} on the unprojected diagonal)",
            got.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(", ")
        ),
    )
}

fn small_instance(seed: u64, max_qr: usize) -> (penmlmm::GroupedDataset, ModelParams) {
    let mut rng = rng(seed);
    let r = rng.random_range(1..=4);
    let q = rng.random_range(1..=(max_qr / r).clamp(1, 3));
    let p = rng.random_range(1..=4);
    let params = ModelParams::new(normal(&mut rng, p, r), spd(&mut rng, r, 0.2), spd(&mut rng, q * r, 0.1)).unwrap();
    let sizes: Vec<usize> = (0..rng.random_range(1..=4)).map(|_| rng.random_range(1..=6)).collect();
    (grouped(&mut rng, &sizes, &params, q), params)
}

fn gradient_check() -> Outcome {
    let h = 1e-5;
    let mut worst = 0.0f64;
    for seed in 0..10 {
        let (data, params) = small_instance(7000 + seed, 6);
        let grad = loglik_gradient(&data, &params).unwrap();
        for l in 0..params.p() {
            for c in 0..params.r() {
                let (mut plus, mut minus) = (params.clone(), params.clone());
                plus.b[(l, c)] += h;
                minus.b[(l, c)] -= h;
                let fd = (marginal_loglik(&data, &plus).unwrap() - marginal_loglik(&data, &minus).unwrap()) / (2.0 * h);
                worst = worst.max((grad[(l, c)] - fd).abs() / grad[(l, c)].abs().max(1.0));
            }
        }
    }
    outcome(worst <= 1e-5, format!("10 instances, max relative gap {worst:.2e} (tol 1e-5)"))
}

fn estep_dense() -> Outcome {
    let mut worst = 0.0f64;
    let mut max_qr = 0;
    for seed in 0..20 {
        let (data, params) = small_instance(8000 + seed, 10);
        max_qr = max_qr.max(params.psi.nrows());
        let (moments, _) = e_step(&data, &params).unwrap();
        for (j, g) in data.groups().iter().enumerate() {
            let (gamma, mu): (DMatrix<f64>, DVector<f64>) = dense_posterior(g, &params);
            let scale = params.psi.amax().max(1.0);
            worst = worst.max((&moments.gamma[j] - gamma).amax() / scale);
            worst = worst.max((&moments.mean[j] - &mu).amax() / scale.max(mu.amax()));
        }
    }
    outcome(worst <= 1e-10, format!("20 instances (qr ≤ {max_qr}), max scaled gap {worst:.2e} (tol 1e-10)"))
}

fn replicate_config(dir: &Path, out: &str) -> std::path::PathBuf {
    let path = dir.join(format!("{out}.toml"));
    fs::write(&path, format!("output_dir = \"{out}\"\n[replicate]\nreplications = 10\nmaster_seed = {MASTER_SEED}\n")).unwrap();
    path
}

fn run_replicate(dir: &Path, out: &str) -> u8 {
    let cfg = replicate_config(dir, out);
    penmlmm_cli::run_from(["penmlmm".as_ref(), "replicate".as_ref(), "--quiet".as_ref(), "--config".as_ref(), cfg.as_os_str()])
}

fn main() {
    let tmp = tempfile::TempDir::new().unwrap();
    let dir = tmp.path();
    let mut results: Vec<(u32, &str, Outcome, f64)> = Vec::new();
    let mut timed = |n: u32, name: &'static str, f: &dyn Fn() -> Outcome| {
        let start = Instant::now();
        let o = f();
        let secs = start.elapsed().as_secs_f64();
        println!("{} criterion {n} ({name}): {} [{secs:.1}s]", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o, secs));
    };

    timed(1, "EM ascent", &em_ascent);
    timed(2, "solver oracle equivalence", &solver_oracle);
    timed(3, "GLS reduction", &gls_reduction);

    let start = Instant::now();
    let code_a = run_replicate(dir, "study_a");
    let study_secs = start.elapsed().as_secs_f64();
    let table = (code_a == 0).then(|| read_table(&dir.join("study_a/replications.csv")));
    let table = &table;
    let study = |f: fn(&Table) -> Outcome| {
        move || match table {
            Some(t) => f(t),
            None => outcome(false, format!("replicate exited with {code_a}")),
        }
    };
    println!("     simulation study: 10 replications × 6 models in {study_secs:.1}s");
    timed(4, "random vs fixed effects test RMSE", &study(random_vs_fixed));
    timed(5, "Ψ recovery", &study(psi_recovery));
    timed(6, "ROC dominance", &study(roc_dominance));
    timed(7, "PVRE arithmetic", &pvre_arithmetic);
    timed(8, "gradient check", &gradient_check);
    timed(9, "E-step dense equivalence", &estep_dense);
    timed(10, "determinism", &|| {
        let code_b = run_replicate(dir, "study_b");
        if code_a != 0 || code_b != 0 {
            return outcome(false, format!("replicate exited with {code_a} / {code_b}"));
        }
        let same = ["replications.csv", "summary.csv"]
            .iter()
            .all(|f| fs::read(dir.join("study_a").join(f)).unwrap() == fs::read(dir.join("study_b").join(f)).unwrap());
        outcome(same, if same { "aggregate tables byte-identical across two runs" } else { "aggregate tables differ" })
    });

    let failed: Vec<String> = results.iter().filter(|r| !r.2.pass).map(|r| r.0.to_string()).collect();
    println!("acceptance: {}/{} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
