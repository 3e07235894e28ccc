mod common;

use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;

use common::*;
use penmlmm::estep::{e_step, posterior_covariance, posterior_mean};
use penmlmm::{loglik_gradient, marginal_loglik, Group, GroupedDataset, ModelParams};

fn random_instance(seed: u64, max_qr: usize, singular_psi: bool) -> (GroupedDataset, ModelParams) {
    let mut rng = rng(seed);
    let r = rng.random_range(1..=4);
    let q = rng.random_range(1..=(max_qr / r).clamp(1, 3));
    let p = rng.random_range(1..=4);
    let qr = q * r;
    let psi = if singular_psi { psd_rank(&mut rng, qr, qr.saturating_sub(1).max(1) - usize::from(qr == 1)) } else { spd(&mut rng, qr, 0.1) };
    let params = ModelParams::new(normal(&mut rng, p, r), spd(&mut rng, r, 0.2), psi).unwrap();
    let j = rng.random_range(1..=4);
    let sizes: Vec<usize> = (0..j).map(|_| rng.random_range(1..=6)).collect();
    (grouped(&mut rng, &sizes, &params, q), params)
}

#[test]
fn loglik_matches_dense_kronecker_form() {
    for seed in 0..30 {
        let (data, params) = random_instance(seed, 10, seed % 3 == 0);
        let fast = marginal_loglik(&data, &params).unwrap();
        let dense = dense_loglik(&data, &params);
        assert!((fast - dense).abs() <= 1e-8 * dense.abs().max(1.0), "seed {seed}: {fast} vs {dense}");
    }
}

#[test]
fn posterior_moments_match_dense_conditioning() {
    for seed in 0..20 {
        let (data, params) = random_instance(100 + seed, 10, seed % 4 == 0);
        let (moments, _) = e_step(&data, &params).unwrap();
        for (j, g) in data.groups().iter().enumerate() {
            let (gamma, mean) = dense_posterior(g, &params);
            let scale = params.psi.amax().max(1.0);
            assert!((&moments.gamma[j] - &gamma).amax() <= 1e-10 * scale, "seed {seed} group {j} gamma");
            assert!((&moments.mean[j] - &mean).amax() <= 1e-10 * scale.max(mean.amax()), "seed {seed} group {j} mean");
            let gamma_alone = posterior_covariance(&g.z, &params).unwrap();
            assert!((&gamma_alone - &gamma).amax() <= 1e-10 * scale);
            let mean_alone = posterior_mean(&g.x, &g.z, &g.y, &params, &gamma_alone).unwrap();
            assert!((&mean_alone - &mean).amax() <= 1e-9 * scale.max(mean.amax()), "seed {seed} group {j}");
        }
    }
}

#[test]
fn analytic_gradient_matches_finite_differences() {
    for seed in 0..10 {
        let (data, params) = random_instance(300 + seed, 6, false);
        let grad = loglik_gradient(&data, &params).unwrap();
        let h = 1e-5;
        for l in 0..params.p() {
            for c in 0..params.r() {
                let mut plus = params.clone();
                plus.b[(l, c)] += h;
                let mut minus = params.clone();
                minus.b[(l, c)] -= h;
                let fd = (marginal_loglik(&data, &plus).unwrap() - marginal_loglik(&data, &minus).unwrap()) / (2.0 * h);
                let g = grad[(l, c)];
                assert!((g - fd).abs() <= 1e-5 * g.abs().max(1.0), "seed {seed} ({l},{c}): {g} vs {fd}");
            }
        }
    }
}

#[test]
fn gradient_matches_dense_form() {
    for seed in 0..10 {
        let (data, params) = random_instance(400 + seed, 8, seed % 2 == 0);
        let grad = loglik_gradient(&data, &params).unwrap();
        let mut dense = DMatrix::zeros(params.p(), params.r());
        for g in data.groups() {
            let v = dense_v(&g.z, &params);
            let e = vec_of(&(&g.y - &g.x * &params.b));
            let w = v.cholesky().unwrap().solve(&e);
            dense += g.x.transpose() * DMatrix::from_column_slice(g.y.nrows(), params.r(), w.as_slice());
        }
        assert!((&grad - &dense).amax() <= 1e-8 * dense.amax().max(1.0), "seed {seed}");
    }
}

#[test]
fn single_response_intercept_model_matches_scalar_formula() {
    // r = q = 1, B = 0: V = ψ11' + σ²I, |V| = σ^{2(n-1)}(σ² + nψ) and
    // y'V⁻¹y = (y'y − ψ(Σy)²/(σ² + nψ))/σ²
    let y = [1.5, -0.3, 2.2, 0.7];
    let (psi, s2) = (2.0, 0.5);
    let n = y.len() as f64;
    let group = Group {
        label: "a".into(),
        x: DMatrix::from_element(4, 1, 1.0),
        z: DMatrix::from_element(4, 1, 1.0),
        y: DMatrix::from_column_slice(4, 1, &y),
    };
    let data = GroupedDataset::new(vec![group]).unwrap();
    let params = ModelParams::new(DMatrix::zeros(1, 1), DMatrix::from_element(1, 1, s2), DMatrix::from_element(1, 1, psi)).unwrap();
    let sum: f64 = y.iter().sum();
    let yty: f64 = y.iter().map(|v| v * v).sum();
    let log_det = (n - 1.0) * s2.ln() + (s2 + n * psi).ln();
    let quad = (yty - psi * sum * sum / (s2 + n * psi)) / s2;
    let expect = -0.5 * (n * (2.0 * std::f64::consts::PI).ln() + log_det + quad);
    let got = marginal_loglik(&data, &params).unwrap();
    assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    let (m, _) = e_step(&data, &params).unwrap();
    // posterior of a random intercept: mean nψȳ/(σ² + nψ), variance ψσ²/(σ² + nψ)
    assert!((m.mean[0][0] - psi * sum / (s2 + n * psi)).abs() < 1e-12);
    assert!((m.gamma[0][(0, 0)] - psi * s2 / (s2 + n * psi)).abs() < 1e-12);
}

#[test]
fn zero_psi_reduces_to_independent_rows() {
    let mut rng = rng(77);
    let r = 3;
    let params = ModelParams::new(normal(&mut rng, 2, r), spd(&mut rng, r, 0.5), DMatrix::zeros(r, r)).unwrap();
    let data = grouped(&mut rng, &[5, 7], &params, 1);
    let sigma_inv = params.sigma.clone().try_inverse().unwrap();
    let log_det = params.sigma.determinant().ln();
    let mut expect = 0.0;
    for g in data.groups() {
        let e = &g.y - &g.x * &params.b;
        for i in 0..e.nrows() {
            let row = e.row(i);
            expect -= 0.5 * (r as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + (row * &sigma_inv * row.transpose())[(0, 0)]);
        }
    }
    let got = marginal_loglik(&data, &params).unwrap();
    assert!((got - expect).abs() < 1e-9 * expect.abs());
}

fn reorder(data: &GroupedDataset, group_order: &[usize], row_perm: bool) -> GroupedDataset {
    let groups = group_order
        .iter()
        .map(|&j| {
            let g = &data.groups()[j];
            let n = g.y.nrows();
            let rows: Vec<usize> = if row_perm { (0..n).rev().collect() } else { (0..n).collect() };
            Group {
                label: format!("relabelled-{}", g.label),
                x: g.x.select_rows(&rows),
                z: g.z.select_rows(&rows),
                y: g.y.select_rows(&rows),
            }
        })
        .collect();
    GroupedDataset::new(groups).unwrap()
}

#[test]
fn invariant_to_group_order_labels_and_row_order() {
    for seed in 0..5 {
        let (data, params) = random_instance(500 + seed, 8, false);
        let j = data.groups().len();
        let order: Vec<usize> = (0..j).rev().collect();
        let base = marginal_loglik(&data, &params).unwrap();
        let moved = marginal_loglik(&reorder(&data, &order, true), &params).unwrap();
        assert!((base - moved).abs() <= 1e-10 * base.abs().max(1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn posterior_covariance_is_between_zero_and_prior(seed in 0u64..100_000) {
        let (data, params) = random_instance(seed, 9, seed % 2 == 0);
        let (m, _) = e_step(&data, &params).unwrap();
        for gamma in &m.gamma {
            let lo = gamma.clone().symmetric_eigen().eigenvalues.min();
            let hi = (&params.psi - gamma).symmetric_eigen().eigenvalues.min();
            let scale = params.psi.amax().max(1.0);
            prop_assert!(lo >= -1e-10 * scale);
            prop_assert!(hi >= -1e-10 * scale);
        }
    }

    #[test]
    fn loglik_is_finite_for_valid_parameters(seed in 0u64..100_000) {
        let (data, params) = random_instance(seed, 10, seed % 5 == 0);
        prop_assert!(marginal_loglik(&data, &params).unwrap().is_finite());
    }
}
