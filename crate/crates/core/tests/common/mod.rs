//! Independent reference implementations used by the integration tests:
//! an accelerated proximal-gradient solver, dense Kronecker-form likelihood
//! and posterior moments, and normal-equation least squares.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use penmlmm::{Group, GroupedDataset, ModelParams, PenaltySpec};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Design with a leading column of ones.
pub fn design(rng: &mut ChaCha8Rng, n: usize, p: usize) -> DMatrix<f64> {
    let mut x = normal(rng, n, p);
    x.column_mut(0).fill(1.0);
    x
}

/// Random symmetric positive definite matrix with eigenvalues bounded below.
pub fn spd(rng: &mut ChaCha8Rng, d: usize, floor: f64) -> DMatrix<f64> {
    let a = normal(rng, d, d);
    &a * a.transpose() / d as f64 + DMatrix::identity(d, d) * floor
}

/// Random PSD matrix of the given rank.
pub fn psd_rank(rng: &mut ChaCha8Rng, d: usize, rank: usize) -> DMatrix<f64> {
    let a = normal(rng, d, rank);
    &a * a.transpose()
}

pub fn random_adjacency(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(d, d);
    for a in 0..d {
        for b in (a + 1)..d {
            if rng.random::<f64>() < 0.5 {
                let w = rng.random::<f64>();
                g[(a, b)] = w;
                g[(b, a)] = w;
            }
        }
    }
    g
}

/// Grouped dataset drawn from the model with the given parameters.
pub fn grouped(rng: &mut ChaCha8Rng, sizes: &[usize], params: &ModelParams, q: usize) -> GroupedDataset {
    let (p, r) = (params.p(), params.r());
    let psi_root = symmetric_root(&params.psi);
    let sigma_root = symmetric_root(&params.sigma);
    let groups = sizes
        .iter()
        .enumerate()
        .map(|(j, &n)| {
            let x = design(rng, n, p);
            let mut z = normal(rng, n, q);
            z.column_mut(0).fill(1.0);
            let lambda_vec = &psi_root * normal(rng, q * r, 1);
            let lambda = DMatrix::from_column_slice(q, r, lambda_vec.as_slice());
            let e = normal(rng, n, r) * &sigma_root;
            let y = &x * &params.b + &z * lambda + e;
            Group { label: format!("grp{j}"), x, z, y }
        })
        .collect();
    GroupedDataset::new(groups).unwrap()
}

pub fn symmetric_root(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let d = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// Column-stacked vec of a matrix.
pub fn vec_of(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

/// `U = I_r ⊗ Z` so that `vec(ZΛ) = U vec(Λ)`.
pub fn u_matrix(z: &DMatrix<f64>, r: usize) -> DMatrix<f64> {
    DMatrix::<f64>::identity(r, r).kronecker(z)
}

/// Dense marginal covariance `V = UΨU' + Σ ⊗ I_n`.
pub fn dense_v(z: &DMatrix<f64>, params: &ModelParams) -> DMatrix<f64> {
    let n = z.nrows();
    let u = u_matrix(z, params.r());
    &u * &params.psi * u.transpose() + params.sigma.kronecker(&DMatrix::<f64>::identity(n, n))
}

pub fn dense_group_loglik(g: &Group, params: &ModelParams) -> f64 {
    let v = dense_v(&g.z, params);
    let e = vec_of(&(&g.y - &g.x * &params.b));
    let chol = v.clone().cholesky().expect("V positive definite");
    let log_det = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let quad = e.dot(&chol.solve(&e));
    -0.5 * (e.len() as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + quad)
}

pub fn dense_loglik(data: &GroupedDataset, params: &ModelParams) -> f64 {
    data.groups().iter().map(|g| dense_group_loglik(g, params)).sum()
}

/// Posterior covariance and mean of vec(Λ_j) by Gaussian conditioning on
/// the dense joint covariance: `Γ = Ψ − ΨU'V⁻¹UΨ`, `μ = ΨU'V⁻¹ vec(E)`.
pub fn dense_posterior(g: &Group, params: &ModelParams) -> (DMatrix<f64>, DVector<f64>) {
    let v = dense_v(&g.z, params);
    let u = u_matrix(&g.z, params.r());
    let chol = v.cholesky().expect("V positive definite");
    let cross = &params.psi * u.transpose();
    let e = vec_of(&(&g.y - &g.x * &params.b));
    let gamma = &params.psi - &cross * chol.solve(&cross.transpose());
    let mean = &cross * chol.solve(&e);
    (gamma, mean)
}

/// Least squares through the normal equations.
pub fn normal_equations(x: &DMatrix<f64>, y: &DMatrix<f64>) -> DMatrix<f64> {
    let xtx = x.transpose() * x;
    xtx.cholesky().expect("full column rank").solve(&(x.transpose() * y))
}

/// Decomposition of a penalty into smooth and nonsmooth parts for the
/// proximal-gradient reference.
struct Split {
    ridge: f64,
    l1: f64,
    group: f64,
    lap_x: Option<(f64, DMatrix<f64>)>,
    lap_y: Option<(f64, DMatrix<f64>)>,
}

fn laplacian(g: &DMatrix<f64>) -> DMatrix<f64> {
    let d = DMatrix::from_diagonal(&DVector::from_iterator(g.nrows(), g.row_iter().map(|r| r.sum())));
    d - g
}

fn split(spec: &PenaltySpec) -> Split {
    match spec {
        PenaltySpec::ElasticNet { lambda, alpha } => {
            Split { ridge: lambda * (1.0 - alpha), l1: lambda * alpha, group: 0.0, lap_x: None, lap_y: None }
        }
        PenaltySpec::GroupLasso { lambda, alpha } => {
            Split { ridge: lambda * (1.0 - alpha), l1: 0.0, group: lambda * alpha, lap_x: None, lap_y: None }
        }
        PenaltySpec::NetworkReg { lambda, lambda_x, lambda_y, graph_x, graph_y } => Split {
            ridge: 0.0,
            l1: *lambda,
            group: 0.0,
            lap_x: Some((*lambda_x, laplacian(graph_x))),
            lap_y: Some((*lambda_y, laplacian(graph_y))),
        },
    }
}

fn smooth_value(s: &Split, x: &DMatrix<f64>, y: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let p = b.nrows();
    let b0 = b.rows(1, p - 1);
    let mut v = 0.5 * (y - x * b).norm_squared() + s.ridge * b0.norm_squared();
    if let Some((w, l)) = &s.lap_x {
        v += w * (b0.transpose() * l * b0).trace();
    }
    if let Some((w, l)) = &s.lap_y {
        v += w * (b0 * l * b0.transpose()).trace();
    }
    v
}

fn smooth_grad(s: &Split, x: &DMatrix<f64>, y: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let p = b.nrows();
    let mut g = -(x.transpose() * (y - x * b));
    let b0 = b.rows(1, p - 1).into_owned();
    let mut pen = &b0 * (2.0 * s.ridge);
    if let Some((w, l)) = &s.lap_x {
        pen += l * &b0 * (2.0 * w);
    }
    if let Some((w, l)) = &s.lap_y {
        pen += &b0 * l * (2.0 * w);
    }
    let mut rows = g.rows_mut(1, p - 1);
    rows += pen;
    g
}

fn nonsmooth_value(s: &Split, b: &DMatrix<f64>) -> f64 {
    let p = b.nrows();
    let b0 = b.rows(1, p - 1);
    s.l1 * b0.iter().map(|v| v.abs()).sum::<f64>() + s.group * b0.row_iter().map(|r| r.norm()).sum::<f64>()
}

fn prox(s: &Split, v: &DMatrix<f64>, step: f64) -> DMatrix<f64> {
    let mut out = v.clone();
    for l in 1..v.nrows() {
        if s.l1 > 0.0 {
            for c in 0..v.ncols() {
                let z = v[(l, c)];
                out[(l, c)] = z.signum() * (z.abs() - step * s.l1).max(0.0);
            }
        }
        if s.group > 0.0 {
            let norm = v.row(l).norm();
            let scale = if norm > step * s.group { 1.0 - step * s.group / norm } else { 0.0 };
            let row = v.row(l) * scale;
            out.row_mut(l).copy_from(&row);
        }
    }
    out
}

fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().symmetric_eigen().eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()))
}

/// The objective shared by every solver: `½‖Y − XB‖² + penalty(B)`, row 0
/// unpenalized.
pub fn objective(x: &DMatrix<f64>, y: &DMatrix<f64>, b: &DMatrix<f64>, spec: &PenaltySpec) -> f64 {
    let s = split(spec);
    smooth_value(&s, x, y, b) + nonsmooth_value(&s, b)
}

/// FISTA with adaptive restart, run until the iterates stop moving.
pub fn proximal_gradient(x: &DMatrix<f64>, y: &DMatrix<f64>, spec: &PenaltySpec) -> DMatrix<f64> {
    let s = split(spec);
    let mut lip = spectral_norm(&(x.transpose() * x)) + 2.0 * s.ridge;
    if let Some((w, l)) = &s.lap_x {
        lip += 2.0 * w * spectral_norm(l);
    }
    if let Some((w, l)) = &s.lap_y {
        lip += 2.0 * w * spectral_norm(l);
    }
    let step = 1.0 / lip;
    let mut b = DMatrix::zeros(x.ncols(), y.ncols());
    let mut z = b.clone();
    let mut t = 1.0f64;
    let mut prev_obj = f64::INFINITY;
    for _ in 0..200_000 {

        let grad = smooth_grad(&s, x, y, &z);
        let next = prox(&s, &(&z - grad * step), step);
        let obj = smooth_value(&s, x, y, &next) + nonsmooth_value(&s, &next);
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let moved = (&next - &b).amax();
        if moved < 1e-12 {
            b = next;
            break;
        }
        if obj > prev_obj {
            if t == 1.0 {
                // even a plain step no longer decreases the objective
                break;
            }
            // restart momentum
            z = b.clone();
            t = 1.0;
            continue;
        }
        z = &next + (&next - &b) * ((t - 1.0) / t_next);
        b = next;
        t = t_next;
        prev_obj = obj;
    }
    b
}
