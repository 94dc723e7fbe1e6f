//! Closed-form and Newton oracles for the penalized learners, shared by the learner
//! tests and the acceptance target.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use selection_dml::learners::{fit_lasso_linear, fit_lasso_logistic, kkt_residual, DEFAULT_TOL};
use selection_dml::LearnerSpec;

pub const LINEAR_KKT_BOUND: f64 = 10.0 * DEFAULT_TOL;
pub const LOGISTIC_KKT_BOUND: f64 = 1e-5;

pub fn normal_matrix(rng: &mut ChaCha8Rng, n: usize, p: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, p, |_, _| rng.sample(StandardNormal))
}

/// Scales a column to mean 0 and population variance 1.
pub fn standardized(raw: &[f64]) -> Vec<f64> {
    let n = raw.len() as f64;
    let m = raw.iter().sum::<f64>() / n;
    let sd = (raw.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
    raw.iter().map(|v| (v - m) / sd).collect()
}

pub fn soft_threshold(rho: f64, lambda: f64) -> f64 {
    rho.signum() * (rho.abs() - lambda).max(0.0)
}

fn with_intercept(x: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), x.ncols() + 1, |i, j| {
        if j == 0 {
            1.0
        } else {
            x[(i, j - 1)]
        }
    })
}

/// Least squares with intercept via the normal equations.
pub fn ols(x: &DMatrix<f64>, y: &[f64]) -> Vec<f64> {
    let design = with_intercept(x);
    let xtx = design.transpose() * &design;
    let xty = design.transpose() * DVector::from_column_slice(y);
    xtx.cholesky()
        .expect("full rank")
        .solve(&xty)
        .iter()
        .copied()
        .collect()
}

/// Unpenalized logistic regression with intercept by Newton-Raphson.
pub fn irls_oracle(x: &DMatrix<f64>, y: &[f64]) -> Vec<f64> {
    let n = x.nrows();
    let design = with_intercept(x);
    let k = design.ncols();
    let mut beta = DVector::zeros(k);
    for _ in 0..100 {
        let eta = &design * &beta;
        let mu: Vec<f64> = eta.iter().map(|e| 1.0 / (1.0 + (-e).exp())).collect();
        let grad = design.transpose() * DVector::from_fn(n, |i, _| y[i] - mu[i]);
        let mut hess = DMatrix::zeros(k, k);
        for (row, m) in design.row_iter().zip(&mu) {
            let w = m * (1.0 - m);
            hess += w * row.transpose() * row;
        }
        let step = hess.cholesky().expect("positive definite").solve(&grad);
        beta += &step;
        if step.amax() < 1e-13 {
            break;
        }
    }
    beta.iter().copied().collect()
}

pub fn fixed(spec: LearnerSpec, lambda: f64) -> LearnerSpec {
    LearnerSpec {
        tol: 1e-10,
        ..spec.with_lambda(lambda)
    }
}

fn logistic_draws(rng: &mut ChaCha8Rng, x: &DMatrix<f64>, eta: impl Fn(usize) -> f64) -> Vec<f64> {
    (0..x.nrows())
        .map(|i| f64::from(rng.random::<f64>() < 1.0 / (1.0 + (-eta(i)).exp())))
        .collect()
}

/// Largest deviation from the soft-threshold solution on one standardized feature,
/// over lambdas on both sides of the kink.
pub fn soft_threshold_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<f64> = (0..60).map(|_| rng.sample(StandardNormal)).collect();
    let x = standardized(&raw);
    let y: Vec<f64> = x
        .iter()
        .map(|v| 0.7 * v + rng.sample::<f64, _>(StandardNormal))
        .collect();
    let ybar = y.iter().sum::<f64>() / 60.0;
    let rho = x.iter().zip(&y).map(|(a, b)| a * (b - ybar)).sum::<f64>() / 60.0;
    let xm = DMatrix::from_column_slice(60, 1, &x);
    let mut worst = 0.0f64;
    for lambda in [0.0, 0.1, 0.3, rho.abs() * 0.99, rho.abs() * 1.01, 2.0] {
        let model = fit_lasso_linear(&xm, &y, &fixed(LearnerSpec::lasso_linear(), lambda)).unwrap();
        worst = worst
            .max((model.coefficients[0] - soft_threshold(rho, lambda)).abs())
            .max((model.intercept - ybar).abs());
    }
    worst
}

/// Largest coefficient deviation from least squares at lambda = 0.
pub fn ols_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = normal_matrix(&mut rng, 20, 3);
    let y: Vec<f64> = (0..20)
        .map(|i| {
            1.0 + x[(i, 0)] - 2.0 * x[(i, 1)]
                + 0.5 * x[(i, 2)]
                + 0.3 * rng.sample::<f64, _>(StandardNormal)
        })
        .collect();
    let model = fit_lasso_linear(&x, &y, &fixed(LearnerSpec::lasso_linear(), 0.0)).unwrap();
    max_gap(model.intercept, &model.coefficients, &ols(&x, &y))
}

/// Largest coefficient deviation from the Newton oracle at lambda = 0.
pub fn irls_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = normal_matrix(&mut rng, 50, 2);
    let y = logistic_draws(&mut rng, &x, |i| 0.3 + 0.8 * x[(i, 0)] - 0.6 * x[(i, 1)]);
    let model = fit_lasso_logistic(&x, &y, &fixed(LearnerSpec::lasso_logistic(), 0.0)).unwrap();
    max_gap(model.intercept, &model.coefficients, &irls_oracle(&x, &y))
}

fn max_gap(intercept: f64, coefs: &[f64], oracle: &[f64]) -> f64 {
    coefs
        .iter()
        .zip(&oracle[1..])
        .fold((intercept - oracle[0]).abs(), |m, (a, b)| {
            m.max((a - b).abs())
        })
}

/// Largest KKT residual over fixed-lambda and cross-validated linear fits.
pub fn linear_kkt(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = normal_matrix(&mut rng, 200, 30);
    let y: Vec<f64> = (0..200)
        .map(|i| 2.0 * x[(i, 0)] - x[(i, 3)] + rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut specs: Vec<LearnerSpec> = [0.0, 0.01, 0.05, 0.2, 1.0]
        .iter()
        .map(|&l| LearnerSpec::lasso_linear().with_lambda(l))
        .collect();
    specs.push(LearnerSpec::lasso_linear());
    specs
        .iter()
        .map(|s| kkt_residual(&fit_lasso_linear(&x, &y, s).unwrap(), &x, &y).unwrap())
        .fold(0.0, f64::max)
}

/// Largest KKT residual over fixed-lambda and cross-validated logistic fits.
pub fn logistic_kkt(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = normal_matrix(&mut rng, 300, 20);
    let y = logistic_draws(&mut rng, &x, |i| x[(i, 0)] - 0.5 * x[(i, 1)]);
    let mut specs: Vec<LearnerSpec> = [0.005, 0.02, 0.1]
        .iter()
        .map(|&l| LearnerSpec::lasso_logistic().with_lambda(l))
        .collect();
    specs.push(LearnerSpec::lasso_logistic());
    specs
        .iter()
        .map(|s| kkt_residual(&fit_lasso_logistic(&x, &y, s).unwrap(), &x, &y).unwrap())
        .fold(0.0, f64::max)
}
