//! L1-penalized nuisance learners with a common fit/predict contract.
//!
//! Both families standardize features internally (mean 0, population sd 1)
//! and penalize the standardized coefficients, so fits are equivariant to
//! rescaling a feature column. Returned coefficients are on the original
//! feature scale; the intercept is never penalized.
//!
//! * `lasso-linear` minimizes `1/(2n) ||y - b0 - X b||^2 + lambda ||b||_1` by
//!   cyclic coordinate descent on the standardized Gram matrix.
//! * `lasso-logistic` minimizes the mean negative log-likelihood plus
//!   `lambda ||b||_1` by iteratively reweighted least squares, each weighted
//!   quadratic solved by active-set coordinate descent, with step halving so
//!   the penalized objective never increases between outer iterations.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probability predictions are clipped to `[CLIP_EPS, 1 - CLIP_EPS]`.
pub const CLIP_EPS: f64 = 1e-6;
pub const DEFAULT_PATH_LEN: usize = 50;
pub const DEFAULT_PATH_RATIO: f64 = 1e-3;
pub const DEFAULT_CV_FOLDS: usize = 5;
pub const DEFAULT_TOL: f64 = 1e-7;
pub const DEFAULT_MAX_ITER: usize = 1000;
/// Tolerance floor for the inner cross-validation paths, which only rank lambdas.
pub const CV_PATH_TOL: f64 = 1e-4;

const MIN_WEIGHT: f64 = 1e-5;
/// Active-set passes before the weighted solver switches to covariance updates.
const NAIVE_PASSES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    LassoLinear,
    LassoLogistic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Regularization {
    Fixed {
        lambda: f64,
    },
    /// K-fold selection over `grid`, or over the default path when `grid` is absent.
    CrossValidated {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        grid: Option<Vec<f64>>,
        folds: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerSpec {
    pub family: Family,
    pub regularization: Regularization,
    /// Cap on coordinate-descent cycles (linear) or IRLS steps (logistic) per lambda.
    pub max_iter: usize,
    pub tol: f64,
    /// Seeds the inner cross-validation split.
    #[serde(default)]
    pub seed: u64,
}

impl LearnerSpec {
    fn cross_validated(family: Family) -> Self {
        LearnerSpec {
            family,
            regularization: Regularization::CrossValidated {
                grid: None,
                folds: DEFAULT_CV_FOLDS,
            },
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
            seed: 0,
        }
    }

    pub fn lasso_linear() -> Self {
        Self::cross_validated(Family::LassoLinear)
    }

    pub fn lasso_logistic() -> Self {
        Self::cross_validated(Family::LassoLogistic)
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.regularization = Regularization::Fixed { lambda };
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.tol.is_nan() || self.tol <= 0.0 || self.max_iter == 0 {
            return Err(Error::InvalidInput(
                "tolerance and max_iter must be positive".into(),
            ));
        }
        match &self.regularization {
            Regularization::Fixed { lambda } if !lambda.is_finite() || *lambda < 0.0 => Err(
                Error::InvalidInput(format!("lambda must be finite and >= 0, got {lambda}")),
            ),
            Regularization::CrossValidated { folds, .. } if *folds < 2 => Err(Error::InvalidInput(
                format!("inner cross-validation needs at least 2 folds, got {folds}"),
            )),
            Regularization::CrossValidated { grid: Some(g), .. } => validate_grid(g),
            _ => Ok(()),
        }
    }
}

fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::InvalidInput("lambda grid is empty".into()));
    }
    if grid.iter().any(|l| !l.is_finite() || *l <= 0.0) {
        return Err(Error::InvalidInput(
            "lambda grid must be strictly positive".into(),
        ));
    }
    if grid.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidInput(
            "lambda grid must be sorted strictly descending".into(),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    /// Penalized objective after each cycle (linear) or IRLS step (logistic) of the final fit.
    pub objective_trace: Vec<f64>,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub family: Family,
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    pub lambda: f64,
    pub feature_means: Vec<f64>,
    pub feature_sds: Vec<f64>,
    /// Predictions on the training rows.
    pub fitted: Vec<f64>,
    pub diagnostics: FitDiagnostics,
}

impl FittedModel {
    pub fn n_features(&self) -> usize {
        self.coefficients.len()
    }

    /// Coefficients of the internally standardized problem.
    pub fn standardized_coefficients(&self) -> Vec<f64> {
        self.coefficients
            .iter()
            .zip(&self.feature_sds)
            .map(|(b, s)| b * s)
            .collect()
    }

    /// `intercept + X b` on the original feature scale.
    pub fn linear_index(&self, features: &DMatrix<f64>) -> Vec<f64> {
        let mut eta = vec![self.intercept; features.nrows()];
        for (j, &b) in self.coefficients.iter().enumerate() {
            if b == 0.0 {
                continue;
            }
            for (e, x) in eta.iter_mut().zip(features.column(j).iter()) {
                *e += b * x;
            }
        }
        eta
    }

    /// Linear family: `intercept + X b`. Logistic family: clipped sigmoid of the same index.
    pub fn predict(&self, features: &DMatrix<f64>) -> Result<Vec<f64>> {
        if features.ncols() != self.n_features() {
            return Err(Error::Dimension(format!(
                "model was trained on {} features, got {}",
                self.n_features(),
                features.ncols()
            )));
        }
        Ok(self
            .linear_index(features)
            .into_iter()
            .map(|e| self.response(e))
            .collect())
    }

    /// Prediction at linear index `eta`.
    pub fn response(&self, eta: f64) -> f64 {
        match self.family {
            Family::LassoLinear => eta,
            Family::LassoLogistic => clip_prob(sigmoid(eta)),
        }
    }
}

pub fn predict(model: &FittedModel, features: &DMatrix<f64>) -> Result<Vec<f64>> {
    model.predict(features)
}

pub fn clip_prob(p: f64) -> f64 {
    p.clamp(CLIP_EPS, 1.0 - CLIP_EPS)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Dot product with eight independent accumulators so the loop vectorizes; the
/// summation order is fixed, so results are deterministic.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    acc.iter().sum::<f64>() + tail
}

/// `sum_i a_i b_i c_i`, vectorized like [`dot`].
fn dot3(a: &[f64], b: &[f64], c: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let cc = c.chunks_exact(8);
    let (ra, rb, rc) = (ca.remainder(), cb.remainder(), cc.remainder());
    for ((x, y), z) in ca.zip(cb).zip(cc) {
        for l in 0..8 {
            acc[l] += x[l] * y[l] * z[l];
        }
    }
    let mut tail = 0.0;
    for ((x, y), z) in ra.iter().zip(rb).zip(rc) {
        tail += x * y * z;
    }
    acc.iter().sum::<f64>() + tail
}

fn sum(a: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let ca = a.chunks_exact(8);
    let ra = ca.remainder();
    for x in ca {
        for l in 0..8 {
            acc[l] += x[l];
        }
    }
    acc.iter().sum::<f64>() + ra.iter().sum::<f64>()
}

fn soft_threshold(z: f64, lambda: f64) -> f64 {
    if z > lambda {
        z - lambda
    } else if z < -lambda {
        z + lambda
    } else {
        0.0
    }
}

fn check_inputs(features: &DMatrix<f64>, targets: &[f64]) -> Result<()> {
    if features.nrows() == 0 {
        return Err(Error::InvalidInput("no training rows".into()));
    }
    if features.nrows() != targets.len() {
        return Err(Error::Dimension(format!(
            "{} feature rows but {} targets",
            features.nrows(),
            targets.len()
        )));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("features"));
    }
    if targets.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("targets"));
    }
    Ok(())
}

/// Default CV path, or `None` when `lambda_max` is zero and every lambda gives the null model.
fn default_path(lambda_max: f64) -> Option<Vec<f64>> {
    (lambda_max > 0.0).then(|| default_grid(lambda_max, DEFAULT_PATH_LEN, DEFAULT_PATH_RATIO))
}

/// Geometric grid of `len` values from `lambda_max` down to `ratio * lambda_max`.
pub fn default_grid(lambda_max: f64, len: usize, ratio: f64) -> Vec<f64> {
    if len == 1 {
        return vec![lambda_max];
    }
    let step = ratio.ln() / (len - 1) as f64;
    (0..len)
        .map(|i| lambda_max * (step * i as f64).exp())
        .collect()
}

fn inner_folds(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold[i] = pos % k;
    }
    fold
}

/// Standardized-coefficient solution at one lambda, in centered coordinates.
#[derive(Debug, Clone)]
struct PathPoint {
    intercept: f64,
    beta: Vec<f64>,
}

// ---------------------------------------------------------------------------
// linear family

/// Additive sufficient statistics of a (pre-centered) row subset.
#[derive(Debug, Clone)]
struct LinearStats {
    n: f64,
    sx: Vec<f64>,
    sxx: Vec<f64>,
    sy: f64,
    sxy: Vec<f64>,
    syy: f64,
}

impl LinearStats {
    fn zeros(p: usize) -> Self {
        LinearStats {
            n: 0.0,
            sx: vec![0.0; p],
            sxx: vec![0.0; p * p],
            sy: 0.0,
            sxy: vec![0.0; p],
            syy: 0.0,
        }
    }

    fn add_row(&mut self, x: &[f64], y: f64) {
        let p = x.len();
        self.n += 1.0;
        self.sy += y;
        self.syy += y * y;
        for j in 0..p {
            let xj = x[j];
            self.sx[j] += xj;
            self.sxy[j] += xj * y;
            let row = &mut self.sxx[j * p..j * p + j + 1];
            for (s, xk) in row.iter_mut().zip(&x[..=j]) {
                *s += xj * xk;
            }
        }
    }

    fn symmetrize(&mut self, p: usize) {
        for j in 0..p {
            for k in 0..j {
                self.sxx[k * p + j] = self.sxx[j * p + k];
            }
        }
    }

    fn minus(&self, other: &LinearStats) -> LinearStats {
        let sub = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x - y).collect();
        LinearStats {
            n: self.n - other.n,
            sx: sub(&self.sx, &other.sx),
            sxx: sub(&self.sxx, &other.sxx),
            sy: self.sy - other.sy,
            sxy: sub(&self.sxy, &other.sxy),
            syy: self.syy - other.syy,
        }
    }
}

/// Standardized least-squares problem `1/2 (yvar - 2 c'b + b'G b) + lambda |b|_1`.
struct GramProblem {
    p: usize,
    gram: Vec<f64>,
    c: Vec<f64>,
    yvar: f64,
    means: Vec<f64>,
    sds: Vec<f64>,
    ymean: f64,
    usable: Vec<bool>,
}

impl GramProblem {
    fn from_stats(s: &LinearStats) -> Self {
        let p = s.sx.len();
        let n = s.n;
        let means: Vec<f64> = s.sx.iter().map(|v| v / n).collect();
        let ymean = s.sy / n;
        let mut sds = vec![0.0; p];
        let mut usable = vec![false; p];
        for j in 0..p {
            let var = s.sxx[j * p + j] / n - means[j] * means[j];
            let scale = s.sxx[j * p + j] / n;
            if var > 1e-13 * scale.max(f64::MIN_POSITIVE) && var > 0.0 {
                sds[j] = var.sqrt();
                usable[j] = true;
            }
        }
        let mut gram = vec![0.0; p * p];
        let mut c = vec![0.0; p];
        for j in 0..p {
            if !usable[j] {
                continue;
            }
            c[j] = (s.sxy[j] / n - means[j] * ymean) / sds[j];
            for k in 0..p {
                if usable[k] {
                    gram[j * p + k] =
                        (s.sxx[j * p + k] / n - means[j] * means[k]) / (sds[j] * sds[k]);
                }
            }
        }
        let yvar = (s.syy / n - ymean * ymean).max(0.0);
        GramProblem {
            p,
            gram,
            c,
            yvar,
            means,
            sds,
            ymean,
            usable,
        }
    }

    fn lambda_max(&self) -> f64 {
        self.c.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    fn objective(&self, beta: &[f64], gb: &[f64], lambda: f64) -> f64 {
        let cb: f64 = self.c.iter().zip(beta).map(|(a, b)| a * b).sum();
        let bgb: f64 = beta.iter().zip(gb).map(|(a, b)| a * b).sum();
        let l1: f64 = beta.iter().map(|b| b.abs()).sum();
        0.5 * (self.yvar - 2.0 * cb + bgb) + lambda * l1
    }

    fn kkt_violation(&self, beta: &[f64], gb: &[f64], lambda: f64) -> f64 {
        let mut worst = 0.0_f64;
        for j in 0..self.p {
            if !self.usable[j] {
                continue;
            }
            let grad = gb[j] - self.c[j];
            let v = if beta[j] != 0.0 {
                (grad + lambda * beta[j].signum()).abs()
            } else {
                (grad.abs() - lambda).max(0.0)
            };
            worst = worst.max(v);
        }
        worst
    }

    /// Cyclic coordinate descent from `beta`; returns (objective trace, converged).
    fn solve(
        &self,
        lambda: f64,
        beta: &mut [f64],
        gb: &mut [f64],
        tol: f64,
        max_iter: usize,
        trace: bool,
    ) -> (Vec<f64>, bool) {
        let p = self.p;
        let mut objectives = Vec::new();
        if trace {
            objectives.push(self.objective(beta, gb, lambda));
        }
        for _ in 0..max_iter {
            let mut max_delta = 0.0_f64;
            for j in 0..p {
                if !self.usable[j] {
                    continue;
                }
                let gjj = self.gram[j * p + j];
                let z = self.c[j] - gb[j] + gjj * beta[j];
                let new = soft_threshold(z, lambda) / gjj;
                let delta = new - beta[j];
                if delta != 0.0 {
                    beta[j] = new;
                    let col = &self.gram[j * p..(j + 1) * p];
                    for (g, gk) in gb.iter_mut().zip(col) {
                        *g += gk * delta;
                    }
                    max_delta = max_delta.max(delta.abs() * gjj.sqrt());
                }
            }
            if trace {
                objectives.push(self.objective(beta, gb, lambda));
            }
            if max_delta < tol && self.kkt_violation(beta, gb, lambda) < tol {
                return (objectives, true);
            }
        }
        (objectives, false)
    }

    fn path(&self, lambdas: &[f64], tol: f64, max_iter: usize) -> Vec<Vec<f64>> {
        let mut beta = vec![0.0; self.p];
        let mut gb = vec![0.0; self.p];
        lambdas
            .iter()
            .map(|&l| {
                self.solve(l, &mut beta, &mut gb, tol, max_iter, false);
                beta.clone()
            })
            .collect()
    }

    /// Original-scale (intercept, coefficients) for data centered at `shift`/`yshift`.
    fn to_original(&self, beta: &[f64], shift: &[f64], yshift: f64) -> (f64, Vec<f64>) {
        let coef: Vec<f64> = beta
            .iter()
            .zip(&self.sds)
            .zip(&self.usable)
            .map(|((b, s), &u)| if u { b / s } else { 0.0 })
            .collect();
        let mut intercept = self.ymean + yshift;
        for j in 0..self.p {
            intercept -= coef[j] * (self.means[j] + shift[j]);
        }
        (intercept, coef)
    }
}

struct LinearData {
    p: usize,
    rows: Vec<f64>,
    y: Vec<f64>,
    shift: Vec<f64>,
    yshift: f64,
}

impl LinearData {
    fn new(features: &DMatrix<f64>, targets: &[f64]) -> Self {
        let (n, p) = features.shape();
        let shift: Vec<f64> = features.column_iter().map(|c| c.sum() / n as f64).collect();
        let yshift = targets.iter().sum::<f64>() / n as f64;
        let mut rows = Vec::with_capacity(n * p);
        for i in 0..n {
            for j in 0..p {
                rows.push(features[(i, j)] - shift[j]);
            }
        }
        let y = targets.iter().map(|v| v - yshift).collect();
        LinearData {
            p,
            rows,
            y,
            shift,
            yshift,
        }
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.p..(i + 1) * self.p]
    }

    fn stats<I: Iterator<Item = usize>>(&self, rows: I) -> LinearStats {
        let mut s = LinearStats::zeros(self.p);
        for i in rows {
            s.add_row(self.row(i), self.y[i]);
        }
        s.symmetrize(self.p);
        s
    }
}

fn finish_model(
    family: Family,
    lambda: f64,
    intercept: f64,
    coefficients: Vec<f64>,
    features: &DMatrix<f64>,
    diagnostics: FitDiagnostics,
) -> FittedModel {
    let (n, _) = features.shape();
    let feature_means = features.column_iter().map(|c| c.sum() / n as f64).collect();
    let feature_sds = features
        .column_iter()
        .map(|c| {
            let m = c.sum() / n as f64;
            (c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64).sqrt()
        })
        .collect();
    let mut model = FittedModel {
        family,
        intercept,
        coefficients,
        lambda,
        feature_means,
        feature_sds,
        fitted: Vec::new(),
        diagnostics,
    };
    model.fitted = model.predict(features).expect("training design matches");
    model
}

pub fn fit_lasso_linear(
    features: &DMatrix<f64>,
    targets: &[f64],
    spec: &LearnerSpec,
) -> Result<FittedModel> {
    check_inputs(features, targets)?;
    spec.validate()?;
    if features.nrows() < 2 {
        return Err(Error::InvalidInput(
            "lasso-linear needs at least 2 rows".into(),
        ));
    }
    let data = LinearData::new(features, targets);
    let n = features.nrows();
    let problem = GramProblem::from_stats(&data.stats(0..n));

    let lambda = match &spec.regularization {
        Regularization::Fixed { lambda } => *lambda,
        Regularization::CrossValidated { grid, folds } => {
            match grid.clone().or_else(|| default_path(problem.lambda_max())) {
                Some(grid) => cv_linear(&data, &problem, &grid, *folds, spec)?,
                None => 0.0,
            }
        }
    };

    // warm-start down the default path to the target lambda
    let mut beta = vec![0.0; problem.p];
    let mut gb = vec![0.0; problem.p];
    let lmax = problem.lambda_max();
    if lambda > 0.0 && lmax > lambda {
        for l in default_grid(lmax, DEFAULT_PATH_LEN, DEFAULT_PATH_RATIO) {
            if l <= lambda {
                break;
            }
            problem.solve(l, &mut beta, &mut gb, spec.tol, spec.max_iter, false);
        }
    }
    let (trace, converged) =
        problem.solve(lambda, &mut beta, &mut gb, spec.tol, spec.max_iter, true);
    let (intercept, coef) = problem.to_original(&beta, &data.shift, data.yshift);
    Ok(finish_model(
        Family::LassoLinear,
        lambda,
        intercept,
        coef,
        features,
        FitDiagnostics {
            objective_trace: trace,
            converged,
        },
    ))
}

fn cv_linear(
    data: &LinearData,
    full: &GramProblem,
    grid: &[f64],
    folds: usize,
    spec: &LearnerSpec,
) -> Result<f64> {
    validate_grid(grid)?;
    if full.lambda_max() == 0.0 || grid.len() == 1 {
        return Ok(grid[0]);
    }
    let n = data.y.len();
    let folds = folds.min(n);
    let assignment = inner_folds(n, folds, spec.seed);
    let total = data.stats(0..n);
    let mut loss = vec![0.0; grid.len()];
    for f in 0..folds {
        let held: Vec<usize> = (0..n).filter(|&i| assignment[i] == f).collect();
        let held_stats = data.stats(held.iter().copied());
        let problem = GramProblem::from_stats(&total.minus(&held_stats));
        let path = problem.path(grid, spec.tol.max(CV_PATH_TOL), spec.max_iter);
        for (l, beta) in path.iter().enumerate() {
            let (b0, coef) = problem.to_original(beta, &vec![0.0; data.p], 0.0);
            for &i in &held {
                let x = data.row(i);
                let pred: f64 = b0 + coef.iter().zip(x).map(|(b, v)| b * v).sum::<f64>();
                let r = data.y[i] - pred;
                loss[l] += r * r;
            }
        }
    }
    Ok(argmin_prefer_larger(grid, &loss))
}

fn cv_path_spec(spec: &LearnerSpec) -> LearnerSpec {
    LearnerSpec {
        tol: spec.tol.max(CV_PATH_TOL),
        ..spec.clone()
    }
}

/// Grid is descending; the first strict minimum is the largest minimizing lambda.
fn argmin_prefer_larger(grid: &[f64], loss: &[f64]) -> f64 {
    let mut best = 0;
    for l in 1..grid.len() {
        if loss[l] < loss[best] {
            best = l;
        }
    }
    grid[best]
}

// ---------------------------------------------------------------------------
// logistic family

/// Column-major standardized design.
struct StdDesign {
    n: usize,
    p: usize,
    cols: Vec<f64>,
    means: Vec<f64>,
    sds: Vec<f64>,
    usable: Vec<bool>,
}

impl StdDesign {
    fn new(features: &DMatrix<f64>, rows: Option<&[usize]>) -> Self {
        let p = features.ncols();
        let idx: Vec<usize> = match rows {
            Some(r) => r.to_vec(),
            None => (0..features.nrows()).collect(),
        };
        let n = idx.len();
        let mut cols = vec![0.0; n * p];
        let mut means = vec![0.0; p];
        let mut sds = vec![0.0; p];
        let mut usable = vec![false; p];
        for j in 0..p {
            let src = features.column(j);
            let col = &mut cols[j * n..(j + 1) * n];
            for (c, &i) in col.iter_mut().zip(&idx) {
                *c = src[i];
            }
            let m = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
            means[j] = m;
            let first = col[0];
            if var > 0.0 && col.iter().any(|&v| v != first) {
                let sd = var.sqrt();
                sds[j] = sd;
                usable[j] = true;
                col.iter_mut().for_each(|v| *v = (*v - m) / sd);
            } else {
                col.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        StdDesign {
            n,
            p,
            cols,
            means,
            sds,
            usable,
        }
    }

    fn col(&self, j: usize) -> &[f64] {
        &self.cols[j * self.n..(j + 1) * self.n]
    }

    fn lambda_max(&self, y: &[f64]) -> f64 {
        let ybar = y.iter().sum::<f64>() / self.n as f64;
        (0..self.p)
            .filter(|&j| self.usable[j])
            .map(|j| {
                let g: f64 = self.col(j).iter().zip(y).map(|(x, v)| x * (v - ybar)).sum();
                (g / self.n as f64).abs()
            })
            .fold(0.0, f64::max)
    }

    fn to_original(&self, pt: &PathPoint) -> (f64, Vec<f64>) {
        let coef: Vec<f64> = (0..self.p)
            .map(|j| {
                if self.usable[j] {
                    pt.beta[j] / self.sds[j]
                } else {
                    0.0
                }
            })
            .collect();
        let intercept = pt.intercept
            - coef
                .iter()
                .zip(&self.means)
                .map(|(b, m)| b * m)
                .sum::<f64>();
        (intercept, coef)
    }
}

struct LogisticState {
    intercept: f64,
    beta: Vec<f64>,
    eta: Vec<f64>,
}

fn logistic_loss(eta: &[f64], y: &[f64]) -> f64 {
    eta.iter()
        .zip(y)
        .map(|(e, v)| softplus(*e) - v * e)
        .sum::<f64>()
        / eta.len() as f64
}

fn penalized_logistic(eta: &[f64], y: &[f64], beta: &[f64], lambda: f64) -> f64 {
    logistic_loss(eta, y) + lambda * beta.iter().map(|b| b.abs()).sum::<f64>()
}

/// Gradient of the mean negative log-likelihood for every usable coordinate.
fn logistic_gradient(design: &StdDesign, state: &LogisticState, y: &[f64]) -> Vec<f64> {
    let n = design.n as f64;
    let resid: Vec<f64> = state
        .eta
        .iter()
        .zip(y)
        .map(|(e, v)| v - sigmoid(*e))
        .collect();
    (0..design.p)
        .map(|j| {
            if design.usable[j] {
                -dot(design.col(j), &resid) / n
            } else {
                0.0
            }
        })
        .collect()
}

/// One weighted-lasso coordinate pass over `coords` (plus the intercept).
#[allow(clippy::too_many_arguments)]
fn weighted_pass(
    design: &StdDesign,
    coords: &[usize],
    w: &[f64],
    xw: &[f64],
    sw: f64,
    resid: &mut [f64],
    intercept: &mut f64,
    beta: &mut [f64],
    lambda: f64,
) -> f64 {
    let n = design.n as f64;
    let mut max_delta = 0.0_f64;
    let d0 = dot(w, resid) / sw;
    if d0 != 0.0 {
        *intercept += d0;
        resid.iter_mut().for_each(|r| *r -= d0);
        max_delta = max_delta.max(d0.abs());
    }
    for &j in coords {
        let x = design.col(j);
        let g = dot3(x, w, resid) / n;
        let z = g + xw[j] * beta[j];
        let new = soft_threshold(z, lambda) / xw[j];
        let delta = new - beta[j];
        if delta != 0.0 {
            beta[j] = new;
            for (r, xi) in resid.iter_mut().zip(x) {
                *r -= delta * xi;
            }
            max_delta = max_delta.max(delta.abs());
        }
    }
    max_delta
}

/// Weighted-lasso coordinate descent on `active` (plus the intercept) using the weighted
/// Gram matrix; `resid` is brought up to date on return.
#[allow(clippy::too_many_arguments)]
fn active_gram_solve(
    design: &StdDesign,
    active: &[usize],
    w: &[f64],
    sw: f64,
    resid: &mut [f64],
    intercept: &mut f64,
    beta: &mut [f64],
    lambda: f64,
    tol: f64,
    max_iter: usize,
) {
    let n = design.n as f64;
    let m = active.len() + 1;
    // slot 0 is the intercept
    let mut gram = vec![0.0; m * m];
    gram[0] = sw / n;
    for (a, &j) in active.iter().enumerate() {
        let xj = design.col(j);
        let v = dot(w, xj) / n;
        gram[a + 1] = v;
        gram[(a + 1) * m] = v;
        for (b, &k) in active.iter().enumerate().skip(a) {
            let v = dot3(xj, design.col(k), w) / n;
            gram[(a + 1) * m + b + 1] = v;
            gram[(b + 1) * m + a + 1] = v;
        }
    }
    let mut grad = Vec::with_capacity(m);
    grad.push(dot(w, resid) / n);
    grad.extend(active.iter().map(|&j| dot3(design.col(j), w, resid) / n));

    let b0_start = *intercept;
    let start: Vec<f64> = active.iter().map(|&j| beta[j]).collect();
    let mut coef = start.clone();
    for _ in 0..max_iter {
        let mut max_delta = 0.0_f64;
        let d0 = grad[0] / gram[0];
        if d0 != 0.0 {
            *intercept += d0;
            for (g, gk) in grad.iter_mut().zip(&gram[..m]) {
                *g -= gk * d0;
            }
            max_delta = d0.abs();
        }
        for a in 1..m {
            let gaa = gram[a * m + a];
            let new = soft_threshold(grad[a] + gaa * coef[a - 1], lambda) / gaa;
            let delta = new - coef[a - 1];
            if delta != 0.0 {
                coef[a - 1] = new;
                for (g, gk) in grad.iter_mut().zip(&gram[a * m..(a + 1) * m]) {
                    *g -= gk * delta;
                }
                max_delta = max_delta.max(delta.abs());
            }
        }
        if max_delta < tol {
            break;
        }
    }

    let d0 = *intercept - b0_start;
    resid.iter_mut().for_each(|r| *r -= d0);
    for (a, &j) in active.iter().enumerate() {
        let delta = coef[a] - start[a];
        if delta != 0.0 {
            beta[j] = coef[a];
            for (r, xi) in resid.iter_mut().zip(design.col(j)) {
                *r -= delta * xi;
            }
        }
    }
}

/// IRLS restricted to `coords`, continuing `trace`. Returns whether it converged.
#[allow(clippy::too_many_arguments)]
fn irls(
    design: &StdDesign,
    y: &[f64],
    lambda: f64,
    state: &mut LogisticState,
    coords: &[usize],
    tol: f64,
    max_iter: usize,
    trace: &mut Vec<f64>,
) -> bool {
    let n = design.n;
    let mut objective = *trace
        .last()
        .expect("trace starts with the initial objective");
    let mut w = vec![0.0; n];
    let mut work = vec![0.0; n];
    let mut resid = vec![0.0; n];
    let mut xw = vec![0.0; design.p];
    let mut eta = vec![0.0; n];
    let mut cand_beta = vec![0.0; design.p];

    for _ in 0..max_iter {
        for i in 0..n {
            let p = sigmoid(state.eta[i]);
            w[i] = (p * (1.0 - p)).max(MIN_WEIGHT);
            work[i] = (y[i] - p) / w[i];
        }
        resid.copy_from_slice(&work);
        let sw = sum(&w);
        for &j in coords {
            let x = design.col(j);
            xw[j] = dot3(x, x, &w) / n as f64;
        }
        let mut b0 = state.intercept;
        let mut beta = state.beta.clone();
        // weighted quadratic: full passes find the active set, then iterate on it
        for _ in 0..max_iter {
            let full = weighted_pass(
                design, coords, &w, &xw, sw, &mut resid, &mut b0, &mut beta, lambda,
            );
            if full < tol {
                break;
            }
            let active: Vec<usize> = coords.iter().copied().filter(|&j| beta[j] != 0.0).collect();
            let mut done = false;
            for _ in 0..NAIVE_PASSES {
                if weighted_pass(
                    design, &active, &w, &xw, sw, &mut resid, &mut b0, &mut beta, lambda,
                ) < tol
                {
                    done = true;
                    break;
                }
            }
            if !done {
                // slow coordinate descent: switch to covariance updates on the active set
                active_gram_solve(
                    design, &active, &w, sw, &mut resid, &mut b0, &mut beta, lambda, tol, max_iter,
                );
            }
        }

        // the quadratic's solution moves the index by (working response - remaining residual)
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            for i in 0..n {
                eta[i] = state.eta[i] + step * (work[i] - resid[i]);
            }
            for j in 0..design.p {
                cand_beta[j] = state.beta[j] + step * (beta[j] - state.beta[j]);
            }
            let obj = penalized_logistic(&eta, y, &cand_beta, lambda);
            if obj <= objective {
                accepted = Some((state.intercept + step * (b0 - state.intercept), obj));
                break;
            }
            step *= 0.5;
        }
        let Some((new_b0, obj)) = accepted else {
            // no descent left at machine precision
            return true;
        };
        let mut max_delta = (new_b0 - state.intercept).abs();
        for (a, b) in state.beta.iter().zip(&cand_beta) {
            max_delta = max_delta.max((a - b).abs());
        }
        std::mem::swap(&mut state.eta, &mut eta);
        state.beta.copy_from_slice(&cand_beta);
        state.intercept = new_b0;
        objective = obj;
        trace.push(obj);
        if max_delta < tol {
            return true;
        }
    }
    false
}

/// Solves at one lambda from `state`. With `screen = (gradient, previous lambda)` the
/// sequential strong rule restricts the working set; screened-out coordinates are
/// re-admitted whenever they violate the optimality conditions.
/// Returns (objective trace, converged, gradient at the solution).
fn logistic_solve(
    design: &StdDesign,
    y: &[f64],
    lambda: f64,
    state: &mut LogisticState,
    tol: f64,
    max_iter: usize,
    screen: Option<(&[f64], f64)>,
) -> (Vec<f64>, bool, Vec<f64>) {
    let mut working: Vec<bool> = (0..design.p)
        .map(|j| {
            design.usable[j]
                && match screen {
                    Some((grad, prev)) => {
                        state.beta[j] != 0.0 || grad[j].abs() >= 2.0 * lambda - prev
                    }
                    None => true,
                }
        })
        .collect();
    let mut trace = vec![penalized_logistic(&state.eta, y, &state.beta, lambda)];
    loop {
        let coords: Vec<usize> = (0..design.p).filter(|&j| working[j]).collect();
        let converged = irls(design, y, lambda, state, &coords, tol, max_iter, &mut trace);
        let grad = logistic_gradient(design, state, y);
        let mut added = false;
        for j in 0..design.p {
            if design.usable[j] && !working[j] && grad[j].abs() > lambda {
                working[j] = true;
                added = true;
            }
        }
        if !added {
            return (trace, converged, grad);
        }
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn initial_state(design: &StdDesign, y: &[f64]) -> LogisticState {
    let ybar = y.iter().sum::<f64>() / y.len() as f64;
    let b0 = logit(clip_prob(ybar));
    LogisticState {
        intercept: b0,
        beta: vec![0.0; design.p],
        eta: vec![b0; design.n],
    }
}

fn logistic_path(
    design: &StdDesign,
    y: &[f64],
    lambdas: &[f64],
    spec: &LearnerSpec,
) -> Vec<PathPoint> {
    let mut state = initial_state(design, y);
    let mut grad = logistic_gradient(design, &state, y);
    let mut prev = design.lambda_max(y);
    lambdas
        .iter()
        .map(|&l| {
            let (_, _, g) = logistic_solve(
                design,
                y,
                l,
                &mut state,
                spec.tol,
                spec.max_iter,
                Some((&grad, prev)),
            );
            grad = g;
            prev = l;
            PathPoint {
                intercept: state.intercept,
                beta: state.beta.clone(),
            }
        })
        .collect()
}

fn check_labels(labels: &[f64]) -> Result<()> {
    if labels.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidInput("logistic labels must be 0 or 1".into()));
    }
    Ok(())
}

pub fn fit_lasso_logistic(
    features: &DMatrix<f64>,
    labels: &[f64],
    spec: &LearnerSpec,
) -> Result<FittedModel> {
    check_inputs(features, labels)?;
    check_labels(labels)?;
    spec.validate()?;
    let design = StdDesign::new(features, None);
    let p = features.ncols();

    let ybar = labels.iter().sum::<f64>() / labels.len() as f64;
    if ybar == 0.0 || ybar == 1.0 {
        let lambda = match spec.regularization {
            Regularization::Fixed { lambda } => lambda,
            _ => 0.0,
        };
        return Ok(finish_model(
            Family::LassoLogistic,
            lambda,
            logit(clip_prob(ybar)),
            vec![0.0; p],
            features,
            FitDiagnostics {
                objective_trace: Vec::new(),
                converged: true,
            },
        ));
    }

    let lmax = design.lambda_max(labels);
    let lambda = match &spec.regularization {
        Regularization::Fixed { lambda } => *lambda,
        Regularization::CrossValidated { grid, folds } => {
            match grid.clone().or_else(|| default_path(lmax)) {
                Some(grid) => cv_logistic(features, labels, &grid, *folds, spec)?,
                None => 0.0,
            }
        }
    };

    let mut state = initial_state(&design, labels);
    let mut grad = logistic_gradient(&design, &state, labels);
    let mut prev = lmax;
    if lambda > 0.0 && lmax > lambda {
        for l in default_grid(lmax, DEFAULT_PATH_LEN, DEFAULT_PATH_RATIO) {
            if l <= lambda {
                break;
            }
            let (_, _, g) = logistic_solve(
                &design,
                labels,
                l,
                &mut state,
                spec.tol,
                spec.max_iter,
                Some((&grad, prev)),
            );
            grad = g;
            prev = l;
        }
    }
    let screen = (lambda > 0.0).then_some((grad.as_slice(), prev));
    let (trace, converged, _) = logistic_solve(
        &design,
        labels,
        lambda,
        &mut state,
        spec.tol,
        spec.max_iter,
        screen,
    );
    let (intercept, coef) = design.to_original(&PathPoint {
        intercept: state.intercept,
        beta: state.beta,
    });
    Ok(finish_model(
        Family::LassoLogistic,
        lambda,
        intercept,
        coef,
        features,
        FitDiagnostics {
            objective_trace: trace,
            converged,
        },
    ))
}

fn log_loss(p: f64, y: f64) -> f64 {
    let p = clip_prob(p);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

fn cv_logistic(
    features: &DMatrix<f64>,
    labels: &[f64],
    grid: &[f64],
    folds: usize,
    spec: &LearnerSpec,
) -> Result<f64> {
    validate_grid(grid)?;
    if grid.len() == 1 {
        return Ok(grid[0]);
    }
    let n = labels.len();
    let folds = folds.min(n);
    if folds < 2 {
        return Ok(grid[0]);
    }
    let assignment = inner_folds(n, folds, spec.seed);
    let mut loss = vec![0.0; grid.len()];
    for f in 0..folds {
        let train: Vec<usize> = (0..n).filter(|&i| assignment[i] != f).collect();
        let held: Vec<usize> = (0..n).filter(|&i| assignment[i] == f).collect();
        let y_train: Vec<f64> = train.iter().map(|&i| labels[i]).collect();
        let ybar = y_train.iter().sum::<f64>() / y_train.len() as f64;
        let design = StdDesign::new(features, Some(&train));
        let path: Vec<(f64, Vec<f64>)> = if ybar == 0.0 || ybar == 1.0 {
            vec![(logit(clip_prob(ybar)), vec![0.0; design.p]); grid.len()]
        } else {
            logistic_path(&design, &y_train, grid, &cv_path_spec(spec))
                .iter()
                .map(|pt| design.to_original(pt))
                .collect()
        };
        for (l, (b0, coef)) in path.iter().enumerate() {
            for &i in &held {
                let mut eta = *b0;
                for (j, b) in coef.iter().enumerate() {
                    if *b != 0.0 {
                        eta += b * features[(i, j)];
                    }
                }
                loss[l] += log_loss(sigmoid(eta), labels[i]);
            }
        }
    }
    Ok(argmin_prefer_larger(grid, &loss))
}

/// Lambda minimizing held-out loss over the inner folds (squared error or log loss).
pub fn select_lambda_cv(
    features: &DMatrix<f64>,
    targets: &[f64],
    spec: &LearnerSpec,
) -> Result<f64> {
    check_inputs(features, targets)?;
    let (grid, folds) = match &spec.regularization {
        Regularization::CrossValidated { grid, folds } => (grid.clone(), *folds),
        Regularization::Fixed { .. } => {
            return Err(Error::InvalidInput(
                "spec carries no cross-validation grid".into(),
            ))
        }
    };
    spec.validate()?;
    match spec.family {
        Family::LassoLinear => {
            let data = LinearData::new(features, targets);
            let problem = GramProblem::from_stats(&data.stats(0..targets.len()));
            match grid.or_else(|| default_path(problem.lambda_max())) {
                Some(grid) => cv_linear(&data, &problem, &grid, folds, spec),
                None => Ok(0.0),
            }
        }
        Family::LassoLogistic => {
            check_labels(targets)?;
            match grid.or_else(|| default_path(StdDesign::new(features, None).lambda_max(targets)))
            {
                Some(grid) => cv_logistic(features, targets, &grid, folds, spec),
                None => Ok(0.0),
            }
        }
    }
}

/// Largest KKT residual of `model` on its training data, measured on the standardized scale:
/// `|grad_j + lambda sign(b_j)|` for active and `max(|grad_j| - lambda, 0)` for inactive coefficients.
pub fn kkt_residual(model: &FittedModel, features: &DMatrix<f64>, targets: &[f64]) -> Result<f64> {
    check_inputs(features, targets)?;
    let design = StdDesign::new(features, None);
    let n = features.nrows() as f64;
    let eta = model.linear_index(features);
    let resid: Vec<f64> = match model.family {
        Family::LassoLinear => targets.iter().zip(&eta).map(|(y, e)| y - e).collect(),
        Family::LassoLogistic => targets
            .iter()
            .zip(&eta)
            .map(|(y, e)| y - sigmoid(*e))
            .collect(),
    };
    let beta = model.standardized_coefficients();
    let mut worst = 0.0_f64;
    for (j, &b) in beta.iter().enumerate().take(design.p) {
        if !design.usable[j] {
            continue;
        }
        let grad = -design
            .col(j)
            .iter()
            .zip(&resid)
            .map(|(x, r)| x * r)
            .sum::<f64>()
            / n;
        let v = if b != 0.0 {
            (grad + model.lambda * b.signum()).abs()
        } else {
            (grad.abs() - model.lambda).max(0.0)
        };
        worst = worst.max(v);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixed(family: Family, lambda: f64) -> LearnerSpec {
        LearnerSpec::cross_validated(family).with_lambda(lambda)
    }

    #[test]
    fn soft_threshold_kills_small_slope() {
        // standardized x: mean 0, population variance 1
        let x = DMatrix::from_column_slice(4, 1, &[-1.0, -1.0, 1.0, 1.0]);
        let y = [0.1, -0.2, 0.3, 0.0];
        // rho = mean(x (y - ybar)) = 0.1
        let m = fit_lasso_linear(&x, &y, &fixed(Family::LassoLinear, 0.15)).unwrap();
        assert_eq!(m.coefficients[0], 0.0);
        assert!((m.intercept - 0.05).abs() < 1e-15);
    }

    #[test]
    fn zero_coefficient_model_predicts_intercept() {
        let x = DMatrix::from_column_slice(4, 1, &[-1.0, -1.0, 1.0, 1.0]);
        let m =
            fit_lasso_linear(&x, &[1.0, 2.0, 3.0, 0.0], &fixed(Family::LassoLinear, 10.0)).unwrap();
        let pred = m
            .predict(&DMatrix::from_column_slice(2, 1, &[7.0, -3.0]))
            .unwrap();
        assert_eq!(pred, vec![1.5, 1.5]);
    }

    #[test]
    fn logistic_constant_labels_degenerate() {
        let x = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 2.0]);
        let m = fit_lasso_logistic(&x, &[1.0, 1.0, 1.0], &LearnerSpec::lasso_logistic()).unwrap();
        assert!(m.coefficients.iter().all(|&b| b == 0.0));
        assert!(m.fitted.iter().all(|&p| p == 1.0 - CLIP_EPS));
    }

    #[test]
    fn logistic_huge_score_is_clipped() {
        let m = FittedModel {
            family: Family::LassoLogistic,
            intercept: 0.0,
            coefficients: vec![1.0],
            lambda: 0.0,
            feature_means: vec![0.0],
            feature_sds: vec![1.0],
            fitted: vec![],
            diagnostics: FitDiagnostics {
                objective_trace: vec![],
                converged: true,
            },
        };
        let p = m
            .predict(&DMatrix::from_column_slice(2, 1, &[1e6, -1e6]))
            .unwrap();
        assert_eq!(p, vec![1.0 - CLIP_EPS, CLIP_EPS]);
    }

    #[test]
    fn separable_pair_stays_finite() {
        let x = DMatrix::from_column_slice(2, 1, &[-1.0, 1.0]);
        let m = fit_lasso_logistic(&x, &[0.0, 1.0], &fixed(Family::LassoLogistic, 0.05)).unwrap();
        assert!(m.coefficients[0].is_finite() && m.coefficients[0] > 0.0);
        assert!(m.intercept.is_finite());
    }

    #[test]
    fn grid_validation() {
        assert!(validate_grid(&[]).is_err());
        assert!(validate_grid(&[0.1, 0.2]).is_err());
        assert!(validate_grid(&[0.2, 0.0]).is_err());
        assert!(validate_grid(&[0.2, 0.1]).is_ok());
        let g = default_grid(2.0, 50, 1e-3);
        assert_eq!(g.len(), 50);
        assert_eq!(g[0], 2.0);
        assert!((g[49] - 2e-3).abs() < 1e-15);
    }

    #[test]
    fn predict_rejects_column_mismatch() {
        let x = DMatrix::from_column_slice(3, 1, &[0.0, 1.0, 2.0]);
        let m = fit_lasso_linear(&x, &[0.0, 1.0, 2.0], &fixed(Family::LassoLinear, 0.0)).unwrap();
        assert!(matches!(
            m.predict(&DMatrix::zeros(2, 2)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn rejects_bad_inputs() {
        let x = DMatrix::from_column_slice(2, 1, &[0.0, f64::NAN]);
        assert!(matches!(
            fit_lasso_linear(&x, &[0.0, 1.0], &LearnerSpec::lasso_linear()),
            Err(Error::NonFinite(_))
        ));
        let x = DMatrix::<f64>::zeros(0, 1);
        assert!(fit_lasso_linear(&x, &[], &LearnerSpec::lasso_linear()).is_err());
        let x = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        assert!(fit_lasso_logistic(&x, &[0.0, 0.5], &LearnerSpec::lasso_logistic()).is_err());
    }
}
