//! Data generating processes with probit selection and treatment, plus their
//! analytic nuisance functions.
//!
//! Main design:
//!
//! ```text
//! X ~ N(0, Sigma), Sigma_ij = 0.5^|i-j|,  beta_i = 0.4 / i^2
//! D = 1{X'beta + W > 0}
//! S = 1{D + gamma Z + X'beta + V > 0}
//! Y = D + X'beta + U            (observed iff S = 1)
//! W, Z ~ N(0, 1);  (U, V) ~ N(0, [[1, rho], [rho, 1]])
//! ```
//!
//! Dynamic design (post-treatment covariate M drives selection):
//!
//! ```text
//! M = delta D + X'beta + xi
//! S = 1{0.5 D + M + X'beta_{1..10} + V > 0}
//! Y = D + 0.5 M + X'beta + U    with U, V, xi independent N(0, 1)
//! ```

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::crossfit::{CrossfitKind, LevelPredictions, NuisancePredictions};
use crate::dataset::{DatasetParts, SelectionDataset};
use crate::error::{Error, Result};
use crate::stats::{inverse_mills, norm_cdf, norm_pdf};

pub const DEFAULT_P: usize = 100;
pub const BETA_SCALE: f64 = 0.4;
pub const COV_DECAY: f64 = 0.5;
/// Number of leading covariates entering the dynamic design's selection equation.
pub const DYNAMIC_SELECTION_TERMS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Design {
    /// gamma = 0, rho = 0: outcomes missing at random.
    #[serde(rename = "1")]
    Mar,
    /// gamma = 1, rho = 0.8: nonignorable selection with an instrument.
    #[serde(rename = "2")]
    Iv,
    #[serde(rename = "dynamic")]
    Dynamic,
}

impl Design {
    pub fn name(self) -> &'static str {
        match self {
            Design::Mar => "1",
            Design::Iv => "2",
            Design::Dynamic => "dynamic",
        }
    }
}

impl std::str::FromStr for Design {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" => Ok(Design::Mar),
            "2" => Ok(Design::Iv),
            "dynamic" => Ok(Design::Dynamic),
            _ => Err(Error::InvalidInput(format!(
                "unknown design {s:?} (expected 1, 2 or dynamic)"
            ))),
        }
    }
}

impl std::fmt::Display for Design {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    pub n: usize,
    pub p: usize,
    pub gamma: f64,
    pub rho_uv: f64,
    /// Effect of the treatment on the post-treatment covariate (dynamic design only).
    pub delta_m: f64,
    pub seed: u64,
}

impl DgpConfig {
    pub fn design(design: Design, n: usize, seed: u64) -> Self {
        let (gamma, rho_uv, delta_m) = match design {
            Design::Mar => (0.0, 0.0, 0.0),
            Design::Iv => (1.0, 0.8, 0.0),
            Design::Dynamic => (0.0, 0.0, 1.0),
        };
        DgpConfig {
            n,
            p: DEFAULT_P,
            gamma,
            rho_uv,
            delta_m,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.p == 0 {
            return Err(Error::InvalidInput("DGP needs n >= 2 and p >= 1".into()));
        }
        if self.rho_uv.is_nan()
            || self.rho_uv.abs() >= 1.0
            || !self.gamma.is_finite()
            || !self.delta_m.is_finite()
        {
            return Err(Error::InvalidInput(
                "DGP needs |rho_uv| < 1 and finite gamma, delta_m".into(),
            ));
        }
        Ok(())
    }

    pub fn beta(&self) -> Vec<f64> {
        beta(self.p)
    }
}

pub fn beta(p: usize) -> Vec<f64> {
    (1..=p).map(|i| BETA_SCALE / (i * i) as f64).collect()
}

pub fn covariance(p: usize) -> DMatrix<f64> {
    DMatrix::from_fn(p, p, |i, j| COV_DECAY.powi(i.abs_diff(j) as i32))
}

fn covariate_draws(
    rng: &mut ChaCha8Rng,
    n: usize,
    p: usize,
    extra: usize,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let chol = covariance(p).cholesky().ok_or_else(|| {
        Error::InvalidInput("covariate covariance is not positive definite".into())
    })?;
    let mut raw = DMatrix::<f64>::zeros(n, p);
    let mut shocks = DMatrix::<f64>::zeros(n, extra);
    for i in 0..n {
        for j in 0..p {
            raw[(i, j)] = rng.sample(StandardNormal);
        }
        for j in 0..extra {
            shocks[(i, j)] = rng.sample(StandardNormal);
        }
    }
    let x = raw * chol.l().transpose();
    Ok((x, shocks))
}

fn index(x: &DMatrix<f64>, beta: &[f64], terms: usize) -> Vec<f64> {
    (0..x.nrows())
        .map(|i| (0..terms).map(|j| x[(i, j)] * beta[j]).sum())
        .collect()
}

/// Analytic truths of a main-design draw.
#[derive(Debug, Clone, PartialEq)]
pub struct Oracle {
    pub gamma: f64,
    pub rho_uv: f64,
    /// `X'beta` per row.
    pub index: Vec<f64>,
    pub instrument: Vec<f64>,
    pub treatment: Vec<usize>,
    /// `E[Y(0)]`, `E[Y(1)]`.
    pub potential_means: [f64; 2],
    pub true_ate: f64,
}

impl Oracle {
    /// `p_1(x) = Phi(x'beta)`.
    pub fn treatment_prob(&self, i: usize) -> f64 {
        norm_cdf(self.index[i])
    }

    fn level_prob(&self, d: usize, i: usize) -> f64 {
        let p1 = self.treatment_prob(i);
        if d == 1 {
            p1
        } else {
            1.0 - p1
        }
    }

    /// `pi(d, x) = Pr(S=1 | D=d, X=x)`, integrating out the instrument.
    pub fn selection_prob(&self, d: usize, i: usize) -> f64 {
        norm_cdf((d as f64 + self.index[i]) / (1.0 + self.gamma * self.gamma).sqrt())
    }

    /// `pi(d, x, z) = Phi(d + gamma z + x'beta)`.
    pub fn selection_prob_iv(&self, d: usize, i: usize) -> f64 {
        norm_cdf(self.selection_index(d, i))
    }

    fn selection_index(&self, d: usize, i: usize) -> f64 {
        d as f64 + self.gamma * self.instrument[i] + self.index[i]
    }

    /// `E[Y | D=d, S=1, X]`, available when selection is ignorable (rho = 0).
    pub fn outcome_mean(&self, d: usize, i: usize) -> Result<f64> {
        if self.rho_uv != 0.0 {
            return Err(Error::InvalidInput(
                "conditional mean given X alone has no closed form when rho != 0".into(),
            ));
        }
        Ok(d as f64 + self.index[i])
    }

    /// True nuisances of the MAR score.
    pub fn mar_predictions(&self, levels: &[usize]) -> Result<NuisancePredictions> {
        let n = self.index.len();
        let levels = levels
            .iter()
            .map(|&d| {
                Ok(LevelPredictions {
                    level: d,
                    outcome_mean: (0..n)
                        .map(|i| self.outcome_mean(d, i))
                        .collect::<Result<_>>()?,
                    treatment_prob: (0..n).map(|i| self.level_prob(d, i)).collect(),
                    selection_prob: (0..n).map(|i| self.selection_prob(d, i)).collect(),
                    nested_mean: None,
                })
            })
            .collect::<Result<_>>()?;
        Ok(NuisancePredictions {
            kind: CrossfitKind::Mar,
            levels,
            control: None,
            plan: None,
        })
    }

    /// Control function `Pi = Phi(D + gamma Z + x'beta)` at the observed treatment.
    pub fn control(&self, i: usize) -> f64 {
        norm_cdf(self.selection_index(self.treatment[i], i))
    }

    /// `E[Y | D=d, S=1, X, Pi]`: the selection threshold is recovered from `Pi`.
    pub fn outcome_mean_iv(&self, d: usize, i: usize) -> f64 {
        let c = self.selection_index(self.treatment[i], i);
        d as f64 + self.index[i] + self.rho_uv * inverse_mills(c)
    }

    /// `Pr(D=d | X, Pi)`; `Pi` and `X` reveal `A = D + gamma Z`, which is `N(d, gamma^2)` given `D=d`.
    pub fn treatment_prob_iv(&self, d: usize, i: usize) -> Result<f64> {
        if self.gamma == 0.0 {
            return Err(Error::InvalidInput(
                "treatment propensity given the control function is degenerate when gamma = 0"
                    .into(),
            ));
        }
        let a = self.treatment[i] as f64 + self.gamma * self.instrument[i];
        let q1 = control_posterior(self.treatment_prob(i), a, self.gamma);
        Ok(if d == 1 { q1 } else { 1.0 - q1 })
    }

    /// True nuisances of the IV scores.
    pub fn iv_predictions(&self, levels: &[usize]) -> Result<NuisancePredictions> {
        let n = self.index.len();
        let levels = levels
            .iter()
            .map(|&d| {
                Ok(LevelPredictions {
                    level: d,
                    outcome_mean: (0..n).map(|i| self.outcome_mean_iv(d, i)).collect(),
                    treatment_prob: (0..n)
                        .map(|i| self.treatment_prob_iv(d, i))
                        .collect::<Result<_>>()?,
                    selection_prob: (0..n).map(|i| self.selection_prob_iv(d, i)).collect(),
                    nested_mean: None,
                })
            })
            .collect::<Result<_>>()?;
        Ok(NuisancePredictions {
            kind: CrossfitKind::Iv,
            levels,
            control: Some((0..n).map(|i| self.control(i)).collect()),
            plan: None,
        })
    }
}

/// `Pr(D=1 | A=a)` for `A = D + gamma Z` with `Pr(D=1) = p1` and `Z ~ N(0, 1)`.
pub fn control_posterior(p1: f64, a: f64, gamma: f64) -> f64 {
    let w1 = p1 * norm_pdf((a - 1.0) / gamma);
    let w0 = (1.0 - p1) * norm_pdf(a / gamma);
    if w1 + w0 > 0.0 {
        w1 / (w1 + w0)
    } else if a > 0.5 {
        1.0
    } else {
        0.0
    }
}

/// Draws one main-design dataset; the instrument column is always included.
pub fn draw_dataset(cfg: &DgpConfig) -> Result<(SelectionDataset, Oracle)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (x, shocks) = covariate_draws(&mut rng, cfg.n, cfg.p, 4)?;
    let beta = cfg.beta();
    let xb = index(&x, &beta, cfg.p);
    let rho = cfg.rho_uv;
    let mut outcome = Vec::with_capacity(cfg.n);
    let mut selection = Vec::with_capacity(cfg.n);
    let mut treatment = Vec::with_capacity(cfg.n);
    let mut instrument = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let (w, z, e1, e2) = (
            shocks[(i, 0)],
            shocks[(i, 1)],
            shocks[(i, 2)],
            shocks[(i, 3)],
        );
        let u = e1;
        let v = rho * e1 + (1.0 - rho * rho).sqrt() * e2;
        let d = f64::from(u8::from(xb[i] + w > 0.0));
        let s = d + cfg.gamma * z + xb[i] + v > 0.0;
        outcome.push(s.then_some(d + xb[i] + u));
        selection.push(s);
        treatment.push(d as i64);
        instrument.push(z);
    }
    let data = SelectionDataset::new(DatasetParts {
        outcome,
        selection,
        treatment: treatment.clone(),
        levels: 2,
        covariates: x,
        post_covariates: None,
        instrument: Some(instrument.clone()),
    })?;
    let oracle = Oracle {
        gamma: cfg.gamma,
        rho_uv: rho,
        index: xb,
        instrument,
        treatment: treatment.iter().map(|&d| d as usize).collect(),
        potential_means: [0.0, 1.0],
        true_ate: 1.0,
    };
    Ok((data, oracle))
}

/// Analytic truths of a dynamic-design draw.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicOracle {
    pub delta_m: f64,
    pub index: Vec<f64>,
    /// `X'beta` over the leading covariates that enter selection.
    pub selection_index: Vec<f64>,
    pub post: Vec<f64>,
    pub potential_means: [f64; 2],
    pub true_ate: f64,
}

impl DynamicOracle {
    pub fn treatment_prob(&self, d: usize, i: usize) -> f64 {
        let p1 = norm_cdf(self.index[i]);
        if d == 1 {
            p1
        } else {
            1.0 - p1
        }
    }

    /// `Pr(S=1 | D=d, X, M)`.
    pub fn selection_prob(&self, d: usize, i: usize) -> f64 {
        norm_cdf(0.5 * d as f64 + self.post[i] + self.selection_index[i])
    }

    /// `E[Y | D=d, S=1, X, M]`.
    pub fn outcome_mean(&self, d: usize, i: usize) -> f64 {
        d as f64 + 0.5 * self.post[i] + self.index[i]
    }

    /// `E[mu(d, 1, X, M) | D=d, X]`.
    pub fn nested_mean(&self, d: usize, i: usize) -> f64 {
        d as f64 + 0.5 * (self.delta_m * d as f64 + self.index[i]) + self.index[i]
    }

    pub fn predictions(&self, levels: &[usize]) -> NuisancePredictions {
        let n = self.index.len();
        NuisancePredictions {
            kind: CrossfitKind::Dynamic,
            levels: levels
                .iter()
                .map(|&d| LevelPredictions {
                    level: d,
                    outcome_mean: (0..n).map(|i| self.outcome_mean(d, i)).collect(),
                    treatment_prob: (0..n).map(|i| self.treatment_prob(d, i)).collect(),
                    selection_prob: (0..n).map(|i| self.selection_prob(d, i)).collect(),
                    nested_mean: Some((0..n).map(|i| self.nested_mean(d, i)).collect()),
                })
                .collect(),
            control: None,
            plan: None,
        }
    }
}

/// Draws one dynamic-design dataset with a single post-treatment covariate.
pub fn draw_dynamic_dataset(cfg: &DgpConfig) -> Result<(SelectionDataset, DynamicOracle)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (x, shocks) = covariate_draws(&mut rng, cfg.n, cfg.p, 4)?;
    let beta = cfg.beta();
    let xb = index(&x, &beta, cfg.p);
    let xb_sel = index(&x, &beta, DYNAMIC_SELECTION_TERMS.min(cfg.p));
    let mut outcome = Vec::with_capacity(cfg.n);
    let mut selection = Vec::with_capacity(cfg.n);
    let mut treatment = Vec::with_capacity(cfg.n);
    let mut post = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let (w, xi, u, v) = (
            shocks[(i, 0)],
            shocks[(i, 1)],
            shocks[(i, 2)],
            shocks[(i, 3)],
        );
        let d = f64::from(u8::from(xb[i] + w > 0.0));
        let m = cfg.delta_m * d + xb[i] + xi;
        let s = 0.5 * d + m + xb_sel[i] + v > 0.0;
        outcome.push(s.then_some(d + 0.5 * m + xb[i] + u));
        selection.push(s);
        treatment.push(d as i64);
        post.push(m);
    }
    let data = SelectionDataset::new(DatasetParts {
        outcome,
        selection,
        treatment,
        levels: 2,
        covariates: x,
        post_covariates: Some(DMatrix::from_column_slice(cfg.n, 1, &post)),
        instrument: None,
    })?;
    let true_ate = 1.0 + 0.5 * cfg.delta_m;
    let oracle = DynamicOracle {
        delta_m: cfg.delta_m,
        index: xb,
        selection_index: xb_sel,
        post,
        potential_means: [0.0, true_ate],
        true_ate,
    };
    Ok((data, oracle))
}
