//! Orthogonality probe: sensitivity of the mean ATE score to nuisance perturbations.
//!
//! With truths `eta0` and a fitted direction `eta_hat` (full-sample fits), the probe evaluates
//! `g(t) = E_n[ E[score | X] ]` at `eta0 + t (eta_hat - eta0)`. The inner expectation over
//! `(D, S, Y)` (and `Z` or `M`) is taken analytically, so `g(t) - g(0)` carries only the
//! functional's own sensitivity and no sampling noise from the outcome draws.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::dataset::SelectionDataset;
use crate::error::{Error, Result};
use crate::learners::{fit_lasso_linear, fit_lasso_logistic, FittedModel, LearnerSpec};
use crate::scores::EstimatorKind;
use crate::stats::{inverse_mills, log_log_slope, norm_cdf, norm_quantile};

use super::dgp::{
    control_posterior, draw_dataset, draw_dynamic_dataset, Design, DgpConfig, DynamicOracle, Oracle,
};

pub const DEFAULT_T_GRID: [f64; 4] = [0.4, 0.2, 0.1, 0.05];
/// Gauss-Hermite nodes for integrating out the instrument or the post-treatment covariate.
pub const QUADRATURE_NODES: usize = 40;
/// Propensity directions are truncated so that perturbed propensities stay within this factor
/// of the truth (the overlap regime in which the remainder is second order).
pub const PROPENSITY_BAND: f64 = 2.0;

/// Score under probe: one of the efficient scores or the plain IPW functional.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeScore {
    Mar,
    IvTotal,
    IvSelected,
    Dynamic,
    /// `1{D=d} S Y / (p pi)`, not orthogonal.
    Ipw,
}

impl ProbeScore {
    pub const ALL: [ProbeScore; 5] = [
        ProbeScore::Mar,
        ProbeScore::IvTotal,
        ProbeScore::IvSelected,
        ProbeScore::Dynamic,
        ProbeScore::Ipw,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProbeScore::Mar => "mar",
            ProbeScore::IvTotal => "iv-total",
            ProbeScore::IvSelected => "iv-selected",
            ProbeScore::Dynamic => "dynamic",
            ProbeScore::Ipw => "ipw",
        }
    }

    /// Design whose analytic nuisances the score needs.
    pub fn default_design(self) -> Design {
        match self {
            ProbeScore::Mar | ProbeScore::Ipw => Design::Mar,
            ProbeScore::IvTotal | ProbeScore::IvSelected => Design::Iv,
            ProbeScore::Dynamic => Design::Dynamic,
        }
    }
}

impl From<EstimatorKind> for ProbeScore {
    fn from(kind: EstimatorKind) -> Self {
        match kind {
            EstimatorKind::Mar => ProbeScore::Mar,
            EstimatorKind::IvTotal => ProbeScore::IvTotal,
            EstimatorKind::IvSelected => ProbeScore::IvSelected,
            EstimatorKind::Dynamic => ProbeScore::Dynamic,
        }
    }
}

impl std::fmt::Display for ProbeScore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ProbeScore {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ProbeScore::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown probe score {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub score: ProbeScore,
    pub design: Design,
    pub n: usize,
    pub seed: u64,
    pub ts: Vec<f64>,
    /// IV scores: also feed the perturbed first-step model into mu and p as the generated
    /// regressor. Off by default, where the control-function argument stays at its true value.
    #[serde(default)]
    pub perturb_control: bool,
}

impl ProbeConfig {
    pub fn new(score: ProbeScore, n: usize, seed: u64) -> Self {
        ProbeConfig {
            score,
            design: score.default_design(),
            n,
            seed,
            ts: DEFAULT_T_GRID.to_vec(),
            perturb_control: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub score: ProbeScore,
    pub design: Design,
    pub n: usize,
    pub seed: u64,
    /// `g(0)`, the mean ATE score at the true nuisances.
    pub g0: f64,
    pub ts: Vec<f64>,
    /// `|g(t) - g(0)|` per entry of `ts`.
    pub deviations: Vec<f64>,
    /// Least-squares slope of `log deviation` on `log t`; undefined for fewer than two points.
    pub slope: Option<f64>,
}

impl ProbeReport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("t\tdeviation\n");
        for (t, d) in self.ts.iter().zip(&self.deviations) {
            out.push_str(&format!("{t}\t{d:.6e}\n"));
        }
        match self.slope {
            Some(s) => out.push_str(&format!("# slope\t{s:.4}\n")),
            None => out.push_str("# slope\tundefined\n"),
        }
        out
    }
}

/// Probabilists' Gauss-Hermite rule: nodes and weights for `E[f(Z)]`, `Z ~ N(0, 1)`.
pub fn hermite_rule(k: usize) -> (Vec<f64>, Vec<f64>) {
    let jacobi = DMatrix::from_fn(k, k, |i, j| {
        if i.abs_diff(j) == 1 {
            (i.max(j) as f64).sqrt()
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(jacobi);
    let mut rule: Vec<(f64, f64)> = (0..k)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    rule.sort_by(|a, b| a.0.total_cmp(&b.0));
    rule.into_iter().unzip()
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

/// Fitted propensity truncated to within a factor `PROPENSITY_BAND` of the truth.
fn bounded(truth: f64, fitted: f64) -> f64 {
    fitted.clamp(
        truth / PROPENSITY_BAND,
        (truth * PROPENSITY_BAND).min(1.0).max(truth),
    )
}

/// `num / den`, with zero-probability cells contributing nothing.
fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

fn with_column(x: &DMatrix<f64>, col: &[f64]) -> DMatrix<f64> {
    let mut out = x.clone().insert_column(x.ncols(), 0.0);
    out.column_mut(x.ncols()).copy_from_slice(col);
    out
}

fn rows_of(x: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    x.select_rows(rows)
}

/// A fitted model split into its covariate index and the coefficient on one appended column.
struct Split {
    model: FittedModel,
    base: Vec<f64>,
    extra: f64,
}

impl Split {
    fn new(model: FittedModel, x: &DMatrix<f64>) -> Self {
        let p = x.ncols();
        let mut base = vec![model.intercept; x.nrows()];
        for j in 0..p {
            let b = model.coefficients[j];
            if b != 0.0 {
                for (e, v) in base.iter_mut().zip(x.column(j).iter()) {
                    *e += b * v;
                }
            }
        }
        let extra = model.coefficients.get(p).copied().unwrap_or(0.0);
        Split { model, base, extra }
    }

    fn at(&self, i: usize, v: f64) -> f64 {
        self.model.response(self.base[i] + self.extra * v)
    }
}

fn spec(base: LearnerSpec, seed: u64, role: u64) -> LearnerSpec {
    base.with_seed(seed.wrapping_mul(31).wrapping_add(role))
}

fn labels(rows: &[usize], f: impl Fn(usize) -> bool) -> Vec<f64> {
    rows.iter().map(|&i| f64::from(u8::from(f(i)))).collect()
}

fn level_rows(data: &SelectionDataset, d: usize, selected_only: bool) -> Vec<usize> {
    (0..data.n())
        .filter(|&i| data.treatment(i) == d && (!selected_only || data.selected(i)))
        .collect()
}

fn outcomes(data: &SelectionDataset, rows: &[usize]) -> Vec<f64> {
    rows.iter()
        .map(|&i| data.outcome(i).expect("selected row"))
        .collect()
}

fn all_rows(data: &SelectionDataset) -> Vec<usize> {
    (0..data.n()).collect()
}

fn sign(d: usize) -> f64 {
    if d == 1 {
        1.0
    } else {
        -1.0
    }
}

fn level(p1: f64, d: usize) -> f64 {
    if d == 1 {
        p1
    } else {
        1.0 - p1
    }
}

/// MAR design: everything conditions on X alone.
struct MarProbe {
    xb: Vec<f64>,
    p1_hat: Vec<f64>,
    pi_hat: [Vec<f64>; 2],
    mu_hat: [Vec<f64>; 2],
    ipw: bool,
}

impl MarProbe {
    fn fit(data: &SelectionDataset, oracle: &Oracle, seed: u64, ipw: bool) -> Result<Self> {
        let x = data.covariates();
        let rows = all_rows(data);
        let p1 = fit_lasso_logistic(
            x,
            &labels(&rows, |i| data.treatment(i) == 1),
            &spec(LearnerSpec::lasso_logistic(), seed, 1),
        )?;
        let mut pi_hat: [Vec<f64>; 2] = Default::default();
        let mut mu_hat: [Vec<f64>; 2] = Default::default();
        for d in 0..2 {
            let r = level_rows(data, d, false);
            let pi = fit_lasso_logistic(
                &rows_of(x, &r),
                &labels(&r, |i| data.selected(i)),
                &spec(LearnerSpec::lasso_logistic(), seed, 2 + d as u64),
            )?;
            pi_hat[d] = pi.predict(x)?;
            let r = level_rows(data, d, true);
            let mu = fit_lasso_linear(
                &rows_of(x, &r),
                &outcomes(data, &r),
                &spec(LearnerSpec::lasso_linear(), seed, 4 + d as u64),
            )?;
            mu_hat[d] = mu.predict(x)?;
        }
        Ok(MarProbe {
            xb: oracle.index.clone(),
            p1_hat: p1.predict(x)?,
            pi_hat,
            mu_hat,
            ipw,
        })
    }

    fn g(&self, t: f64) -> f64 {
        let n = self.xb.len();
        let mut total = 0.0;
        for i in 0..n {
            let xb = self.xb[i];
            for d in 0..2 {
                let p0 = level(norm_cdf(xb), d);
                let pi0 = norm_cdf(d as f64 + xb);
                let mu0 = d as f64 + xb;
                let p = lerp(p0, bounded(p0, level(self.p1_hat[i], d)), t);
                let pi = lerp(pi0, bounded(pi0, self.pi_hat[d][i]), t);
                let mu = lerp(mu0, self.mu_hat[d][i], t);
                let v = if self.ipw {
                    ratio(p0 * pi0 * mu0, p * pi)
                } else {
                    ratio(p0 * pi0 * (mu0 - mu), p * pi) + mu
                };
                total += sign(d) * v;
            }
        }
        total / n as f64
    }
}

/// IV design: integrates over the instrument and the treatment given X.
struct IvProbe {
    xb: Vec<f64>,
    gamma: f64,
    rho: f64,
    /// pi(d, X, Z) per level, appended column Z.
    pi_hat: [Split; 2],
    /// p_1(X, Pi), appended column Pi.
    p1_hat: Split,
    /// mu(d, 1, X, Pi) per level, appended column Pi.
    mu_hat: [Split; 2],
    nodes: Vec<f64>,
    weights: Vec<f64>,
    selected: bool,
    perturb_control: bool,
}

impl IvProbe {
    fn fit(
        data: &SelectionDataset,
        oracle: &Oracle,
        seed: u64,
        selected: bool,
        perturb_control: bool,
    ) -> Result<Self> {
        if oracle.gamma == 0.0 {
            return Err(Error::InvalidInput(
                "the IV probe needs a relevant instrument (gamma != 0); use design 2".into(),
            ));
        }
        let x = data.covariates();
        let z = data.instrument().ok_or(Error::MissingChannel(
            "instrument (required by the IV estimators)",
        ))?;
        let xz = with_column(x, z);
        let mut pis = Vec::with_capacity(2);
        for d in 0..2 {
            let r = level_rows(data, d, false);
            let m = fit_lasso_logistic(
                &rows_of(&xz, &r),
                &labels(&r, |i| data.selected(i)),
                &spec(LearnerSpec::lasso_logistic(), seed, 2 + d as u64),
            )?;
            pis.push(Split::new(m, x));
        }
        let control: Vec<f64> = (0..data.n())
            .map(|i| pis[data.treatment(i)].at(i, z[i]))
            .collect();
        let xc = with_column(x, &control);
        let rows = all_rows(data);
        let p1 = fit_lasso_logistic(
            &xc,
            &labels(&rows, |i| data.treatment(i) == 1),
            &spec(LearnerSpec::lasso_logistic(), seed, 1),
        )?;
        let mut mus = Vec::with_capacity(2);
        for d in 0..2 {
            let r = level_rows(data, d, true);
            let m = fit_lasso_linear(
                &rows_of(&xc, &r),
                &outcomes(data, &r),
                &spec(LearnerSpec::lasso_linear(), seed, 4 + d as u64),
            )?;
            mus.push(Split::new(m, x));
        }
        let (nodes, weights) = hermite_rule(QUADRATURE_NODES);
        let [pi0, pi1]: [Split; 2] = pis.try_into().ok().expect("two levels");
        let [mu0, mu1]: [Split; 2] = mus.try_into().ok().expect("two levels");
        Ok(IvProbe {
            xb: oracle.index.clone(),
            gamma: oracle.gamma,
            rho: oracle.rho_uv,
            pi_hat: [pi0, pi1],
            p1_hat: Split::new(p1, x),
            mu_hat: [mu0, mu1],
            nodes,
            weights,
            selected,
            perturb_control,
        })
    }

    fn mu0(&self, d: usize, xb: f64, control: f64) -> f64 {
        d as f64 + xb + self.rho * inverse_mills(norm_quantile(control))
    }

    fn p0(&self, d: usize, xb: f64, control: f64) -> f64 {
        let a = norm_quantile(control) - xb;
        level(control_posterior(norm_cdf(xb), a, self.gamma), d)
    }

    /// Returns `(sum over rows of E[S score | X], sum over rows of E[S | X])` for the selected
    /// estimand, or `(sum of E[score | X], n)` for the total one.
    fn sums(&self, t: f64) -> (f64, f64) {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..self.xb.len() {
            let xb = self.xb[i];
            let prior1 = norm_cdf(xb);
            for (&zq, &wq) in self.nodes.iter().zip(&self.weights) {
                let pi0 = |d: usize| norm_cdf(d as f64 + self.gamma * zq + xb);
                let pi_t = |d: usize| lerp(pi0(d), bounded(pi0(d), self.pi_hat[d].at(i, zq)), t);
                for obs in 0..2 {
                    let w = wq * level(prior1, obs);
                    // control function at the observed treatment
                    let c_obs = if self.perturb_control {
                        pi_t(obs)
                    } else {
                        pi0(obs)
                    };
                    let s_weight = if self.selected { pi0(obs) } else { 1.0 };
                    if self.selected {
                        den += w * s_weight;
                    }
                    for d in 0..2 {
                        let mu_obs = lerp(self.mu0(d, xb, c_obs), self.mu_hat[d].at(i, c_obs), t);
                        let mut v = mu_obs;
                        if obs == d {
                            let y_mean = self.mu0(d, xb, pi0(d));
                            let p0 = self.p0(d, xb, c_obs);
                            let p = lerp(p0, bounded(p0, level(self.p1_hat.at(i, c_obs), d)), t);
                            v += if self.selected {
                                ratio(y_mean - mu_obs, p)
                            } else {
                                ratio(pi0(d) * (y_mean - mu_obs), p * pi_t(d))
                            };
                        }
                        num += sign(d) * w * s_weight * v;
                    }
                }
            }
        }
        if !self.selected {
            den = self.xb.len() as f64;
        }
        (num, den)
    }

    fn g(&self, t: f64) -> f64 {
        let (num, den) = self.sums(t);
        num / den
    }
}

/// Dynamic design: integrates over the post-treatment covariate given D and X.
struct DynamicProbe {
    oracle: DynamicOracle,
    p1_hat: Vec<f64>,
    /// pi(d, X, M) and mu(d, 1, X, M) per level, appended column M.
    pi_hat: [Split; 2],
    mu_hat: [Split; 2],
    nu_hat: [Vec<f64>; 2],
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl DynamicProbe {
    fn fit(data: &SelectionDataset, oracle: &DynamicOracle, seed: u64) -> Result<Self> {
        let x = data.covariates();
        let m = data.post_covariates().ok_or(Error::MissingChannel(
            "post-treatment covariates (required by the dynamic estimator)",
        ))?;
        if m.ncols() != 1 {
            return Err(Error::InvalidInput(
                "the dynamic probe expects one post-treatment covariate".into(),
            ));
        }
        let mcol: Vec<f64> = m.column(0).iter().copied().collect();
        let xm = with_column(x, &mcol);
        let rows = all_rows(data);
        let p1 = fit_lasso_logistic(
            x,
            &labels(&rows, |i| data.treatment(i) == 1),
            &spec(LearnerSpec::lasso_logistic(), seed, 1),
        )?;
        let mut pis = Vec::with_capacity(2);
        let mut mus = Vec::with_capacity(2);
        let mut nu_hat: [Vec<f64>; 2] = Default::default();
        for (d, nu_slot) in nu_hat.iter_mut().enumerate() {
            let r = level_rows(data, d, false);
            let pi = fit_lasso_logistic(
                &rows_of(&xm, &r),
                &labels(&r, |i| data.selected(i)),
                &spec(LearnerSpec::lasso_logistic(), seed, 2 + d as u64),
            )?;
            pis.push(Split::new(pi, x));
            let rs = level_rows(data, d, true);
            let mu = fit_lasso_linear(
                &rows_of(&xm, &rs),
                &outcomes(data, &rs),
                &spec(LearnerSpec::lasso_linear(), seed, 4 + d as u64),
            )?;
            let mu_on_level = mu.predict(&rows_of(&xm, &r))?;
            let nu = fit_lasso_linear(
                &rows_of(x, &r),
                &mu_on_level,
                &spec(LearnerSpec::lasso_linear(), seed, 6 + d as u64),
            )?;
            *nu_slot = nu.predict(x)?;
            mus.push(Split::new(mu, x));
        }
        let (nodes, weights) = hermite_rule(QUADRATURE_NODES);
        let [pi0, pi1]: [Split; 2] = pis.try_into().ok().expect("two levels");
        let [mu0, mu1]: [Split; 2] = mus.try_into().ok().expect("two levels");
        Ok(DynamicProbe {
            oracle: oracle.clone(),
            p1_hat: p1.predict(x)?,
            pi_hat: [pi0, pi1],
            mu_hat: [mu0, mu1],
            nu_hat,
            nodes,
            weights,
        })
    }

    fn g(&self, t: f64) -> f64 {
        let o = &self.oracle;
        let n = o.index.len();
        let mut total = 0.0;
        for i in 0..n {
            let xb = o.index[i];
            for d in 0..2 {
                let df = d as f64;
                let p0 = o.treatment_prob(d, i);
                let p = lerp(p0, bounded(p0, level(self.p1_hat[i], d)), t);
                let nu0 = o.nested_mean(d, i);
                let nu = lerp(nu0, self.nu_hat[d][i], t);
                let mut inner = 0.0;
                for (&q, &wq) in self.nodes.iter().zip(&self.weights) {
                    let m = o.delta_m * df + xb + q;
                    let pi0 = norm_cdf(0.5 * df + m + o.selection_index[i]);
                    let mu0 = df + 0.5 * m + xb;
                    let pi = lerp(pi0, bounded(pi0, self.pi_hat[d].at(i, m)), t);
                    let mu = lerp(mu0, self.mu_hat[d].at(i, m), t);
                    inner += wq * (ratio(pi0 * (mu0 - mu), p * pi) + ratio(mu - nu, p));
                }
                total += sign(d) * (p0 * inner + nu);
            }
        }
        total / n as f64
    }
}

enum Probe {
    Mar(MarProbe),
    Iv(IvProbe),
    Dynamic(DynamicProbe),
}

impl Probe {
    fn g(&self, t: f64) -> f64 {
        match self {
            Probe::Mar(p) => p.g(t),
            Probe::Iv(p) => p.g(t),
            Probe::Dynamic(p) => p.g(t),
        }
    }
}

fn build(cfg: &ProbeConfig) -> Result<Probe> {
    let dgp = DgpConfig::design(cfg.design, cfg.n, cfg.seed);
    match (cfg.score, cfg.design) {
        (ProbeScore::Dynamic, Design::Dynamic) => {
            let (data, oracle) = draw_dynamic_dataset(&dgp)?;
            Ok(Probe::Dynamic(DynamicProbe::fit(&data, &oracle, cfg.seed)?))
        }
        (ProbeScore::Dynamic, _) => Err(Error::InvalidInput(
            "the dynamic probe needs the dynamic design".into(),
        )),
        (_, Design::Dynamic) => Err(Error::InvalidInput(format!(
            "no analytic oracle for the {} score under the dynamic design",
            cfg.score
        ))),
        (ProbeScore::Mar | ProbeScore::Ipw, _) => {
            let (data, oracle) = draw_dataset(&dgp)?;
            if oracle.rho_uv != 0.0 {
                return Err(Error::InvalidInput(format!(
                    "no analytic oracle for the {} score when selection is nonignorable; use design 1",
                    cfg.score
                )));
            }
            Ok(Probe::Mar(MarProbe::fit(
                &data,
                &oracle,
                cfg.seed,
                cfg.score == ProbeScore::Ipw,
            )?))
        }
        (ProbeScore::IvTotal | ProbeScore::IvSelected, _) => {
            let (data, oracle) = draw_dataset(&dgp)?;
            Ok(Probe::Iv(IvProbe::fit(
                &data,
                &oracle,
                cfg.seed,
                cfg.score == ProbeScore::IvSelected,
                cfg.perturb_control,
            )?))
        }
    }
}

/// Deviation table and log-log slope for one score.
pub fn orthogonality_probe(cfg: &ProbeConfig) -> Result<ProbeReport> {
    if cfg.ts.is_empty()
        || cfg
            .ts
            .iter()
            .any(|t| !t.is_finite() || *t < 0.0 || *t > 1.0)
    {
        return Err(Error::InvalidInput(
            "t grid must be nonempty with values in [0, 1]".into(),
        ));
    }
    let probe = build(cfg)?;
    let g0 = probe.g(0.0);
    let deviations: Vec<f64> = cfg
        .ts
        .iter()
        .map(|&t| {
            if t == 0.0 {
                0.0
            } else {
                (probe.g(t) - g0).abs()
            }
        })
        .collect();
    let points: Vec<(f64, f64)> = cfg
        .ts
        .iter()
        .copied()
        .zip(deviations.iter().copied())
        .collect();
    Ok(ProbeReport {
        score: cfg.score,
        design: cfg.design,
        n: cfg.n,
        seed: cfg.seed,
        g0,
        ts: cfg.ts.clone(),
        deviations,
        slope: log_log_slope(&points),
    })
}
