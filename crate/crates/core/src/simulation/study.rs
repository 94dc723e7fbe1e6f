//! Monte Carlo replication study over the simulation designs.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crossfit::NuisanceSpecs;
use crate::dataset::SelectionDataset;
use crate::error::{Error, Result};
use crate::estimator::{estimate_ate, EffectEstimate, EstimateConfig, DEFAULT_FOLDS};
use crate::scores::{EstimatorKind, DEFAULT_TRIM};
use crate::stats::norm_quantile;

use super::dgp::{draw_dataset, draw_dynamic_dataset, Design, DgpConfig, DEFAULT_P};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub design: Design,
    pub n: usize,
    pub reps: usize,
    pub estimators: Vec<EstimatorKind>,
    /// Replication `r` (1-based) draws its data with seed `base_seed + r`.
    pub base_seed: u64,
    #[serde(default = "default_p")]
    pub p: usize,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_trim")]
    pub threshold: f64,
    #[serde(default)]
    pub specs: NuisanceSpecs,
}

fn default_p() -> usize {
    DEFAULT_P
}

fn default_k() -> usize {
    DEFAULT_FOLDS
}

fn default_trim() -> f64 {
    DEFAULT_TRIM
}

impl StudyConfig {
    pub fn new(
        design: Design,
        n: usize,
        reps: usize,
        estimators: Vec<EstimatorKind>,
        base_seed: u64,
    ) -> Self {
        StudyConfig {
            design,
            n,
            reps,
            estimators,
            base_seed,
            p: DEFAULT_P,
            k: DEFAULT_FOLDS,
            threshold: DEFAULT_TRIM,
            specs: NuisanceSpecs::default(),
        }
    }

    /// MAR and total-population IV for the main designs; dynamic and MAR for the dynamic one.
    pub fn default_estimators(design: Design) -> Vec<EstimatorKind> {
        match design {
            Design::Mar | Design::Iv => vec![EstimatorKind::Mar, EstimatorKind::IvTotal],
            Design::Dynamic => vec![EstimatorKind::Dynamic, EstimatorKind::Mar],
        }
    }

    fn validate(&self) -> Result<()> {
        if self.reps == 0 {
            return Err(Error::InvalidInput(
                "replications must be at least 1".into(),
            ));
        }
        if self.estimators.is_empty() {
            return Err(Error::InvalidInput("no estimators requested".into()));
        }
        self.dgp(0).validate()
    }

    fn dgp(&self, seed: u64) -> DgpConfig {
        DgpConfig {
            p: self.p,
            ..DgpConfig::design(self.design, self.n, seed)
        }
    }
}

/// Outcome of one estimator on one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub estimator: EstimatorKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimate: Option<EffectEstimate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replication {
    pub rep: usize,
    pub seed: u64,
    pub runs: Vec<RunOutcome>,
}

/// One row of the summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub design: Design,
    pub estimator: EstimatorKind,
    pub n: usize,
    #[serde(rename = "true")]
    pub true_effect: f64,
    pub bias: f64,
    /// Monte Carlo standard deviation (divisor R).
    pub sd: f64,
    #[serde(rename = "RMSE")]
    pub rmse: f64,
    #[serde(rename = "meanSE")]
    pub mean_se: f64,
    pub coverage: f64,
    pub reps: usize,
    pub failures: usize,
    pub trims: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimStudyReport {
    pub config: StudyConfig,
    pub true_effect: f64,
    pub rows: Vec<StudyRow>,
    pub replications: Vec<Replication>,
}

impl SimStudyReport {
    pub fn row(&self, estimator: EstimatorKind) -> Option<&StudyRow> {
        self.rows.iter().find(|r| r.estimator == estimator)
    }

    /// Point estimates of `estimator` per replication (`None` where it failed).
    pub fn estimates(&self, estimator: EstimatorKind) -> Vec<Option<f64>> {
        self.replications
            .iter()
            .map(|rep| {
                rep.runs
                    .iter()
                    .find(|r| r.estimator == estimator)
                    .and_then(|r| r.estimate.as_ref())
                    .map(|e| e.estimate)
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from(StudyRow::tsv_header());
        for r in &self.rows {
            out.push_str(&r.tsv_line());
        }
        out
    }
}

impl StudyRow {
    pub fn tsv_header() -> &'static str {
        "design\tn\testimator\ttrue\tbias\tsd\tRMSE\tmeanSE\tcoverage\treps\tfailures\ttrims\n"
    }

    pub fn tsv_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}\t{}\n",
            self.design,
            self.n,
            self.estimator,
            self.true_effect,
            self.bias,
            self.sd,
            self.rmse,
            self.mean_se,
            self.coverage,
            self.reps,
            self.failures,
            self.trims
        )
    }
}

fn draw(cfg: &StudyConfig, seed: u64) -> Result<SelectionDataset> {
    let dgp = cfg.dgp(seed);
    match cfg.design {
        Design::Dynamic => draw_dynamic_dataset(&dgp).map(|(d, _)| d),
        _ => draw_dataset(&dgp).map(|(d, _)| d),
    }
}

fn true_effect(cfg: &StudyConfig) -> f64 {
    match cfg.design {
        Design::Dynamic => 1.0 + 0.5 * cfg.dgp(0).delta_m,
        _ => 1.0,
    }
}

fn replicate(cfg: &StudyConfig, rep: usize) -> Replication {
    let seed = cfg.base_seed.wrapping_add(rep as u64);
    let runs = match draw(cfg, seed) {
        Ok(data) => cfg
            .estimators
            .iter()
            .map(|&kind| {
                let est_cfg = EstimateConfig {
                    k: cfg.k,
                    threshold: cfg.threshold,
                    specs: cfg.specs.clone(),
                    ..EstimateConfig::ate(kind, 1, 0, seed)
                };
                match estimate_ate(&data, &est_cfg) {
                    Ok(e) => RunOutcome {
                        estimator: kind,
                        estimate: Some(e),
                        error: None,
                    },
                    Err(e) => RunOutcome {
                        estimator: kind,
                        estimate: None,
                        error: Some(e.to_string()),
                    },
                }
            })
            .collect(),
        Err(e) => cfg
            .estimators
            .iter()
            .map(|&kind| RunOutcome {
                estimator: kind,
                estimate: None,
                error: Some(e.to_string()),
            })
            .collect(),
    };
    Replication { rep, seed, runs }
}

/// Summary statistics of one estimator's replications against `truth`.
pub fn summarize_runs(
    design: Design,
    n: usize,
    estimator: EstimatorKind,
    truth: f64,
    estimates: &[&EffectEstimate],
    failures: usize,
) -> StudyRow {
    let r = estimates.len();
    let (bias, sd, rmse, mean_se, coverage) = if r == 0 {
        (f64::NAN, f64::NAN, f64::NAN, f64::NAN, f64::NAN)
    } else {
        let rf = r as f64;
        let mean = estimates.iter().map(|e| e.estimate).sum::<f64>() / rf;
        let var = estimates
            .iter()
            .map(|e| (e.estimate - mean).powi(2))
            .sum::<f64>()
            / rf;
        let mse = estimates
            .iter()
            .map(|e| (e.estimate - truth).powi(2))
            .sum::<f64>()
            / rf;
        let crit = norm_quantile(0.975);
        let covered = estimates
            .iter()
            .filter(|e| (e.estimate - truth).abs() <= crit * e.se)
            .count();
        (
            mean - truth,
            var.sqrt(),
            mse.sqrt(),
            estimates.iter().map(|e| e.se).sum::<f64>() / rf,
            covered as f64 / rf,
        )
    };
    StudyRow {
        design,
        estimator,
        n,
        true_effect: truth,
        bias,
        sd,
        rmse,
        mean_se,
        coverage,
        reps: r,
        failures,
        trims: estimates.iter().map(|e| e.n_trimmed).sum(),
    }
}

/// Runs `cfg.reps` replications in parallel and reduces them in replication order.
pub fn run_design(cfg: &StudyConfig) -> Result<SimStudyReport> {
    cfg.validate()?;
    let replications: Vec<Replication> = (1..=cfg.reps)
        .into_par_iter()
        .map(|r| replicate(cfg, r))
        .collect();
    let truth = true_effect(cfg);
    let rows = cfg
        .estimators
        .iter()
        .map(|&kind| {
            let runs = replications
                .iter()
                .filter_map(|rep| rep.runs.iter().find(|r| r.estimator == kind));
            let (ok, failed): (Vec<_>, Vec<_>) = runs.partition(|r| r.estimate.is_some());
            let estimates: Vec<&EffectEstimate> =
                ok.iter().filter_map(|r| r.estimate.as_ref()).collect();
            summarize_runs(cfg.design, cfg.n, kind, truth, &estimates, failed.len())
        })
        .collect();
    Ok(SimStudyReport {
        config: cfg.clone(),
        true_effect: truth,
        rows,
        replications,
    })
}
