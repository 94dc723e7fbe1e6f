//! Potential-outcome and ATE estimates from cross-fitted scores.

use serde::{Deserialize, Serialize};

use crate::crossfit::{
    crossfit_dynamic, crossfit_iv, crossfit_mar, make_folds, NuisancePredictions, NuisanceSpecs,
};
use crate::dataset::SelectionDataset;
use crate::error::{Error, Result};
use crate::scores::{score, EstimatorKind, ScoreVector, DEFAULT_TRIM};
use crate::stats::{sample_sd, two_sided_p};

pub const DEFAULT_FOLDS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateConfig {
    pub estimator: EstimatorKind,
    pub d: usize,
    /// Comparison level for an ATE; `None` requests the mean potential outcome of `d`.
    pub d_prime: Option<usize>,
    pub k: usize,
    pub seed: u64,
    pub threshold: f64,
    pub specs: NuisanceSpecs,
}

impl EstimateConfig {
    pub fn new(estimator: EstimatorKind, d: usize, seed: u64) -> Self {
        EstimateConfig {
            estimator,
            d,
            d_prime: None,
            k: DEFAULT_FOLDS,
            seed,
            threshold: DEFAULT_TRIM,
            specs: NuisanceSpecs::default(),
        }
    }

    pub fn ate(estimator: EstimatorKind, d: usize, d_prime: usize, seed: u64) -> Self {
        EstimateConfig {
            d_prime: Some(d_prime),
            ..Self::new(estimator, d, seed)
        }
    }

    fn levels(&self) -> Vec<usize> {
        match self.d_prime {
            Some(dp) if dp != self.d => vec![self.d, dp],
            _ => vec![self.d],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub estimator: EstimatorKind,
    pub d: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_prime: Option<usize>,
    pub estimate: f64,
    pub se: f64,
    /// `None` when the standard error is zero.
    pub z: Option<f64>,
    pub p: f64,
    pub n_effective: usize,
    pub n_trimmed: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub seed: u64,
    pub threshold: f64,
}

/// Mean, standard error and counts of a score series (or a paired difference).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub estimate: f64,
    pub se: f64,
    pub n_effective: usize,
    pub n_trimmed: usize,
}

/// Averages `a` (minus `b`, row-wise, when given) over rows kept by both trim masks.
pub fn aggregate(a: &ScoreVector, b: Option<&ScoreVector>) -> Result<Aggregate> {
    let n = a.values.len();
    if let Some(b) = b {
        if b.values.len() != n {
            return Err(Error::Dimension("score vectors differ in length".into()));
        }
    }
    let mut series = Vec::with_capacity(n);
    let mut n_trimmed = 0;
    for i in 0..n {
        if !a.population[i] {
            continue;
        }
        let trimmed = a.trimmed[i] || b.is_some_and(|b| b.trimmed[i]);
        if trimmed {
            n_trimmed += 1;
            continue;
        }
        series.push(match b {
            Some(b) => a.values[i] - b.values[i],
            None => a.values[i],
        });
    }
    if series.is_empty() {
        return Err(Error::AllTrimmed);
    }
    let n_eff = series.len();
    let estimate = series.iter().sum::<f64>() / n_eff as f64;
    let se = sample_sd(&series) / (n_eff as f64).sqrt();
    Ok(Aggregate {
        estimate,
        se,
        n_effective: n_eff,
        n_trimmed,
    })
}

/// Normal-reference z-statistic and two-sided p-value; a zero SE gives no z and p in {0, 1}.
pub fn z_and_p(estimate: f64, se: f64) -> (Option<f64>, f64) {
    if se > 0.0 {
        let z = estimate / se;
        (Some(z), two_sided_p(z))
    } else if estimate == 0.0 {
        (None, 1.0)
    } else {
        (None, 0.0)
    }
}

pub fn crossfit_for(
    kind: EstimatorKind,
    data: &SelectionDataset,
    levels: &[usize],
    k: usize,
    seed: u64,
    specs: &NuisanceSpecs,
) -> Result<NuisancePredictions> {
    let plan = make_folds(data.n(), k, seed)?;
    match kind {
        EstimatorKind::Mar => crossfit_mar(data, &plan, specs, levels),
        EstimatorKind::IvTotal | EstimatorKind::IvSelected => {
            crossfit_iv(data, &plan, specs, levels)
        }
        EstimatorKind::Dynamic => crossfit_dynamic(data, &plan, specs, levels),
    }
}

fn check_config(data: &SelectionDataset, cfg: &EstimateConfig) -> Result<()> {
    if cfg.k < 2 {
        return Err(Error::InvalidInput(format!(
            "K must be at least 2, got {}",
            cfg.k
        )));
    }
    match cfg.estimator {
        EstimatorKind::IvTotal | EstimatorKind::IvSelected if data.instrument().is_none() => {
            return Err(Error::MissingChannel(
                "instrument (required by the IV estimators)",
            ))
        }
        EstimatorKind::Dynamic if data.post_covariates().is_none() => {
            return Err(Error::MissingChannel(
                "post-treatment covariates (required by the dynamic estimator)",
            ))
        }
        _ => {}
    }
    data.require_levels(&cfg.levels())
}

/// Evaluates scores on given predictions and aggregates them per `cfg` (the fold and
/// learner fields of `cfg` are only echoed).
pub fn estimate_from_predictions(
    data: &SelectionDataset,
    preds: &NuisancePredictions,
    cfg: &EstimateConfig,
) -> Result<EffectEstimate> {
    let sd = score(cfg.estimator, data, preds, cfg.d, cfg.threshold)?;
    let other = match cfg.d_prime {
        Some(dp) => Some(score(cfg.estimator, data, preds, dp, cfg.threshold)?),
        None => None,
    };
    let agg = aggregate(&sd, other.as_ref())?;
    let (z, p) = z_and_p(agg.estimate, agg.se);
    Ok(EffectEstimate {
        estimator: cfg.estimator,
        d: cfg.d,
        d_prime: cfg.d_prime,
        estimate: agg.estimate,
        se: agg.se,
        z,
        p,
        n_effective: agg.n_effective,
        n_trimmed: agg.n_trimmed,
        k: cfg.k,
        seed: cfg.seed,
        threshold: cfg.threshold,
    })
}

fn run(data: &SelectionDataset, cfg: &EstimateConfig) -> Result<EffectEstimate> {
    check_config(data, cfg)?;
    let preds = crossfit_for(
        cfg.estimator,
        data,
        &cfg.levels(),
        cfg.k,
        cfg.seed,
        &cfg.specs,
    )?;
    estimate_from_predictions(data, &preds, cfg)
}

/// Mean potential outcome of level `cfg.d`.
pub fn estimate_potential_outcome(
    data: &SelectionDataset,
    cfg: &EstimateConfig,
) -> Result<EffectEstimate> {
    let cfg = EstimateConfig {
        d_prime: None,
        ..cfg.clone()
    };
    run(data, &cfg)
}

/// `E[Y(d) - Y(d')]` from the paired per-row score difference.
pub fn estimate_ate(data: &SelectionDataset, cfg: &EstimateConfig) -> Result<EffectEstimate> {
    if cfg.d_prime.is_none() {
        return Err(Error::InvalidInput(
            "ATE requires a comparison level d'".into(),
        ));
    }
    run(data, cfg)
}

/// Dispatches on whether `cfg` names a comparison level.
pub fn estimate(data: &SelectionDataset, cfg: &EstimateConfig) -> Result<EffectEstimate> {
    match cfg.d_prime {
        Some(_) => estimate_ate(data, cfg),
        None => estimate_potential_outcome(data, cfg),
    }
}

/// Pretty JSON record of all fields.
pub fn summarize(est: &EffectEstimate) -> String {
    serde_json::to_string_pretty(est).expect("estimate serializes")
}

impl EffectEstimate {
    pub fn one_line(&self) -> String {
        let target = match self.d_prime {
            Some(dp) => format!("E[Y({})-Y({})]", self.d, dp),
            None => format!("E[Y({})]", self.d),
        };
        format!(
            "{} {target} = {:.6} (se {:.6}, p {:.4}, n_eff {}, trimmed {})",
            self.estimator, self.estimate, self.se, self.p, self.n_effective, self.n_trimmed
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(values: Vec<f64>) -> ScoreVector {
        let n = values.len();
        ScoreVector {
            estimator: EstimatorKind::Mar,
            level: 1,
            values,
            trimmed: vec![false; n],
            population: vec![true; n],
            n_effective: n,
        }
    }

    #[test]
    fn constant_scores_have_zero_se() {
        let agg = aggregate(&constant(vec![2.5; 10]), None).unwrap();
        assert_eq!(agg.estimate, 2.5);
        assert_eq!(agg.se, 0.0);
    }

    #[test]
    fn degenerate_z() {
        assert_eq!(z_and_p(0.3, 0.0), (None, 0.0));
        assert_eq!(z_and_p(0.0, 0.0), (None, 1.0));
        let (z, p) = z_and_p(1.959963984540054, 1.0);
        assert!((z.unwrap() - 1.959963984540054).abs() < 1e-15);
        assert!((p - 0.05).abs() < 1e-9);
    }

    #[test]
    fn trim_is_shared_across_levels() {
        let a = constant(vec![1.0, 2.0, 3.0]);
        let mut b = constant(vec![0.0, 0.0, 0.0]);
        b.trimmed[2] = true;
        let agg = aggregate(&a, Some(&b)).unwrap();
        assert_eq!(agg.n_effective, 2);
        assert_eq!(agg.n_trimmed, 1);
        assert_eq!(agg.estimate, 1.5);
    }

    #[test]
    fn all_trimmed_is_an_error() {
        let mut a = constant(vec![1.0]);
        a.trimmed[0] = true;
        assert!(matches!(aggregate(&a, None), Err(Error::AllTrimmed)));
    }
}
