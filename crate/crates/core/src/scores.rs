//! Per-observation efficient scores and the common-support trimming rule.

use serde::{Deserialize, Serialize};

use crate::crossfit::{CrossfitKind, LevelPredictions, NuisancePredictions};
use crate::dataset::SelectionDataset;
use crate::error::{Error, Result};
use crate::learners::CLIP_EPS;

/// Default trimming threshold on the weight denominator.
pub const DEFAULT_TRIM: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    Mar,
    IvTotal,
    IvSelected,
    Dynamic,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 4] = [
        EstimatorKind::Mar,
        EstimatorKind::IvTotal,
        EstimatorKind::IvSelected,
        EstimatorKind::Dynamic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Mar => "mar",
            EstimatorKind::IvTotal => "iv-total",
            EstimatorKind::IvSelected => "iv-selected",
            EstimatorKind::Dynamic => "dynamic",
        }
    }

    pub fn crossfit_kind(self) -> CrossfitKind {
        match self {
            EstimatorKind::Mar => CrossfitKind::Mar,
            EstimatorKind::IvTotal | EstimatorKind::IvSelected => CrossfitKind::Iv,
            EstimatorKind::Dynamic => CrossfitKind::Dynamic,
        }
    }
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EstimatorKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown estimator {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub estimator: EstimatorKind,
    pub level: usize,
    /// Score per row; rows outside `population` hold 0.
    pub values: Vec<f64>,
    pub trimmed: Vec<bool>,
    /// Rows averaged over: all rows, or selected rows for the selected-population estimand.
    pub population: Vec<bool>,
    pub n_effective: usize,
}

impl ScoreVector {
    fn new(
        estimator: EstimatorKind,
        level: usize,
        values: Vec<f64>,
        trimmed: Vec<bool>,
        population: Vec<bool>,
    ) -> Self {
        let n_effective = population
            .iter()
            .zip(&trimmed)
            .filter(|(p, t)| **p && !**t)
            .count();
        ScoreVector {
            estimator,
            level,
            values,
            trimmed,
            population,
            n_effective,
        }
    }

    /// Rows that enter the average.
    pub fn included(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.values.len()).filter(|&i| self.population[i] && !self.trimmed[i])
    }

    pub fn n_trimmed(&self) -> usize {
        self.population
            .iter()
            .zip(&self.trimmed)
            .filter(|(p, t)| **p && **t)
            .count()
    }

    pub fn mean(&self) -> Option<f64> {
        if self.n_effective == 0 {
            return None;
        }
        Some(self.included().map(|i| self.values[i]).sum::<f64>() / self.n_effective as f64)
    }
}

/// Weight denominator of the inverse-probability term for row `i`.
pub fn weight_denominator(kind: EstimatorKind, lp: &LevelPredictions, i: usize) -> f64 {
    match kind {
        EstimatorKind::IvSelected => lp.treatment_prob[i],
        _ => lp.treatment_prob[i] * lp.selection_prob[i],
    }
}

fn check_threshold(threshold: f64) -> Result<()> {
    if !(0.0..1.0).contains(&threshold) {
        return Err(Error::InvalidInput(format!(
            "trimming threshold must lie in [0, 1), got {threshold}"
        )));
    }
    Ok(())
}

/// Rows whose weight denominator falls below `threshold`.
pub fn trim_mask(
    kind: EstimatorKind,
    preds: &NuisancePredictions,
    d: usize,
    threshold: f64,
) -> Result<Vec<bool>> {
    check_threshold(threshold)?;
    let lp = preds.level(d)?;
    Ok((0..preds.n())
        .map(|i| weight_denominator(kind, lp, i) < threshold)
        .collect())
}

fn check_rows(data: &SelectionDataset, preds: &NuisancePredictions) -> Result<()> {
    if data.n() != preds.n() {
        return Err(Error::Dimension(format!(
            "dataset has {} rows, predictions cover {}",
            data.n(),
            preds.n()
        )));
    }
    Ok(())
}

/// `S (Y - mu)` without reading the outcome of unselected rows.
fn selected_residual(data: &SelectionDataset, i: usize, mu: f64) -> f64 {
    match data.outcome(i) {
        Some(y) if data.selected(i) => y - mu,
        _ => 0.0,
    }
}

fn floored(x: f64) -> f64 {
    x.max(CLIP_EPS)
}

/// `1{D=d} S (Y - mu) / (p pi) + mu`.
pub fn score_mar(
    data: &SelectionDataset,
    preds: &NuisancePredictions,
    d: usize,
    threshold: f64,
) -> Result<ScoreVector> {
    doubly_robust(EstimatorKind::Mar, data, preds, d, threshold)
}

/// Same form as the MAR score, with mu and p conditioning on the control function and
/// pi on the instrument.
pub fn score_iv_total(
    data: &SelectionDataset,
    preds: &NuisancePredictions,
    d: usize,
    threshold: f64,
) -> Result<ScoreVector> {
    if preds.kind != CrossfitKind::Iv || preds.control.is_none() {
        return Err(Error::MissingChannel("instrument-based predictions"));
    }
    doubly_robust(EstimatorKind::IvTotal, data, preds, d, threshold)
}

fn doubly_robust(
    kind: EstimatorKind,
    data: &SelectionDataset,
    preds: &NuisancePredictions,
    d: usize,
    threshold: f64,
) -> Result<ScoreVector> {
    check_rows(data, preds)?;
    let trimmed = trim_mask(kind, preds, d, threshold)?;
    let lp = preds.level(d)?;
    let values = (0..data.n())
        .map(|i| {
            let mu = lp.outcome_mean[i];
            if data.treatment(i) != d {
                return mu;
            }
            selected_residual(data, i, mu) / floored(weight_denominator(kind, lp, i)) + mu
        })
        .collect();
    Ok(ScoreVector::new(
        kind,
        d,
        values,
        trimmed,
        vec![true; data.n()],
    ))
}

/// `1{D=d} (Y - mu) / p + mu`, averaged over selected rows only.
pub fn score_iv_selected(
    data: &SelectionDataset,
    preds: &NuisancePredictions,
    d: usize,
    threshold: f64,
) -> Result<ScoreVector> {
    check_rows(data, preds)?;
    if data.n_selected() == 0 {
        return Err(Error::InvalidInput(
            "no selected rows to average over".into(),
        ));
    }
    if preds.kind != CrossfitKind::Iv || preds.control.is_none() {
        return Err(Error::MissingChannel("instrument-based predictions"));
    }
    let kind = EstimatorKind::IvSelected;
    let trimmed = trim_mask(kind, preds, d, threshold)?;
    let lp = preds.level(d)?;
    let values = (0..data.n())
        .map(|i| {
            if !data.selected(i) {
                return 0.0;
            }
            let mu = lp.outcome_mean[i];
            if data.treatment(i) != d {
                return mu;
            }
            selected_residual(data, i, mu) / floored(lp.treatment_prob[i]) + mu
        })
        .collect();
    Ok(ScoreVector::new(
        kind,
        d,
        values,
        trimmed,
        data.selection().to_vec(),
    ))
}

/// `1{D=d} S (Y - mu) / (p pi) + 1{D=d} (mu - nu) / p + nu`.
pub fn score_dynamic(
    data: &SelectionDataset,
    preds: &NuisancePredictions,
    d: usize,
    threshold: f64,
) -> Result<ScoreVector> {
    check_rows(data, preds)?;
    let kind = EstimatorKind::Dynamic;
    let lp = preds.level(d)?;
    let nu = lp
        .nested_mean
        .as_ref()
        .ok_or(Error::MissingChannel("nested conditional mean"))?;
    let trimmed = trim_mask(kind, preds, d, threshold)?;
    let values = (0..data.n())
        .map(|i| {
            if data.treatment(i) != d {
                return nu[i];
            }
            let mu = lp.outcome_mean[i];
            let p = floored(lp.treatment_prob[i]);
            selected_residual(data, i, mu) / floored(p * lp.selection_prob[i])
                + (mu - nu[i]) / p
                + nu[i]
        })
        .collect();
    Ok(ScoreVector::new(
        kind,
        d,
        values,
        trimmed,
        vec![true; data.n()],
    ))
}

pub fn score(
    kind: EstimatorKind,
    data: &SelectionDataset,
    preds: &NuisancePredictions,
    d: usize,
    threshold: f64,
) -> Result<ScoreVector> {
    match kind {
        EstimatorKind::Mar => score_mar(data, preds, d, threshold),
        EstimatorKind::IvTotal => score_iv_total(data, preds, d, threshold),
        EstimatorKind::IvSelected => score_iv_selected(data, preds, d, threshold),
        EstimatorKind::Dynamic => score_dynamic(data, preds, d, threshold),
    }
}
