//! K-fold cross-fitting of the nuisance functions.
//!
//! Every prediction for a row comes from models trained on the complement of
//! that row's fold. The IV and dynamic variants further split each complement
//! into two halves so that a generated regressor (the selection control
//! function, or the fitted conditional mean) is never fitted on the rows that
//! consume it.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::SelectionDataset;
use crate::error::{Error, Result};
use crate::learners::{fit_lasso_linear, fit_lasso_logistic, FittedModel, LearnerSpec, CLIP_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Half {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub seed: u64,
    pub k: usize,
    /// Fold index of every row.
    pub assignment: Vec<usize>,
    /// `nested_half[k][i]` is the half of row `i` inside the complement of fold `k`
    /// (`None` for rows of fold `k` itself).
    pub nested_half: Vec<Vec<Option<Half>>>,
}

impl FoldPlan {
    pub fn n(&self) -> usize {
        self.assignment.len()
    }

    pub fn fold_rows(&self, k: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.assignment[i] == k).collect()
    }

    pub fn complement_rows(&self, k: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.assignment[i] != k).collect()
    }

    pub fn half_rows(&self, k: usize, half: Half) -> Vec<usize> {
        (0..self.n())
            .filter(|&i| self.nested_half[k][i] == Some(half))
            .collect()
    }
}

/// SplitMix64 finalizer, used to derive independent sub-seeds.
pub(crate) fn mix_seed(seed: u64, salt: &[u64]) -> u64 {
    let mut z = seed;
    for &s in salt {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(s);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Seeded random permutation cut into `k` contiguous blocks whose sizes differ by at most one.
pub fn make_folds(n: usize, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 || k > n {
        return Err(Error::InvalidInput(format!(
            "fold count must satisfy 2 <= K <= n, got K={k}, n={n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignment = vec![0; n];
    let (base, extra) = (n / k, n % k);
    let mut pos = 0;
    for fold in 0..k {
        let size = base + usize::from(fold < extra);
        for &i in &order[pos..pos + size] {
            assignment[i] = fold;
        }
        pos += size;
    }

    let nested_half = (0..k)
        .map(|fold| {
            let mut rows: Vec<usize> = (0..n).filter(|&i| assignment[i] != fold).collect();
            rows.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(
                seed,
                &[fold as u64],
            )));
            let mut half = vec![None; n];
            let cut = rows.len().div_ceil(2);
            for (pos, &i) in rows.iter().enumerate() {
                half[i] = Some(if pos < cut { Half::A } else { Half::B });
            }
            half
        })
        .collect();

    Ok(FoldPlan {
        seed,
        k,
        assignment,
        nested_half,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NuisanceSpecs {
    /// Conditional mean of the outcome, mu.
    pub outcome: LearnerSpec,
    /// Treatment propensity, p_d.
    pub treatment: LearnerSpec,
    /// Selection propensity, pi (also the control-function model in the IV variant).
    pub selection: LearnerSpec,
    /// Nested conditional mean, nu (dynamic variant).
    pub nested: LearnerSpec,
}

impl Default for NuisanceSpecs {
    fn default() -> Self {
        NuisanceSpecs {
            outcome: LearnerSpec::lasso_linear(),
            treatment: LearnerSpec::lasso_logistic(),
            selection: LearnerSpec::lasso_logistic(),
            nested: LearnerSpec::lasso_linear(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CrossfitKind {
    Mar,
    Iv,
    Dynamic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelPredictions {
    pub level: usize,
    /// mu(d, 1, .)
    pub outcome_mean: Vec<f64>,
    /// p_d(.)
    pub treatment_prob: Vec<f64>,
    /// pi(d, .)
    pub selection_prob: Vec<f64>,
    /// nu(d, 1, X), dynamic variant only.
    pub nested_mean: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NuisancePredictions {
    pub kind: CrossfitKind,
    pub levels: Vec<LevelPredictions>,
    /// Fitted selection probability at the observed treatment, IV variant only.
    pub control: Option<Vec<f64>>,
    /// Fold plan the predictions came from; `None` for externally supplied nuisances.
    pub plan: Option<FoldPlan>,
}

impl NuisancePredictions {
    pub fn n(&self) -> usize {
        self.levels.first().map_or(0, |l| l.treatment_prob.len())
    }

    pub fn levels(&self) -> &[LevelPredictions] {
        &self.levels
    }

    pub fn level(&self, d: usize) -> Result<&LevelPredictions> {
        self.levels
            .iter()
            .find(|l| l.level == d)
            .ok_or(Error::MissingChannel(
                "predictions for the requested treatment level",
            ))
    }
}

const ROLE_OUTCOME: u64 = 1;
const ROLE_TREATMENT: u64 = 2;
const ROLE_SELECTION: u64 = 3;
const ROLE_NESTED: u64 = 4;

fn seeded(spec: &LearnerSpec, plan_seed: u64, fold: usize, role: u64, level: usize) -> LearnerSpec {
    spec.clone()
        .with_seed(mix_seed(plan_seed, &[fold as u64, role, level as u64]))
}

/// Feature blocks for one estimator: covariates, optional extra matrix, optional extra column.
#[derive(Clone, Copy)]
struct Features<'a> {
    x: &'a DMatrix<f64>,
    m: Option<&'a DMatrix<f64>>,
    col: Option<&'a [f64]>,
}

impl<'a> Features<'a> {
    fn plain(x: &'a DMatrix<f64>) -> Self {
        Features {
            x,
            m: None,
            col: None,
        }
    }

    fn take(&self, rows: &[usize]) -> DMatrix<f64> {
        let p = self.x.ncols();
        let pm = self.m.map_or(0, |m| m.ncols());
        let width = p + pm + usize::from(self.col.is_some());
        DMatrix::from_fn(rows.len(), width, |r, c| {
            let i = rows[r];
            if c < p {
                self.x[(i, c)]
            } else if c < p + pm {
                self.m.expect("width includes m")[(i, c - p)]
            } else {
                self.col.expect("width includes column")[i]
            }
        })
    }
}

/// Treatment propensities for every level on the rows of `eval`.
struct TreatmentModel {
    models: Vec<FittedModel>,
    q: usize,
}

impl TreatmentModel {
    fn fit(
        x: &DMatrix<f64>,
        d: &[usize],
        q: usize,
        spec: &LearnerSpec,
        seed: u64,
        fold: usize,
    ) -> Result<Self> {
        let fit_level = |level: usize| {
            let labels: Vec<f64> = d.iter().map(|&v| f64::from(u8::from(v == level))).collect();
            fit_lasso_logistic(x, &labels, &seeded(spec, seed, fold, ROLE_TREATMENT, level))
        };
        let models = if q == 2 {
            vec![fit_level(1)?]
        } else {
            (0..q).map(fit_level).collect::<Result<_>>()?
        };
        Ok(TreatmentModel { models, q })
    }

    fn predict(&self, x: &DMatrix<f64>) -> Result<Vec<Vec<f64>>> {
        if self.q == 2 {
            let p1 = self.models[0].predict(x)?;
            let p0 = p1.iter().map(|p| 1.0 - p).collect();
            return Ok(vec![p0, p1]);
        }
        let raw: Vec<Vec<f64>> = self
            .models
            .iter()
            .map(|m| m.predict(x))
            .collect::<Result<_>>()?;
        let n = x.nrows();
        let q = self.q as f64;
        let mut out = vec![vec![0.0; n]; self.q];
        for i in 0..n {
            let total: f64 = raw.iter().map(|r| r[i]).sum();
            for (level, r) in raw.iter().enumerate() {
                // shrink toward uniform so every level keeps at least CLIP_EPS
                out[level][i] = (1.0 - q * CLIP_EPS) * r[i] / total + CLIP_EPS;
            }
        }
        Ok(out)
    }
}

fn outcomes_at(data: &SelectionDataset, rows: &[usize]) -> Vec<f64> {
    rows.iter()
        .map(|&i| data.outcome(i).expect("selected rows carry an outcome"))
        .collect()
}

fn selection_labels(data: &SelectionDataset, rows: &[usize]) -> Vec<f64> {
    rows.iter()
        .map(|&i| f64::from(u8::from(data.selected(i))))
        .collect()
}

fn cell(data: &SelectionDataset, rows: &[usize], d: usize, need_selected: bool) -> Vec<usize> {
    rows.iter()
        .copied()
        .filter(|&i| data.treatment(i) == d && (!need_selected || data.selected(i)))
        .collect()
}

fn nonempty(rows: Vec<usize>, fold: usize, level: usize, cell: &'static str) -> Result<Vec<usize>> {
    if rows.is_empty() {
        Err(Error::EmptyCell { fold, level, cell })
    } else {
        Ok(rows)
    }
}

/// Per-fold predictions on the fold's own rows.
struct FoldOutput {
    rows: Vec<usize>,
    levels: Vec<LevelPredictions>,
    control: Option<Vec<f64>>,
}

fn check_levels(data: &SelectionDataset, levels: &[usize]) -> Result<()> {
    if levels.is_empty() {
        return Err(Error::InvalidInput("no treatment levels requested".into()));
    }
    data.require_levels(levels)
}

fn check_plan(data: &SelectionDataset, plan: &FoldPlan) -> Result<()> {
    if plan.n() != data.n() {
        return Err(Error::Dimension(format!(
            "fold plan covers {} rows, dataset has {}",
            plan.n(),
            data.n()
        )));
    }
    Ok(())
}

fn merge(
    kind: CrossfitKind,
    plan: &FoldPlan,
    levels: &[usize],
    outputs: Vec<FoldOutput>,
) -> NuisancePredictions {
    let n = plan.n();
    let has_nested = outputs
        .iter()
        .any(|o| o.levels.iter().any(|l| l.nested_mean.is_some()));
    let has_control = outputs.iter().any(|o| o.control.is_some());
    let mut merged: Vec<LevelPredictions> = levels
        .iter()
        .map(|&level| LevelPredictions {
            level,
            outcome_mean: vec![0.0; n],
            treatment_prob: vec![0.0; n],
            selection_prob: vec![0.0; n],
            nested_mean: has_nested.then(|| vec![0.0; n]),
        })
        .collect();
    let mut control = has_control.then(|| vec![0.0; n]);
    for out in outputs {
        for (target, src) in merged.iter_mut().zip(&out.levels) {
            for (r, &i) in out.rows.iter().enumerate() {
                target.outcome_mean[i] = src.outcome_mean[r];
                target.treatment_prob[i] = src.treatment_prob[r];
                target.selection_prob[i] = src.selection_prob[r];
                if let (Some(t), Some(s)) = (target.nested_mean.as_mut(), src.nested_mean.as_ref())
                {
                    t[i] = s[r];
                }
            }
        }
        if let (Some(c), Some(src)) = (control.as_mut(), out.control.as_ref()) {
            for (r, &i) in out.rows.iter().enumerate() {
                c[i] = src[r];
            }
        }
    }
    NuisancePredictions {
        kind,
        levels: merged,
        control,
        plan: Some(plan.clone()),
    }
}

fn run_folds<F>(plan: &FoldPlan, f: F) -> Result<Vec<FoldOutput>>
where
    F: Fn(usize) -> Result<FoldOutput> + Sync + Send,
{
    (0..plan.k).into_par_iter().map(f).collect()
}

/// Algorithm with a plain split: every nuisance fitted on the full complement of each fold.
pub fn crossfit_mar(
    data: &SelectionDataset,
    plan: &FoldPlan,
    specs: &NuisanceSpecs,
    levels: &[usize],
) -> Result<NuisancePredictions> {
    check_plan(data, plan)?;
    check_levels(data, levels)?;
    let feats = Features::plain(data.covariates());
    let outputs = run_folds(plan, |k| {
        let train = plan.complement_rows(k);
        let eval = plan.fold_rows(k);
        let x_eval = feats.take(&eval);
        let d_train: Vec<usize> = train.iter().map(|&i| data.treatment(i)).collect();
        let treat = TreatmentModel::fit(
            &feats.take(&train),
            &d_train,
            data.q_levels(),
            &specs.treatment,
            plan.seed,
            k,
        )?;
        let probs = treat.predict(&x_eval)?;
        let mut out = Vec::with_capacity(levels.len());
        for &d in levels {
            let mu_rows = nonempty(cell(data, &train, d, true), k, d, "D=d, S=1")?;
            let mu = fit_lasso_linear(
                &feats.take(&mu_rows),
                &outcomes_at(data, &mu_rows),
                &seeded(&specs.outcome, plan.seed, k, ROLE_OUTCOME, d),
            )?;
            let pi_rows = nonempty(cell(data, &train, d, false), k, d, "D=d")?;
            let pi = fit_lasso_logistic(
                &feats.take(&pi_rows),
                &selection_labels(data, &pi_rows),
                &seeded(&specs.selection, plan.seed, k, ROLE_SELECTION, d),
            )?;
            out.push(LevelPredictions {
                level: d,
                outcome_mean: mu.predict(&x_eval)?,
                treatment_prob: probs[d].clone(),
                selection_prob: pi.predict(&x_eval)?,
                nested_mean: None,
            });
        }
        Ok(FoldOutput {
            rows: eval,
            levels: out,
            control: None,
        })
    })?;
    Ok(merge(CrossfitKind::Mar, plan, levels, outputs))
}

/// Instrument variant: half A fits the selection model on (X, Z) per treatment level;
/// its prediction at the observed treatment enters half B's outcome and treatment
/// models as an extra feature column.
pub fn crossfit_iv(
    data: &SelectionDataset,
    plan: &FoldPlan,
    specs: &NuisanceSpecs,
    levels: &[usize],
) -> Result<NuisancePredictions> {
    check_plan(data, plan)?;
    check_levels(data, levels)?;
    let z = data.instrument().ok_or(Error::MissingChannel(
        "instrument (required by the IV estimators)",
    ))?;
    let zcol = DMatrix::from_column_slice(data.n(), 1, z);
    let xz = Features {
        x: data.covariates(),
        m: Some(&zcol),
        col: None,
    };
    let outputs = run_folds(plan, |k| {
        let half_a = plan.half_rows(k, Half::A);
        let half_b = plan.half_rows(k, Half::B);
        let eval = plan.fold_rows(k);

        // selection model per observed level, fitted on half A
        let mut pi_models: Vec<Option<FittedModel>> = vec![None; data.q_levels()];
        for (d, slot) in pi_models.iter_mut().enumerate() {
            let rows = cell(data, &half_a, d, false);
            let required =
                levels.contains(&d) || half_b.iter().chain(&eval).any(|&i| data.treatment(i) == d);
            if !required {
                continue;
            }
            let rows = nonempty(rows, k, d, "D=d in the control-function half")?;
            *slot = Some(fit_lasso_logistic(
                &xz.take(&rows),
                &selection_labels(data, &rows),
                &seeded(&specs.selection, plan.seed, k, ROLE_SELECTION, d),
            )?);
        }
        let pi_model = |d: usize| {
            pi_models[d]
                .as_ref()
                .expect("fitted for every needed level")
        };

        // control function at the observed treatment, on half B and on the fold
        let mut control = vec![f64::NAN; data.n()];
        for rows in [&half_b, &eval] {
            for d in 0..data.q_levels() {
                let r = cell(data, rows, d, false);
                if r.is_empty() {
                    continue;
                }
                for (i, v) in r.iter().zip(pi_model(d).predict(&xz.take(&r))?) {
                    control[*i] = v;
                }
            }
        }
        let feats = Features {
            x: data.covariates(),
            m: None,
            col: Some(&control),
        };
        let x_eval = feats.take(&eval);
        let d_b: Vec<usize> = half_b.iter().map(|&i| data.treatment(i)).collect();
        let treat = TreatmentModel::fit(
            &feats.take(&half_b),
            &d_b,
            data.q_levels(),
            &specs.treatment,
            plan.seed,
            k,
        )?;
        let probs = treat.predict(&x_eval)?;
        let xz_eval = xz.take(&eval);

        let mut out = Vec::with_capacity(levels.len());
        for &d in levels {
            let mu_rows = nonempty(
                cell(data, &half_b, d, true),
                k,
                d,
                "D=d, S=1 in the outcome half",
            )?;
            let mu = fit_lasso_linear(
                &feats.take(&mu_rows),
                &outcomes_at(data, &mu_rows),
                &seeded(&specs.outcome, plan.seed, k, ROLE_OUTCOME, d),
            )?;
            out.push(LevelPredictions {
                level: d,
                outcome_mean: mu.predict(&x_eval)?,
                treatment_prob: probs[d].clone(),
                selection_prob: pi_model(d).predict(&xz_eval)?,
                nested_mean: None,
            });
        }
        let fold_control = eval.iter().map(|&i| control[i]).collect();
        Ok(FoldOutput {
            rows: eval,
            levels: out,
            control: Some(fold_control),
        })
    })?;
    Ok(merge(CrossfitKind::Iv, plan, levels, outputs))
}

/// Dynamic variant: half A fits mu(d, 1, X, M); half B regresses half A's fitted
/// means on X to obtain the nested mean nu(d, 1, X).
pub fn crossfit_dynamic(
    data: &SelectionDataset,
    plan: &FoldPlan,
    specs: &NuisanceSpecs,
    levels: &[usize],
) -> Result<NuisancePredictions> {
    check_plan(data, plan)?;
    check_levels(data, levels)?;
    let m = data.post_covariates().ok_or(Error::MissingChannel(
        "post-treatment covariates (required by the dynamic estimator)",
    ))?;
    let xm = Features {
        x: data.covariates(),
        m: Some(m),
        col: None,
    };
    let x_only = Features::plain(data.covariates());
    let outputs = run_folds(plan, |k| {
        let train = plan.complement_rows(k);
        let half_a = plan.half_rows(k, Half::A);
        let half_b = plan.half_rows(k, Half::B);
        let eval = plan.fold_rows(k);
        let x_eval = x_only.take(&eval);
        let xm_eval = xm.take(&eval);

        let d_train: Vec<usize> = train.iter().map(|&i| data.treatment(i)).collect();
        let treat = TreatmentModel::fit(
            &x_only.take(&train),
            &d_train,
            data.q_levels(),
            &specs.treatment,
            plan.seed,
            k,
        )?;
        let probs = treat.predict(&x_eval)?;

        let mut out = Vec::with_capacity(levels.len());
        for &d in levels {
            let pi_rows = nonempty(cell(data, &train, d, false), k, d, "D=d")?;
            let pi = fit_lasso_logistic(
                &xm.take(&pi_rows),
                &selection_labels(data, &pi_rows),
                &seeded(&specs.selection, plan.seed, k, ROLE_SELECTION, d),
            )?;
            let mu_rows = nonempty(
                cell(data, &half_a, d, true),
                k,
                d,
                "D=d, S=1 in the outcome half",
            )?;
            let mu = fit_lasso_linear(
                &xm.take(&mu_rows),
                &outcomes_at(data, &mu_rows),
                &seeded(&specs.outcome, plan.seed, k, ROLE_OUTCOME, d),
            )?;
            let nu_rows = nonempty(
                cell(data, &half_b, d, false),
                k,
                d,
                "D=d in the nested-mean half",
            )?;
            let nu = fit_lasso_linear(
                &x_only.take(&nu_rows),
                &mu.predict(&xm.take(&nu_rows))?,
                &seeded(&specs.nested, plan.seed, k, ROLE_NESTED, d),
            )?;
            out.push(LevelPredictions {
                level: d,
                outcome_mean: mu.predict(&xm_eval)?,
                treatment_prob: probs[d].clone(),
                selection_prob: pi.predict(&xm_eval)?,
                nested_mean: Some(nu.predict(&x_eval)?),
            });
        }
        Ok(FoldOutput {
            rows: eval,
            levels: out,
            control: None,
        })
    })?;
    Ok(merge(CrossfitKind::Dynamic, plan, levels, outputs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fold_sizes_balanced() {
        let plan = make_folds(7, 3, 1).unwrap();
        let mut sizes: Vec<usize> = (0..3).map(|k| plan.fold_rows(k).len()).collect();
        sizes.sort();
        assert_eq!(sizes, vec![2, 2, 3]);
        for k in 0..3 {
            let a = plan.half_rows(k, Half::A).len();
            let b = plan.half_rows(k, Half::B).len();
            assert_eq!(a + b, plan.complement_rows(k).len());
            assert!(a.abs_diff(b) <= 1);
        }
    }

    #[test]
    fn fold_count_bounds() {
        assert!(make_folds(5, 1, 0).is_err());
        assert!(make_folds(5, 6, 0).is_err());
        assert!(make_folds(5, 5, 0).is_ok());
    }

    #[test]
    fn mix_seed_depends_on_salt() {
        assert_ne!(mix_seed(1, &[0]), mix_seed(1, &[1]));
        assert_eq!(mix_seed(1, &[2, 3]), mix_seed(1, &[2, 3]));
    }
}
