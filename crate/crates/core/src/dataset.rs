//! Selection-structured observational data: typed container, CSV ingestion,
//! covariate standardization and common-support diagnostics.
//!
//! A row carries an outcome that is observed only when the row is selected,
//! a binary selection flag, a discrete treatment level, baseline covariates,
//! and optionally post-treatment covariates and an instrument for selection.
//! Unselected rows never expose an outcome value.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::crossfit::NuisancePredictions;
use crate::error::{Error, Result};

/// Immutable, validated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionDataset {
    outcome: Vec<Option<f64>>,
    selection: Vec<bool>,
    treatment: Vec<usize>,
    levels: usize,
    covariates: DMatrix<f64>,
    post_covariates: Option<DMatrix<f64>>,
    instrument: Option<Vec<f64>>,
}

/// Raw columns handed to [`SelectionDataset::new`].
#[derive(Debug, Clone)]
pub struct DatasetParts {
    /// Outcome per row; ignored (and dropped) where the row is not selected.
    pub outcome: Vec<Option<f64>>,
    pub selection: Vec<bool>,
    pub treatment: Vec<i64>,
    /// Declared number of treatment levels, i.e. levels are `0..levels`.
    pub levels: usize,
    pub covariates: DMatrix<f64>,
    pub post_covariates: Option<DMatrix<f64>>,
    pub instrument: Option<Vec<f64>>,
}

impl SelectionDataset {
    pub fn new(parts: DatasetParts) -> Result<Self> {
        let DatasetParts {
            outcome,
            selection,
            treatment,
            levels,
            covariates,
            post_covariates,
            instrument,
        } = parts;
        let n = selection.len();
        if n == 0 {
            return Err(Error::InvalidInput("dataset has no rows".into()));
        }
        if levels < 2 {
            return Err(Error::InvalidInput(format!(
                "at least two treatment levels are required, got {levels}"
            )));
        }
        if outcome.len() != n || treatment.len() != n || covariates.nrows() != n {
            return Err(Error::Dimension(format!(
                "row counts disagree: selection {n}, outcome {}, treatment {}, covariates {}",
                outcome.len(),
                treatment.len(),
                covariates.nrows()
            )));
        }
        if covariates.ncols() == 0 {
            return Err(Error::InvalidInput("no covariate columns".into()));
        }
        if covariates.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("covariates"));
        }
        if let Some(m) = &post_covariates {
            if m.nrows() != n {
                return Err(Error::Dimension(format!(
                    "post-treatment covariates have {} rows, expected {n}",
                    m.nrows()
                )));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("post-treatment covariates"));
            }
        }
        if let Some(z) = &instrument {
            if z.len() != n {
                return Err(Error::Dimension(format!(
                    "instrument has {} rows, expected {n}",
                    z.len()
                )));
            }
            if z.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("instrument"));
            }
        }

        let mut levels_out = Vec::with_capacity(n);
        for (row, &d) in treatment.iter().enumerate() {
            if d < 0 || d as usize >= levels {
                return Err(Error::TreatmentOutOfRange {
                    row,
                    value: d,
                    levels,
                });
            }
            levels_out.push(d as usize);
        }

        let mut clean = Vec::with_capacity(n);
        for (row, (y, &s)) in outcome.into_iter().zip(&selection).enumerate() {
            if s {
                match y {
                    Some(v) if v.is_finite() => clean.push(Some(v)),
                    Some(_) => return Err(Error::NonFinite("outcome")),
                    None => return Err(Error::MissingOutcome { row }),
                }
            } else {
                clean.push(None);
            }
        }

        Ok(SelectionDataset {
            outcome: clean,
            selection,
            treatment: levels_out,
            levels,
            covariates,
            post_covariates,
            instrument,
        })
    }

    pub fn n(&self) -> usize {
        self.selection.len()
    }

    /// Number of declared treatment levels (`Q + 1`).
    pub fn q_levels(&self) -> usize {
        self.levels
    }

    pub fn outcome(&self, row: usize) -> Option<f64> {
        self.outcome[row]
    }

    pub fn outcomes(&self) -> &[Option<f64>] {
        &self.outcome
    }

    pub fn selected(&self, row: usize) -> bool {
        self.selection[row]
    }

    pub fn selection(&self) -> &[bool] {
        &self.selection
    }

    pub fn treatment(&self, row: usize) -> usize {
        self.treatment[row]
    }

    pub fn treatments(&self) -> &[usize] {
        &self.treatment
    }

    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.covariates
    }

    pub fn post_covariates(&self) -> Option<&DMatrix<f64>> {
        self.post_covariates.as_ref()
    }

    pub fn instrument(&self) -> Option<&[f64]> {
        self.instrument.as_deref()
    }

    pub fn n_selected(&self) -> usize {
        self.selection.iter().filter(|&&s| s).count()
    }

    /// Fails unless every level in `levels` is declared and occurs at least once.
    pub fn require_levels(&self, levels: &[usize]) -> Result<()> {
        let present: BTreeSet<usize> = self.treatment.iter().copied().collect();
        for &d in levels {
            if d >= self.levels || !present.contains(&d) {
                return Err(Error::AbsentLevel(d));
            }
        }
        Ok(())
    }

    pub(crate) fn with_covariates(
        &self,
        covariates: DMatrix<f64>,
        post_covariates: Option<DMatrix<f64>>,
    ) -> Self {
        SelectionDataset {
            covariates,
            post_covariates,
            ..self.clone()
        }
    }
}

/// Column-role mapping for CSV files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnSchema {
    pub outcome: String,
    pub selection: String,
    pub treatment: String,
    /// Declared number of treatment levels; valid treatment values are `0..treatment_levels`.
    pub treatment_levels: usize,
    pub covariates: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub post_covariates: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instrument: Option<String>,
}

impl ColumnSchema {
    pub fn from_toml_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Schema(e.to_string()))
    }

    fn validate(&self) -> Result<()> {
        if self.covariates.is_empty() {
            return Err(Error::Schema("no covariate columns named".into()));
        }
        let mut seen = BTreeSet::new();
        let all = [&self.outcome, &self.selection, &self.treatment]
            .into_iter()
            .chain(&self.covariates)
            .chain(&self.post_covariates)
            .chain(self.instrument.as_ref());
        for name in all {
            if !seen.insert(name.as_str()) {
                return Err(Error::Schema(format!("column {name:?} assigned twice")));
            }
        }
        Ok(())
    }
}

fn parse_number(cell: &str, row: usize, column: &str) -> Result<f64> {
    cell.trim().parse::<f64>().map_err(|_| Error::NonNumeric {
        row,
        column: column.to_string(),
        value: cell.to_string(),
    })
}

/// Reads a CSV file with a header row according to `schema`.
///
/// Row numbers in errors are zero-based data rows (the header is not counted).
pub fn load_csv(path: impl AsRef<Path>, schema: &ColumnSchema) -> Result<SelectionDataset> {
    schema.validate()?;
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| Error::Csv(e.to_string()))?
        .clone();
    let index_of = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Schema(format!("column {name:?} not found in header")))
    };
    let y_col = index_of(&schema.outcome)?;
    let s_col = index_of(&schema.selection)?;
    let d_col = index_of(&schema.treatment)?;
    let x_cols = schema
        .covariates
        .iter()
        .map(|c| index_of(c))
        .collect::<Result<Vec<_>>>()?;
    let m_cols = schema
        .post_covariates
        .iter()
        .map(|c| index_of(c))
        .collect::<Result<Vec<_>>>()?;
    let z_col = schema.instrument.as_deref().map(index_of).transpose()?;

    let mut outcome = Vec::new();
    let mut selection = Vec::new();
    let mut treatment = Vec::new();
    let mut x_rows: Vec<f64> = Vec::new();
    let mut m_rows: Vec<f64> = Vec::new();
    let mut z = Vec::new();

    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Csv(e.to_string()))?;
        let cell = |i: usize| record.get(i).unwrap_or("");

        let s_raw = parse_number(cell(s_col), row, &schema.selection)?;
        let s = if s_raw == 1.0 {
            true
        } else if s_raw == 0.0 {
            false
        } else {
            return Err(Error::InvalidInput(format!(
                "row {row}: selection must be 0 or 1, got {s_raw}"
            )));
        };
        let y_cell = cell(y_col).trim();
        let y = if y_cell.is_empty() {
            None
        } else if s {
            Some(parse_number(y_cell, row, &schema.outcome)?)
        } else {
            // unobserved outcomes are never read
            None
        };
        if s && y.is_none() {
            return Err(Error::MissingOutcome { row });
        }
        let d_raw = parse_number(cell(d_col), row, &schema.treatment)?;
        if d_raw.fract() != 0.0 {
            return Err(Error::InvalidInput(format!(
                "row {row}: treatment must be an integer, got {d_raw}"
            )));
        }
        let d = d_raw as i64;
        if d < 0 || d as usize >= schema.treatment_levels {
            return Err(Error::TreatmentOutOfRange {
                row,
                value: d,
                levels: schema.treatment_levels,
            });
        }
        for (&c, name) in x_cols.iter().zip(&schema.covariates) {
            x_rows.push(parse_number(cell(c), row, name)?);
        }
        for (&c, name) in m_cols.iter().zip(&schema.post_covariates) {
            m_rows.push(parse_number(cell(c), row, name)?);
        }
        if let (Some(c), Some(name)) = (z_col, schema.instrument.as_deref()) {
            z.push(parse_number(cell(c), row, name)?);
        }
        outcome.push(y);
        selection.push(s);
        treatment.push(d);
    }

    let n = selection.len();
    let covariates = DMatrix::from_row_slice(n, x_cols.len(), &x_rows);
    let post_covariates =
        (!m_cols.is_empty()).then(|| DMatrix::from_row_slice(n, m_cols.len(), &m_rows));
    SelectionDataset::new(DatasetParts {
        outcome,
        selection,
        treatment,
        levels: schema.treatment_levels,
        covariates,
        post_covariates,
        instrument: z_col.map(|_| z),
    })
}

/// Writes `data` as CSV with the column names of `schema`. Unselected rows get an empty outcome cell.
///
/// Values are written in their shortest round-tripping decimal form, so
/// [`load_csv`] on the output reproduces every finite value exactly.
pub fn write_csv(
    data: &SelectionDataset,
    schema: &ColumnSchema,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let p = data.covariates.ncols();
    let pm = data.post_covariates.as_ref().map_or(0, |m| m.ncols());
    if schema.covariates.len() != p || schema.post_covariates.len() != pm {
        return Err(Error::Schema(
            "schema column counts do not match the dataset".into(),
        ));
    }
    if schema.instrument.is_some() != data.instrument.is_some() {
        return Err(Error::Schema(
            "instrument column does not match the dataset".into(),
        ));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    let mut header: Vec<&str> = vec![&schema.outcome, &schema.selection, &schema.treatment];
    header.extend(schema.covariates.iter().map(String::as_str));
    header.extend(schema.post_covariates.iter().map(String::as_str));
    header.extend(schema.instrument.as_deref());
    let io = |e| Error::io(path, e);
    writeln!(out, "{}", header.join(",")).map_err(io)?;
    for i in 0..data.n() {
        let mut cells: Vec<String> = Vec::with_capacity(header.len());
        cells.push(data.outcome[i].map(|y| y.to_string()).unwrap_or_default());
        cells.push(u8::from(data.selection[i]).to_string());
        cells.push(data.treatment[i].to_string());
        cells.extend((0..p).map(|j| data.covariates[(i, j)].to_string()));
        if let Some(m) = &data.post_covariates {
            cells.extend((0..pm).map(|j| m[(i, j)].to_string()));
        }
        if let Some(z) = &data.instrument {
            cells.push(z[i].to_string());
        }
        writeln!(out, "{}", cells.join(",")).map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Target standard deviation of standardized covariate columns.
pub const STANDARDIZED_SD: f64 = 0.5;

/// Per-column affine map to mean 0 and sd [`STANDARDIZED_SD`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnRecipe {
    pub means: Vec<f64>,
    /// Sample sd (n - 1) of each original column.
    pub sds: Vec<f64>,
    /// Columns with zero sample variance; passed through unchanged.
    pub constant: Vec<usize>,
}

impl ColumnRecipe {
    pub fn fit(m: &DMatrix<f64>) -> Self {
        let n = m.nrows() as f64;
        let mut means = Vec::with_capacity(m.ncols());
        let mut sds = Vec::with_capacity(m.ncols());
        let mut constant = Vec::new();
        for (j, col) in m.column_iter().enumerate() {
            let mean = col.sum() / n;
            let ss: f64 = col.iter().map(|v| (v - mean) * (v - mean)).sum();
            let sd = if m.nrows() > 1 {
                (ss / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            let first = col[0];
            if sd == 0.0 || col.iter().all(|&v| v == first) {
                constant.push(j);
            }
            means.push(mean);
            sds.push(sd);
        }
        ColumnRecipe {
            means,
            sds,
            constant,
        }
    }

    fn is_constant(&self, j: usize) -> bool {
        self.constant.binary_search(&j).is_ok()
    }

    pub fn apply(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = m.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            if self.is_constant(j) {
                continue;
            }
            let scale = STANDARDIZED_SD / self.sds[j];
            col.apply(|v| *v = (*v - self.means[j]) * scale);
        }
        out
    }

    pub fn invert(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = m.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            if self.is_constant(j) {
                continue;
            }
            let scale = self.sds[j] / STANDARDIZED_SD;
            col.apply(|v| *v = *v * scale + self.means[j]);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationRecipe {
    pub covariates: ColumnRecipe,
    pub post_covariates: Option<ColumnRecipe>,
}

impl StandardizationRecipe {
    pub fn apply(&self, data: &SelectionDataset) -> SelectionDataset {
        let x = self.covariates.apply(&data.covariates);
        let m = match (&self.post_covariates, &data.post_covariates) {
            (Some(r), Some(m)) => Some(r.apply(m)),
            (_, m) => m.clone(),
        };
        data.with_covariates(x, m)
    }

    pub fn invert(&self, data: &SelectionDataset) -> SelectionDataset {
        let x = self.covariates.invert(&data.covariates);
        let m = match (&self.post_covariates, &data.post_covariates) {
            (Some(r), Some(m)) => Some(r.invert(m)),
            (_, m) => m.clone(),
        };
        data.with_covariates(x, m)
    }
}

/// Maps every non-constant covariate (and post-treatment covariate) column to
/// sample mean 0 and sample sd 0.5. Outcome, selection and treatment are untouched.
pub fn standardize(data: &SelectionDataset) -> (SelectionDataset, StandardizationRecipe) {
    let recipe = StandardizationRecipe {
        covariates: ColumnRecipe::fit(&data.covariates),
        post_covariates: data.post_covariates.as_ref().map(ColumnRecipe::fit),
    };
    (recipe.apply(data), recipe)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSupport {
    pub level: usize,
    pub min: f64,
    pub q05: f64,
    pub q25: f64,
    pub median: f64,
    pub below_threshold: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportReport {
    pub threshold: f64,
    pub levels: Vec<LevelSupport>,
    /// Rows below the threshold for at least one level.
    pub trim_count: usize,
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let w = pos - lo as f64;
    sorted[lo] * (1.0 - w) + sorted[hi] * w
}

/// Summarizes the products `p_d(X) * pi(d, X)` per level and counts rows below `threshold`.
pub fn support_diagnostics(preds: &NuisancePredictions, threshold: f64) -> SupportReport {
    let n = preds.n();
    let mut flagged = vec![false; n];
    let mut levels = Vec::new();
    for lp in preds.levels() {
        let products: Vec<f64> = lp
            .treatment_prob
            .iter()
            .zip(&lp.selection_prob)
            .map(|(p, s)| p * s)
            .collect();
        let mut below = 0;
        for (i, &v) in products.iter().enumerate() {
            if v < threshold {
                below += 1;
                flagged[i] = true;
            }
        }
        let mut sorted = products;
        sorted.sort_by(f64::total_cmp);
        levels.push(LevelSupport {
            level: lp.level,
            min: sorted[0],
            q05: quantile_sorted(&sorted, 0.05),
            q25: quantile_sorted(&sorted, 0.25),
            median: quantile_sorted(&sorted, 0.5),
            below_threshold: below,
        });
    }
    SupportReport {
        threshold,
        levels,
        trim_count: flagged.iter().filter(|&&f| f).count(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parts(n: usize) -> DatasetParts {
        DatasetParts {
            outcome: (0..n).map(|i| Some(i as f64)).collect(),
            selection: vec![true; n],
            treatment: (0..n).map(|i| (i % 2) as i64).collect(),
            levels: 2,
            covariates: DMatrix::from_fn(n, 2, |i, j| (i * (j + 1)) as f64),
            post_covariates: None,
            instrument: None,
        }
    }

    #[test]
    fn unselected_outcomes_are_dropped() {
        let mut p = parts(4);
        p.selection[1] = false;
        let ds = SelectionDataset::new(p).unwrap();
        assert_eq!(ds.outcome(1), None);
        assert_eq!(ds.outcome(2), Some(2.0));
        assert_eq!(ds.n_selected(), 3);
    }

    #[test]
    fn rejects_invariant_violations() {
        let mut p = parts(4);
        p.outcome[2] = None;
        assert!(matches!(
            SelectionDataset::new(p),
            Err(Error::MissingOutcome { row: 2 })
        ));

        let mut p = parts(4);
        p.treatment[3] = 2;
        assert!(matches!(
            SelectionDataset::new(p),
            Err(Error::TreatmentOutOfRange {
                row: 3,
                value: 2,
                ..
            })
        ));

        let mut p = parts(4);
        p.covariates[(0, 0)] = f64::NAN;
        assert!(matches!(SelectionDataset::new(p), Err(Error::NonFinite(_))));

        let mut p = parts(4);
        p.instrument = Some(vec![0.0; 3]);
        assert!(matches!(SelectionDataset::new(p), Err(Error::Dimension(_))));
    }

    #[test]
    fn absent_requested_level_fails_early() {
        let mut p = parts(4);
        p.levels = 3;
        let ds = SelectionDataset::new(p).unwrap();
        assert!(ds.require_levels(&[0, 1]).is_ok());
        assert!(matches!(
            ds.require_levels(&[2]),
            Err(Error::AbsentLevel(2))
        ));
    }

    #[test]
    fn standardize_small_column() {
        let mut p = parts(3);
        p.covariates = DMatrix::from_column_slice(3, 2, &[1.0, 2.0, 3.0, 5.0, 5.0, 5.0]);
        let ds = SelectionDataset::new(p).unwrap();
        let (std, recipe) = standardize(&ds);
        let col = std.covariates().column(0);
        let mean = col.sum() / 3.0;
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 2.0).sqrt();
        assert!(mean.abs() < 1e-10);
        assert!((sd - 0.5).abs() < 1e-10);
        assert_eq!(recipe.covariates.constant, vec![1]);
        assert_eq!(std.covariates().column(1).as_slice(), &[5.0, 5.0, 5.0]);
        assert_eq!(std.outcomes(), ds.outcomes());
        assert_eq!(std.treatments(), ds.treatments());
    }

    #[test]
    fn quantiles_interpolate() {
        let v = [0.0, 1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&v, 0.5), 2.0);
        assert_eq!(quantile_sorted(&v, 0.25), 1.0);
        assert!((quantile_sorted(&v, 0.05) - 0.2).abs() < 1e-15);
    }
}
