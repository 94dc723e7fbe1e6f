use std::io::Write;

use nalgebra::DMatrix;
use proptest::prelude::*;
use selection_dml::dataset::{write_csv, ColumnRecipe, DatasetParts};
use selection_dml::{load_csv, standardize, ColumnSchema, Error, SelectionDataset};

fn schema() -> ColumnSchema {
    ColumnSchema {
        outcome: "y".into(),
        selection: "s".into(),
        treatment: "d".into(),
        treatment_levels: 2,
        covariates: vec!["x1".into(), "x2".into()],
        post_covariates: Vec::new(),
        instrument: None,
    }
}

fn write_file(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
    let path = dir.path().join(name);
    std::fs::File::create(&path)
        .unwrap()
        .write_all(body.as_bytes())
        .unwrap();
    path
}

fn sample_sd(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

#[test]
fn well_formed_file_loads() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_file(
        &dir,
        "ok.csv",
        "y,s,d,x1,x2\n1.5,1,0,0.1,2\n2,1,1,0.2,3\n-1,1,0,0.3,1\n0,1,1,0.4,0\n3.25,1,0,0.5,-1\n7,1,1,0.6,5\n",
    );
    let data = load_csv(&path, &schema()).unwrap();
    assert_eq!(data.n(), 6);
    assert_eq!(data.q_levels(), 2);
    assert_eq!(data.outcome(4), Some(3.25));
    assert_eq!(data.covariates()[(5, 1)], 5.0);
}

#[test]
fn unselected_rows_may_leave_outcome_empty() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_file(&dir, "ok.csv", "y,s,d,x1,x2\n,0,1,0.1,2\n2,1,0,0.2,3\n");
    let data = load_csv(&path, &schema()).unwrap();
    assert_eq!(data.outcome(0), None);
    assert!(!data.selected(0));
}

#[test]
fn selected_row_without_outcome_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_file(&dir, "bad.csv", "y,s,d,x1,x2\n1,1,0,0.1,2\n,1,1,0.2,3\n");
    let err = load_csv(&path, &schema()).unwrap_err();
    assert!(matches!(err, Error::MissingOutcome { row: 1 }));
    assert!(err.to_string().contains("outcome missing on selected row"));
}

#[test]
fn undeclared_treatment_level_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_file(&dir, "bad.csv", "y,s,d,x1,x2\n1,1,0,0.1,2\n1,1,2,0.2,3\n");
    let err = load_csv(&path, &schema()).unwrap_err();
    assert!(err.to_string().contains("treatment level out of range"));
}

#[test]
fn non_numeric_and_missing_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_file(&dir, "bad.csv", "y,s,d,x1,x2\n1,1,0,abc,2\n");
    assert!(matches!(
        load_csv(&path, &schema()),
        Err(Error::NonNumeric { .. })
    ));
    assert!(matches!(
        load_csv(dir.path().join("none.csv"), &schema()),
        Err(Error::Io { .. })
    ));
}

#[test]
fn schema_from_toml() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_file(
        &dir,
        "schema.toml",
        "outcome = \"y\"\nselection = \"s\"\ntreatment = \"d\"\ntreatment_levels = 2\ncovariates = [\"x1\", \"x2\"]\n",
    );
    assert_eq!(ColumnSchema::from_toml_file(&path).unwrap(), schema());
}

#[test]
fn standardize_examples() {
    let parts = DatasetParts {
        outcome: vec![Some(1.0); 3],
        selection: vec![true; 3],
        treatment: vec![0, 1, 0],
        levels: 2,
        covariates: DMatrix::from_row_slice(3, 2, &[1.0, 5.0, 2.0, 5.0, 3.0, 5.0]),
        post_covariates: None,
        instrument: None,
    };
    let data = SelectionDataset::new(parts).unwrap();
    let (std, recipe) = standardize(&data);
    let col: Vec<f64> = std.covariates().column(0).iter().copied().collect();
    assert!(col.iter().sum::<f64>().abs() < 1e-12);
    assert!((sample_sd(&col) - 0.5).abs() < 1e-12);
    assert_eq!(recipe.covariates.constant, vec![1]);
    assert!(std.covariates().column(1).iter().all(|v| *v == 5.0));
    assert_eq!(std.treatments(), data.treatments());
}

fn random_dataset(seed: u64, n: usize) -> SelectionDataset {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let selection: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.7).collect();
    SelectionDataset::new(DatasetParts {
        outcome: selection
            .iter()
            .map(|&s| s.then(|| rng.random::<f64>() * 1e3 - 500.0))
            .collect(),
        selection,
        treatment: (0..n).map(|i| (i % 2) as i64).collect(),
        levels: 2,
        covariates: DMatrix::from_fn(n, 2, |_, _| rng.random::<f64>() * 20.0 - 3.0),
        post_covariates: None,
        instrument: None,
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn csv_round_trip_is_exact(seed in any::<u64>(), n in 2usize..40) {
        let data = random_dataset(seed, n);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.csv");
        write_csv(&data, &schema(), &path).unwrap();
        prop_assert_eq!(load_csv(&path, &schema()).unwrap(), data);
    }

    #[test]
    fn standardize_invariants(seed in any::<u64>(), n in 3usize..60) {
        let data = random_dataset(seed, n);
        let (std, recipe) = standardize(&data);
        for j in 0..2 {
            let col: Vec<f64> = std.covariates().column(j).iter().copied().collect();
            prop_assert!((col.iter().sum::<f64>() / n as f64).abs() < 1e-10);
            prop_assert!((sample_sd(&col) - 0.5).abs() < 1e-10);
        }
        let back = recipe.invert(&std);
        for (a, b) in back.covariates().iter().zip(data.covariates().iter()) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
        let (twice, _) = standardize(&std);
        for (a, b) in twice.covariates().iter().zip(std.covariates().iter()) {
            prop_assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn column_recipe_round_trip(values in prop::collection::vec(-1e6f64..1e6, 2..50)) {
        let m = DMatrix::from_column_slice(values.len(), 1, &values);
        let recipe = ColumnRecipe::fit(&m);
        let back = recipe.invert(&recipe.apply(&m));
        let scale = values.iter().fold(0.0f64, |s, v| s.max(v.abs()));
        for (a, b) in back.iter().zip(m.iter()) {
            prop_assert!((a - b).abs() <= 1e-12 * scale);
        }
    }
}
