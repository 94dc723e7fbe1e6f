use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use selection_dml::simulation::{draw_dataset, Design, DgpConfig};
use selection_dml_ffi::*;

fn last_error() -> String {
    let p = sdml_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

struct Columns {
    n: usize,
    p: usize,
    y: Vec<f64>,
    s: Vec<u8>,
    d: Vec<i64>,
    x: Vec<f64>,
    z: Vec<f64>,
}

fn columns(n: usize, p: usize, seed: u64) -> Columns {
    let cfg = DgpConfig {
        p,
        ..DgpConfig::design(Design::Mar, n, seed)
    };
    let (data, _) = draw_dataset(&cfg).unwrap();
    let x = data.covariates();
    Columns {
        n,
        p,
        y: data
            .outcomes()
            .iter()
            .map(|y| y.unwrap_or(f64::NAN))
            .collect(),
        s: data.selection().iter().map(|&s| u8::from(s)).collect(),
        d: data.treatments().iter().map(|&d| d as i64).collect(),
        x: (0..n)
            .flat_map(|i| (0..p).map(move |j| x[(i, j)]))
            .collect(),
        z: data.instrument().unwrap().to_vec(),
    }
}

fn build(c: &Columns) -> *mut SdmlDataset {
    let mut ds = ptr::null_mut();
    let status = unsafe {
        sdml_dataset_new(
            c.n,
            c.p,
            c.y.as_ptr(),
            c.s.as_ptr(),
            c.d.as_ptr(),
            2,
            c.x.as_ptr(),
            0,
            ptr::null(),
            c.z.as_ptr(),
            &mut ds,
        )
    };
    assert_eq!(status, SdmlStatus::Ok);
    ds
}

#[test]
fn header_is_valid_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/selection_dml.h");
    assert!(header.exists());
    let Ok(status) = Command::new("cc")
        .args(["-fsyntax-only", "-x", "c"])
        .arg(&header)
        .status()
    else {
        eprintln!("no C compiler available; skipping header check");
        return;
    };
    assert!(status.success());
}

#[test]
fn estimate_through_handles() {
    let c = columns(600, 5, 11);
    let ds = build(&c);
    assert_eq!(unsafe { sdml_dataset_n(ds) }, 600);
    let mut est = SdmlEstimate::default();
    let status = unsafe { sdml_estimate_ate(ds, SdmlEstimator::Mar, 1, 0, 3, 5, 0.01, &mut est) };
    assert_eq!(status, SdmlStatus::Ok);
    assert!(est.se > 0.0 && est.estimate.is_finite());
    assert_eq!(est.n_effective + est.n_trimmed, 600);

    let mut again = SdmlEstimate::default();
    unsafe { sdml_estimate_ate(ds, SdmlEstimator::Mar, 1, 0, 3, 5, 0.01, &mut again) };
    assert_eq!(est, again);
    unsafe { sdml_dataset_free(ds) };
}

#[test]
fn json_estimate_matches_struct_estimate() {
    let c = columns(500, 4, 3);
    let ds = build(&c);
    let mut est = SdmlEstimate::default();
    assert_eq!(
        unsafe { sdml_estimate_ate(ds, SdmlEstimator::Mar, 1, 0, 3, 9, 0.01, &mut est) },
        SdmlStatus::Ok
    );
    let cfg = CString::new(
        r#"{"estimator":"mar","d":1,"d_prime":0,"k":3,"seed":9,"threshold":0.01,
            "specs":{"outcome":{"family":"lasso-linear","regularization":{"kind":"cross-validated","folds":5},"max_iter":1000,"tol":1e-7},
                     "treatment":{"family":"lasso-logistic","regularization":{"kind":"cross-validated","folds":5},"max_iter":1000,"tol":1e-7},
                     "selection":{"family":"lasso-logistic","regularization":{"kind":"cross-validated","folds":5},"max_iter":1000,"tol":1e-7},
                     "nested":{"family":"lasso-linear","regularization":{"kind":"cross-validated","folds":5},"max_iter":1000,"tol":1e-7}}}"#,
    )
    .unwrap();
    let mut out = ptr::null_mut();
    let status = unsafe { sdml_estimate_json(ds, cfg.as_ptr(), &mut out) };
    assert_eq!(status, SdmlStatus::Ok, "{}", last_error());
    let json: serde_json::Value =
        serde_json::from_str(&unsafe { CStr::from_ptr(out) }.to_string_lossy()).unwrap();
    assert_eq!(json["estimate"].as_f64().unwrap(), est.estimate);
    unsafe {
        sdml_string_free(out);
        sdml_dataset_free(ds);
    }
}

#[test]
fn errors_set_status_and_message() {
    let mut est = SdmlEstimate::default();
    let status =
        unsafe { sdml_estimate_ate(ptr::null(), SdmlEstimator::Mar, 1, 0, 3, 0, 0.01, &mut est) };
    assert_eq!(status, SdmlStatus::NullArgument);
    assert!(last_error().contains("null"));

    let c = columns(200, 3, 1);
    let ds = build(&c);
    let status = unsafe { sdml_estimate_ate(ds, SdmlEstimator::Mar, 1, 1, 3, 0, 0.01, &mut est) };
    assert_eq!(status, SdmlStatus::InvalidArgument);
    let status =
        unsafe { sdml_estimate_ate(ds, SdmlEstimator::Dynamic, 1, 0, 3, 0, 0.01, &mut est) };
    assert_eq!(status, SdmlStatus::InvalidData);
    assert!(last_error().contains("post-treatment"));
    unsafe { sdml_dataset_free(ds) };

    let mut bad = c.d.clone();
    bad[0] = 5;
    let mut ds = ptr::null_mut();
    let status = unsafe {
        sdml_dataset_new(
            c.n,
            c.p,
            c.y.as_ptr(),
            c.s.as_ptr(),
            bad.as_ptr(),
            2,
            c.x.as_ptr(),
            0,
            ptr::null(),
            ptr::null(),
            &mut ds,
        )
    };
    assert_eq!(status, SdmlStatus::InvalidData);
    assert!(ds.is_null());
    assert!(last_error().contains("out of range"));
}

#[test]
fn csv_loading_reports_io_errors() {
    let missing = CString::new("/nonexistent/data.csv").unwrap();
    let schema = CString::new("/nonexistent/schema.toml").unwrap();
    let mut ds = ptr::null_mut();
    let status = unsafe { sdml_dataset_load_csv(missing.as_ptr(), schema.as_ptr(), &mut ds) };
    assert_eq!(status, SdmlStatus::Io);
    assert!(ds.is_null());
}

#[test]
fn simulate_json_smoke() {
    let cfg =
        CString::new(r#"{"design":"1","n":300,"reps":2,"estimators":["mar"],"base_seed":4,"p":5}"#)
            .unwrap();
    let mut out = ptr::null_mut();
    let status = unsafe { sdml_simulate_json(cfg.as_ptr(), &mut out) };
    assert_eq!(status, SdmlStatus::Ok, "{}", last_error());
    let report: serde_json::Value =
        serde_json::from_str(&unsafe { CStr::from_ptr(out) }.to_string_lossy()).unwrap();
    assert_eq!(report["rows"][0]["reps"].as_u64(), Some(2));
    unsafe { sdml_string_free(out) };
}

#[test]
fn version_and_null_frees() {
    let v = unsafe { CStr::from_ptr(sdml_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    unsafe {
        sdml_string_free(ptr::null_mut());
        sdml_dataset_free(ptr::null_mut());
    }
}
