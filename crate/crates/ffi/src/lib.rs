//! C ABI over the selection-dml estimators.
//!
//! Datasets live behind opaque handles. Every fallible call returns an [`SdmlStatus`]; on
//! failure the message is available from [`sdml_last_error`] on the same thread. Strings
//! returned through out-pointers are owned by the caller and released with [`sdml_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use nalgebra::DMatrix;
use selection_dml::dataset::DatasetParts;
use selection_dml::simulation::{run_design, StudyConfig};
use selection_dml::{
    estimate_ate, load_csv, ColumnSchema, EstimateConfig, EstimatorKind, SelectionDataset,
};

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SdmlStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    InvalidData = 4,
    Estimation = 5,
    Panic = 6,
}

/// Estimator selector.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SdmlEstimator {
    Mar = 0,
    IvTotal = 1,
    IvSelected = 2,
    Dynamic = 3,
}

impl From<SdmlEstimator> for EstimatorKind {
    fn from(e: SdmlEstimator) -> Self {
        match e {
            SdmlEstimator::Mar => EstimatorKind::Mar,
            SdmlEstimator::IvTotal => EstimatorKind::IvTotal,
            SdmlEstimator::IvSelected => EstimatorKind::IvSelected,
            SdmlEstimator::Dynamic => EstimatorKind::Dynamic,
        }
    }
}

/// Opaque dataset handle.
pub struct SdmlDataset {
    inner: SelectionDataset,
}

/// Point estimate of an ATE.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SdmlEstimate {
    pub estimate: f64,
    pub se: f64,
    pub p_value: f64,
    pub n_effective: usize,
    pub n_trimmed: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Failure(SdmlStatus, String);

impl From<selection_dml::Error> for Failure {
    fn from(e: selection_dml::Error) -> Self {
        use selection_dml::Error as E;
        let status = match &e {
            E::Io { .. } => SdmlStatus::Io,
            E::Csv(_)
            | E::Schema(_)
            | E::NonNumeric { .. }
            | E::MissingOutcome { .. }
            | E::TreatmentOutOfRange { .. }
            | E::NonFinite(_)
            | E::Dimension(_)
            | E::AbsentLevel(_)
            | E::MissingChannel(_) => SdmlStatus::InvalidData,
            E::InvalidInput(_) | E::Config(_) | E::Json(_) => SdmlStatus::InvalidArgument,
            _ => SdmlStatus::Estimation,
        };
        Failure(status, e.to_string())
    }
}

fn fail<T>(status: SdmlStatus, msg: &str) -> Result<T, Failure> {
    Err(Failure(status, msg.to_string()))
}

/// Runs `f`, recording its error message and converting panics.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SdmlStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SdmlStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            SdmlStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return fail(SdmlStatus::NullArgument, &format!("{name} is null"));
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        Failure(
            SdmlStatus::InvalidArgument,
            format!("{name} is not valid UTF-8"),
        )
    })
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s).map_or(ptr::null_mut(), CString::into_raw)
}

/// Message of the last failed call on this thread, or NULL. Valid until the next call.
#[no_mangle]
pub extern "C" fn sdml_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sdml_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a CSV file described by a TOML schema.
///
/// # Safety
/// `csv_path` and `schema_path` must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sdml_dataset_load_csv(
    csv_path: *const c_char,
    schema_path: *const c_char,
    out: *mut *mut SdmlDataset,
) -> SdmlStatus {
    guard(|| {
        if out.is_null() {
            return fail(SdmlStatus::NullArgument, "out is null");
        }
        let csv_path = str_arg(csv_path, "csv_path")?;
        let schema = ColumnSchema::from_toml_file(str_arg(schema_path, "schema_path")?)?;
        let inner = load_csv(csv_path, &schema)?;
        *out = Box::into_raw(Box::new(SdmlDataset { inner }));
        Ok(())
    })
}

/// Builds a dataset from column arrays.
///
/// `outcome` is read only where `selection[i] != 0`; `covariates` is row-major `n x p`.
/// `post_covariates` (row-major `n x p_post`) and `instrument` may be NULL.
///
/// # Safety
/// Every non-null pointer must reference at least the number of elements implied by `n`,
/// `p` and `p_post`; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sdml_dataset_new(
    n: usize,
    p: usize,
    outcome: *const f64,
    selection: *const u8,
    treatment: *const i64,
    levels: usize,
    covariates: *const f64,
    p_post: usize,
    post_covariates: *const f64,
    instrument: *const f64,
    out: *mut *mut SdmlDataset,
) -> SdmlStatus {
    guard(|| {
        if out.is_null()
            || outcome.is_null()
            || selection.is_null()
            || treatment.is_null()
            || covariates.is_null()
        {
            return fail(
                SdmlStatus::NullArgument,
                "required array or out pointer is null",
            );
        }
        if n == 0 || p == 0 {
            return fail(SdmlStatus::InvalidArgument, "n and p must be positive");
        }
        let y = std::slice::from_raw_parts(outcome, n);
        let s = std::slice::from_raw_parts(selection, n);
        let selection: Vec<bool> = s.iter().map(|&v| v != 0).collect();
        let outcome = y
            .iter()
            .zip(&selection)
            .map(|(&v, &sel)| if sel { Some(v) } else { None })
            .collect();
        let post = if post_covariates.is_null() || p_post == 0 {
            None
        } else {
            let m = std::slice::from_raw_parts(post_covariates, n * p_post);
            Some(DMatrix::from_row_slice(n, p_post, m))
        };
        let parts = DatasetParts {
            outcome,
            selection,
            treatment: std::slice::from_raw_parts(treatment, n).to_vec(),
            levels,
            covariates: DMatrix::from_row_slice(
                n,
                p,
                std::slice::from_raw_parts(covariates, n * p),
            ),
            post_covariates: post,
            instrument: (!instrument.is_null())
                .then(|| std::slice::from_raw_parts(instrument, n).to_vec()),
        };
        let inner = SelectionDataset::new(parts)?;
        *out = Box::into_raw(Box::new(SdmlDataset { inner }));
        Ok(())
    })
}

/// Row count, or 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sdml_dataset_n(ds: *const SdmlDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.n())
}

/// Releases a dataset handle. Null is ignored.
///
/// # Safety
/// `ds` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sdml_dataset_free(ds: *mut SdmlDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Estimates `E[Y(d) - Y(d_prime)]` with default lasso nuisances.
///
/// # Safety
/// `ds` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sdml_estimate_ate(
    ds: *const SdmlDataset,
    estimator: SdmlEstimator,
    d: usize,
    d_prime: usize,
    k: usize,
    seed: u64,
    trim: f64,
    out: *mut SdmlEstimate,
) -> SdmlStatus {
    guard(|| {
        let (Some(ds), false) = (ds.as_ref(), out.is_null()) else {
            return fail(SdmlStatus::NullArgument, "dataset or out pointer is null");
        };
        if k < 2 || !(0.0..0.5).contains(&trim) || d == d_prime {
            return fail(
                SdmlStatus::InvalidArgument,
                "need K >= 2, trim in [0, 0.5) and d != d_prime",
            );
        }
        let cfg = EstimateConfig {
            k,
            threshold: trim,
            ..EstimateConfig::ate(estimator.into(), d, d_prime, seed)
        };
        let est = estimate_ate(&ds.inner, &cfg)?;
        *out = SdmlEstimate {
            estimate: est.estimate,
            se: est.se,
            p_value: est.p,
            n_effective: est.n_effective,
            n_trimmed: est.n_trimmed,
        };
        Ok(())
    })
}

/// Runs an estimate described by a JSON estimate configuration and returns the result as JSON.
///
/// # Safety
/// `ds` must be a live handle, `config_json` a NUL-terminated string and `out` writable.
/// The returned string must be released with [`sdml_string_free`].
#[no_mangle]
pub unsafe extern "C" fn sdml_estimate_json(
    ds: *const SdmlDataset,
    config_json: *const c_char,
    out: *mut *mut c_char,
) -> SdmlStatus {
    guard(|| {
        let (Some(ds), false) = (ds.as_ref(), out.is_null()) else {
            return fail(SdmlStatus::NullArgument, "dataset or out pointer is null");
        };
        let cfg: EstimateConfig = serde_json::from_str(str_arg(config_json, "config_json")?)
            .map_err(|e| Failure(SdmlStatus::InvalidArgument, e.to_string()))?;
        let est = selection_dml::estimator::estimate(&ds.inner, &cfg)?;
        let json = serde_json::to_string(&est)
            .map_err(|e| Failure(SdmlStatus::Estimation, e.to_string()))?;
        *out = into_c_string(json);
        Ok(())
    })
}

/// Runs a simulation study from a JSON study configuration and returns the report as JSON.
///
/// # Safety
/// `config_json` must be a NUL-terminated string and `out` writable. The returned string must
/// be released with [`sdml_string_free`].
#[no_mangle]
pub unsafe extern "C" fn sdml_simulate_json(
    config_json: *const c_char,
    out: *mut *mut c_char,
) -> SdmlStatus {
    guard(|| {
        if out.is_null() {
            return fail(SdmlStatus::NullArgument, "out is null");
        }
        let cfg: StudyConfig = serde_json::from_str(str_arg(config_json, "config_json")?)
            .map_err(|e| Failure(SdmlStatus::InvalidArgument, e.to_string()))?;
        let report = run_design(&cfg)?;
        *out = into_c_string(report.to_json());
        Ok(())
    })
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must be null or a string from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sdml_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
