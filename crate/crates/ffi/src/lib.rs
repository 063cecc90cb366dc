//! C ABI for fhsae.
//!
//! Every function returns an [`FhsaeStatus`]; on failure the message is
//! available from [`fhsae_last_error`] on the same thread. Fitted models are
//! opaque handles released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use fhsae::direct::{self, AreaDirect, AreaId, UnitRecord};
use fhsae::fh::{self, AreaModelRow, AreaPrediction, FhFit};
use fhsae::gvf::{self, GvfFit};
use fhsae::{io, output, pipeline, Error};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FhsaeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidInput = 2,
    /// Collinear design, non-convergence and other numerical failures.
    Numerical = 3,
    Io = 4,
    Panic = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> FhsaeStatus {
    match e.root() {
        Error::Io(_) | Error::Csv(_) => FhsaeStatus::Io,
        Error::CollinearGvf | Error::CollinearCovariates | Error::NotConverged(_) | Error::DeltaTooSmall(_) => {
            FhsaeStatus::Numerical
        }
        _ => FhsaeStatus::InvalidInput,
    }
}

fn guard(f: impl FnOnce() -> Result<(), FhsaeStatus>) -> FhsaeStatus {
    set_error("");
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => FhsaeStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("internal panic");
            FhsaeStatus::Panic
        }
    }
}

fn fail(e: Error) -> FhsaeStatus {
    set_error(&e.to_string());
    status_of(&e)
}

fn null(what: &str) -> FhsaeStatus {
    set_error(&format!("null pointer: {what}"));
    FhsaeStatus::NullPointer
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], FhsaeStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, FhsaeStatus> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn path<'a>(p: *const c_char, what: &str) -> Result<&'a Path, FhsaeStatus> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map(Path::new).map_err(|_| {
        set_error(&format!("{what}: not valid UTF-8"));
        FhsaeStatus::InvalidInput
    })
}

/// Message for the last failed call on this thread, or an empty string.
/// The pointer stays valid until the next fhsae call on the same thread.
#[no_mangle]
pub extern "C" fn fhsae_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fhsae_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Hájek mean and design variance of one area's sample.
///
/// # Safety
/// `weights` and `outcomes` must point to `n` readable elements; outcomes are
/// 0 or 1. `estimate` and `variance` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fhsae_hajek(
    weights: *const f64,
    outcomes: *const u8,
    n: usize,
    estimate: *mut f64,
    variance: *mut f64,
) -> FhsaeStatus {
    guard(|| {
        let w = slice(weights, n, "weights")?;
        let y = slice(outcomes, n, "outcomes")?;
        let est = out(estimate, "estimate")?;
        let var = out(variance, "variance")?;
        let units = w
            .iter()
            .zip(y)
            .map(|(&w, &y)| match y {
                0 | 1 => UnitRecord::new("area", w, y == 1),
                other => Err(Error::Validation(format!("outcome must be 0 or 1, got {other}"))),
            })
            .collect::<fhsae::Result<Vec<_>>>()
            .map_err(fail)?;
        let refs: Vec<&UnitRecord> = units.iter().collect();
        let (m, n_hat) = direct::hajek_mean(&refs).map_err(fail)?;
        *var = direct::hajek_variance(&refs, m, n_hat).map_err(fail)?;
        *est = m;
        Ok(())
    })
}

/// Fitted generalized variance function.
pub struct FhsaeGvf {
    fit: GvfFit,
}

/// Fits the full six-term GVF to `d` areas. A negative `delta` selects the
/// mean of `variances`.
///
/// # Safety
/// The three arrays must hold `d` elements; `out_handle` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fhsae_gvf_fit(
    estimates: *const f64,
    variances: *const f64,
    sample_sizes: *const usize,
    d: usize,
    delta: f64,
    out_handle: *mut *mut FhsaeGvf,
) -> FhsaeStatus {
    guard(|| {
        let est = slice(estimates, d, "estimates")?;
        let var = slice(variances, d, "variances")?;
        let n = slice(sample_sizes, d, "sample_sizes")?;
        let handle = out(out_handle, "out_handle")?;
        *handle = ptr::null_mut();
        let areas: Vec<AreaDirect> = (0..d)
            .map(|i| AreaDirect {
                area_id: AreaId::new(i.to_string()),
                estimate: est[i],
                design_variance: var[i],
                sample_size: n[i],
                pop_size_hat: f64::NAN,
                cv: None,
                degenerate_variance: false,
            })
            .collect();
        let delta = if delta < 0.0 {
            gvf::default_delta(&areas).map_err(fail)?
        } else {
            delta
        };
        let fit = gvf::fit_gvf(&areas, delta).map_err(fail)?;
        *handle = Box::into_raw(Box::new(FhsaeGvf { fit }));
        Ok(())
    })
}

/// Smoothed variance for an area with the given estimate and sample size.
///
/// # Safety
/// `handle` must come from [`fhsae_gvf_fit`]; `variance` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fhsae_gvf_predict(
    handle: *const FhsaeGvf,
    estimate: f64,
    sample_size: usize,
    variance: *mut f64,
) -> FhsaeStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(|| null("handle"))?;
        let v = out(variance, "variance")?;
        let row = gvf::build_design_row(estimate, sample_size).map_err(fail)?;
        *v = gvf::predict_variance(&h.fit, &row);
        Ok(())
    })
}

/// # Safety
/// `handle` must come from [`fhsae_gvf_fit`] and not be used afterwards.
/// NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn fhsae_gvf_free(handle: *mut FhsaeGvf) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Fitted Fay-Herriot model with its per-area predictions.
pub struct FhsaeFh {
    fit: FhFit,
    predictions: Vec<AreaPrediction>,
}

/// REML fit of the area-level model.
///
/// `covariates` is row-major `d x p`; include a column of ones for an
/// intercept.
///
/// # Safety
/// `direct` and `error_variances` must hold `d` elements, `covariates`
/// `d * p`; `out_handle` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fhsae_fh_fit(
    direct: *const f64,
    error_variances: *const f64,
    covariates: *const f64,
    d: usize,
    p: usize,
    out_handle: *mut *mut FhsaeFh,
) -> FhsaeStatus {
    guard(|| {
        let y = slice(direct, d, "direct")?;
        let s2 = slice(error_variances, d, "error_variances")?;
        let len = d.checked_mul(p).ok_or_else(|| {
            set_error("d * p overflows");
            FhsaeStatus::InvalidInput
        })?;
        let x = slice(covariates, len, "covariates")?;
        let handle = out(out_handle, "out_handle")?;
        *handle = ptr::null_mut();
        let rows = (0..d)
            .map(|i| AreaModelRow::new(AreaId::new(i.to_string()), y[i], s2[i], x[i * p..(i + 1) * p].to_vec()))
            .collect::<fhsae::Result<Vec<_>>>()
            .map_err(fail)?;
        let fit = fh::reml_fit(&rows).map_err(fail)?;
        let predictions = fh::predict_all(&fit, &rows).map_err(fail)?;
        *handle = Box::into_raw(Box::new(FhsaeFh { fit, predictions }));
        Ok(())
    })
}

/// # Safety
/// `handle` must come from [`fhsae_fh_fit`]; `sigma_u2` must be writable.
#[no_mangle]
pub unsafe extern "C" fn fhsae_fh_sigma_u2(handle: *const FhsaeFh, sigma_u2: *mut f64) -> FhsaeStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(|| null("handle"))?;
        *out(sigma_u2, "sigma_u2")? = h.fit.sigma_u2_hat;
        Ok(())
    })
}

/// Copies the regression coefficients into `beta`, which holds `len` values;
/// `len` must equal the `p` passed to [`fhsae_fh_fit`].
///
/// # Safety
/// `handle` must come from [`fhsae_fh_fit`]; `beta` must hold `len` values.
#[no_mangle]
pub unsafe extern "C" fn fhsae_fh_beta(handle: *const FhsaeFh, beta: *mut f64, len: usize) -> FhsaeStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(|| null("handle"))?;
        if len != h.fit.beta_hat.len() {
            set_error(&format!("beta has {} entries, buffer holds {len}", h.fit.beta_hat.len()));
            return Err(FhsaeStatus::InvalidInput);
        }
        if beta.is_null() {
            return Err(null("beta"));
        }
        std::slice::from_raw_parts_mut(beta, len).copy_from_slice(&h.fit.beta_hat);
        Ok(())
    })
}

/// EBLUP and Prasad-Rao MSE of area `area` (0-based, in fit order).
///
/// # Safety
/// `handle` must come from [`fhsae_fh_fit`]; `eblup` and `mse` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn fhsae_fh_predict(
    handle: *const FhsaeFh,
    area: usize,
    eblup: *mut f64,
    mse: *mut f64,
) -> FhsaeStatus {
    guard(|| {
        let h = handle.as_ref().ok_or_else(|| null("handle"))?;
        let p = h.predictions.get(area).ok_or_else(|| {
            set_error(&format!("area index {area} out of range ({} areas)", h.predictions.len()));
            FhsaeStatus::InvalidInput
        })?;
        *out(eblup, "eblup")? = p.eblup;
        *out(mse, "mse")? = p.mse;
        Ok(())
    })
}

/// # Safety
/// `handle` must come from [`fhsae_fh_fit`] and not be used afterwards.
/// NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn fhsae_fh_free(handle: *mut FhsaeFh) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Runs the full pipeline with default options on two CSV files and writes
/// `results.csv` and `model.txt` into `out_dir`.
///
/// # Safety
/// All three arguments must be NUL-terminated UTF-8 paths.
#[no_mangle]
pub unsafe extern "C" fn fhsae_pipeline_run(
    units_csv: *const c_char,
    areas_csv: *const c_char,
    out_dir: *const c_char,
) -> FhsaeStatus {
    guard(|| {
        let units = io::ingest_units(path(units_csv, "units_csv")?).map_err(fail)?;
        let areas = io::ingest_areas(path(areas_csv, "areas_csv")?).map_err(fail)?;
        let dir = path(out_dir, "out_dir")?;
        let opts = pipeline::PipelineOptions::default();
        let run = pipeline::run(&units, &areas, &opts).map_err(fail)?;
        let artifacts = vec![
            ("results.csv".to_owned(), output::results_csv(&run).map_err(fail)?),
            ("model.txt".to_owned(), output::model_txt(&run, opts.subtract_delta)),
        ];
        output::write_all(dir, &artifacts).map_err(fail)?;
        Ok(())
    })
}
