//! C ABI over `cmm-core`.
//!
//! Every function returns a [`CmmStatus`]; results go through out-pointers.
//! On failure a message is available from [`cmm_last_error`] on the same
//! thread. Datasets and fits are opaque handles released with their `_free`
//! functions; strings returned by the library are released with
//! [`cmm_string_free`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use cmm_core::config::RunConfig;
use cmm_core::data::Dataset;
use cmm_core::design::build_design;
use cmm_core::dist::{nb_pmf, InflatedNB, InflationWeights, NegBinParams};
use cmm_core::estimate::{fit, FitResult};
use cmm_core::game::{marginal_censor_prob, risk_neutral_optimum, GameSetting};
use cmm_core::predict::{predict_rows, Support};
use cmm_core::sim::generate_dataset;
use cmm_core::CmmError;

/// Result codes. The values 2 to 5 match the command-line exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmmStatus {
    Ok = 0,
    /// Null pointer, invalid UTF-8 or a buffer that is too small.
    InvalidArgument = 1,
    Config = 2,
    Data = 3,
    /// The fit finished but did not meet the convergence rule; the handle is
    /// still returned.
    NotConverged = 4,
    Invariant = 5,
    /// The requested quantity does not exist for this object.
    Unavailable = 6,
    /// A Rust panic was caught.
    Panic = 7,
}

/// A loaded or simulated dataset.
pub struct CmmDataset {
    inner: Dataset,
}

/// A fitted model.
pub struct CmmFit {
    inner: FitResult,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Failure(CmmStatus, String);

impl From<CmmError> for Failure {
    fn from(e: CmmError) -> Self {
        let status = match e.exit_code() {
            2 => CmmStatus::Config,
            3 => CmmStatus::Data,
            _ => CmmStatus::Invariant,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(CmmStatus::InvalidArgument, msg.into())
}

type Outcome = Result<CmmStatus, Failure>;

fn guard(f: impl FnOnce() -> Outcome) -> CmmStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(status)) => status,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            CmmStatus::Panic
        }
    }
}

unsafe fn out_ref<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| invalid(format!("{name} is null")))
}

unsafe fn handle<'a, T>(p: *const T, name: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| invalid(format!("{name} is null")))
}

unsafe fn string_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(invalid(format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{name} is not valid UTF-8")))
}

unsafe fn config_arg(p: *const c_char) -> Result<RunConfig, Failure> {
    if p.is_null() {
        return Ok(RunConfig::default());
    }
    Ok(RunConfig::from_toml_str(string_arg(p, "config_toml")?)?)
}

/// Copy `values` into a caller buffer of length `len`; `needed` always
/// receives the full length.
unsafe fn fill(values: &[f64], buf: *mut f64, len: usize, needed: *mut usize) -> Outcome {
    if let Some(n) = needed.as_mut() {
        *n = values.len();
    }
    if len < values.len() {
        return Err(invalid(format!("buffer holds {len} values, {} needed", values.len())));
    }
    if buf.is_null() {
        return Err(invalid("buf is null"));
    }
    ptr::copy_nonoverlapping(values.as_ptr(), buf, values.len());
    Ok(CmmStatus::Ok)
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cmm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next library call on the same thread.
#[no_mangle]
pub extern "C" fn cmm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Negative binomial mass at `z` with mean `mu` and shape `delta`.
///
/// # Safety
/// `out` must be null or point to writable memory for one `double`.
#[no_mangle]
pub unsafe extern "C" fn cmm_nb_pmf(z: u32, mu: f64, delta: f64, out: *mut f64) -> CmmStatus {
    guard(|| {
        let o = out_ref(out, "out")?;
        *o = nb_pmf(z, NegBinParams::new(mu, delta)?)?;
        Ok(CmmStatus::Ok)
    })
}

/// Inflated distribution mass at `ell` in `0..=32`. `phi` holds the four
/// weights: base, zero, attraction set, thirty-one.
///
/// # Safety
/// `phi` must point to four readable doubles; `out` to one writable double.
#[no_mangle]
pub unsafe extern "C" fn cmm_inflated_pmf(
    ell: i64,
    mu: f64,
    delta: f64,
    phi: *const f64,
    out: *mut f64,
) -> CmmStatus {
    guard(|| {
        if phi.is_null() {
            return Err(invalid("phi is null"));
        }
        let w = std::slice::from_raw_parts(phi, 4);
        let o = out_ref(out, "out")?;
        let d = InflatedNB::new(
            NegBinParams::new(mu, delta)?,
            InflationWeights::new([w[0], w[1], w[2], w[3]])?,
        )?;
        *o = d.pmf(ell)?;
        Ok(CmmStatus::Ok)
    })
}

/// Unconditional probability that a round ends with a loss at card `k`.
///
/// # Safety
/// `out` must point to one writable double.
#[no_mangle]
pub unsafe extern "C" fn cmm_marginal_censor_prob(
    k: u32,
    gain: i64,
    loss: i64,
    n_loss_cards: i64,
    out: *mut f64,
) -> CmmStatus {
    guard(|| {
        let o = out_ref(out, "out")?;
        *o = marginal_censor_prob(k, GameSetting::from_values(gain, loss, n_loss_cards)?)?;
        Ok(CmmStatus::Ok)
    })
}

/// Card count maximizing the expected round score.
///
/// # Safety
/// `out` must point to one writable `uint32_t`.
#[no_mangle]
pub unsafe extern "C" fn cmm_risk_neutral_optimum(
    gain: i64,
    loss: i64,
    n_loss_cards: i64,
    out: *mut u32,
) -> CmmStatus {
    guard(|| {
        let o = out_ref(out, "out")?;
        *o = risk_neutral_optimum(GameSetting::from_values(gain, loss, n_loss_cards)?);
        Ok(CmmStatus::Ok)
    })
}

/// Load a dataset from children and trials CSV files.
///
/// # Safety
/// Paths must be NUL-terminated strings; `out` must point to a writable
/// handle slot.
#[no_mangle]
pub unsafe extern "C" fn cmm_dataset_load(
    children_csv: *const c_char,
    trials_csv: *const c_char,
    out: *mut *mut CmmDataset,
) -> CmmStatus {
    guard(|| {
        let slot = out_ref(out, "out")?;
        *slot = ptr::null_mut();
        let c = string_arg(children_csv, "children_csv")?;
        let t = string_arg(trials_csv, "trials_csv")?;
        let inner = Dataset::load(Path::new(c), Path::new(t))?;
        *slot = Box::into_raw(Box::new(CmmDataset { inner }));
        Ok(CmmStatus::Ok)
    })
}

/// Simulate a dataset from a TOML run configuration (its `seed` and
/// `[simulate]` section); null uses the defaults.
///
/// # Safety
/// `config_toml` must be null or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cmm_dataset_simulate(config_toml: *const c_char, out: *mut *mut CmmDataset) -> CmmStatus {
    guard(|| {
        let slot = out_ref(out, "out")?;
        *slot = ptr::null_mut();
        let cfg = config_arg(config_toml)?;
        let inner = generate_dataset(&cfg.sim_config()?)?;
        *slot = Box::into_raw(Box::new(CmmDataset { inner }));
        Ok(CmmStatus::Ok)
    })
}

/// # Safety
/// `dataset` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cmm_dataset_n_children(dataset: *const CmmDataset, out: *mut usize) -> CmmStatus {
    guard(|| {
        *out_ref(out, "out")? = handle(dataset, "dataset")?.inner.n_children();
        Ok(CmmStatus::Ok)
    })
}

/// # Safety
/// `dataset` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cmm_dataset_n_trials(dataset: *const CmmDataset, out: *mut usize) -> CmmStatus {
    guard(|| {
        *out_ref(out, "out")? = handle(dataset, "dataset")?.inner.n_trials();
        Ok(CmmStatus::Ok)
    })
}

/// Release a dataset. Null is ignored.
///
/// # Safety
/// `dataset` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cmm_dataset_free(dataset: *mut CmmDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Fit the model. `config_toml` supplies the `schema`, `seed` and `[fit]`
/// settings (null: defaults). Returns `NotConverged` with a valid handle
/// when the optimizer stopped without meeting the convergence rule.
///
/// # Safety
/// `dataset` must be a live handle, `config_toml` null or NUL-terminated,
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cmm_fit_run(
    dataset: *const CmmDataset,
    config_toml: *const c_char,
    out: *mut *mut CmmFit,
) -> CmmStatus {
    guard(|| {
        let slot = out_ref(out, "out")?;
        *slot = ptr::null_mut();
        let ds = handle(dataset, "dataset")?;
        let cfg = config_arg(config_toml)?;
        let schema = cfg.schema.resolve()?;
        let design = build_design(&ds.inner, &schema)?;
        let inner = fit(&ds.inner, &design, &cfg.fit_config()?)?;
        let converged = inner.converged;
        *slot = Box::into_raw(Box::new(CmmFit { inner }));
        if converged {
            Ok(CmmStatus::Ok)
        } else {
            set_error("optimizer did not meet the convergence rule");
            Ok(CmmStatus::NotConverged)
        }
    })
}

/// Rebuild a fit from its JSON form.
///
/// # Safety
/// `json` must be NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cmm_fit_from_json(json: *const c_char, out: *mut *mut CmmFit) -> CmmStatus {
    guard(|| {
        let slot = out_ref(out, "out")?;
        *slot = ptr::null_mut();
        let inner: FitResult = serde_json::from_str(string_arg(json, "json")?).map_err(CmmError::from)?;
        *slot = Box::into_raw(Box::new(CmmFit { inner }));
        Ok(CmmStatus::Ok)
    })
}

/// # Safety
/// `fit` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cmm_fit_n_segments(fit: *const CmmFit, out: *mut usize) -> CmmStatus {
    guard(|| {
        *out_ref(out, "out")? = handle(fit, "fit")?.inner.n_segments;
        Ok(CmmStatus::Ok)
    })
}

/// Log-likelihood without the game-mechanics constant.
///
/// # Safety
/// `fit` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cmm_fit_loglik(fit: *const CmmFit, out: *mut f64) -> CmmStatus {
    guard(|| {
        *out_ref(out, "out")? = handle(fit, "fit")?.inner.loglik;
        Ok(CmmStatus::Ok)
    })
}

/// # Safety
/// `fit` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cmm_fit_bic(fit: *const CmmFit, out: *mut f64) -> CmmStatus {
    guard(|| {
        *out_ref(out, "out")? = handle(fit, "fit")?.inner.bic;
        Ok(CmmStatus::Ok)
    })
}

/// # Safety
/// `fit` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cmm_fit_converged(fit: *const CmmFit, out: *mut bool) -> CmmStatus {
    guard(|| {
        *out_ref(out, "out")? = handle(fit, "fit")?.inner.converged;
        Ok(CmmStatus::Ok)
    })
}

/// Natural parameters in the order intercepts, covariate weights,
/// dispersion, four inflation weights, mixing weights. `needed` receives
/// the count even when `len` is too small.
///
/// # Safety
/// `fit` must be a live handle; `buf` must hold `len` doubles; `needed` may
/// be null.
#[no_mangle]
pub unsafe extern "C" fn cmm_fit_natural_params(
    fit: *const CmmFit,
    buf: *mut f64,
    len: usize,
    needed: *mut usize,
) -> CmmStatus {
    guard(|| fill(&handle(fit, "fit")?.inner.params.to_natural_vec(), buf, len, needed))
}

/// Standard errors aligned with [`cmm_fit_natural_params`]; `Unavailable`
/// when the Hessian could not be inverted.
///
/// # Safety
/// As for [`cmm_fit_natural_params`].
#[no_mangle]
pub unsafe extern "C" fn cmm_fit_standard_errors(
    fit: *const CmmFit,
    buf: *mut f64,
    len: usize,
    needed: *mut usize,
) -> CmmStatus {
    guard(|| match &handle(fit, "fit")?.inner.se {
        Some(se) => fill(se, buf, len, needed),
        None => Err(Failure(CmmStatus::Unavailable, "fit has no standard errors".into())),
    })
}

/// Expected cards for every trial of `dataset`, in the dataset's trial
/// order. `literal` selects the untruncated expected value.
///
/// # Safety
/// Handles must be live; `buf` must hold `len` doubles; `needed` may be null.
#[no_mangle]
pub unsafe extern "C" fn cmm_fit_predict(
    fit: *const CmmFit,
    dataset: *const CmmDataset,
    literal: bool,
    buf: *mut f64,
    len: usize,
    needed: *mut usize,
) -> CmmStatus {
    guard(|| {
        let f = &handle(fit, "fit")?.inner;
        let ds = &handle(dataset, "dataset")?.inner;
        let design = cmm_core::cli::design_for_fit(f, ds)?;
        let support = if literal { Support::Literal } else { Support::Truncated };
        fill(&predict_rows(&f.params, &design.matrix, support)?, buf, len, needed)
    })
}

/// Serialize a fit to JSON. Release the string with [`cmm_string_free`].
///
/// # Safety
/// `fit` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cmm_fit_to_json(fit: *const CmmFit, out: *mut *mut c_char) -> CmmStatus {
    guard(|| {
        let slot = out_ref(out, "out")?;
        *slot = ptr::null_mut();
        let text = serde_json::to_string(&handle(fit, "fit")?.inner).map_err(CmmError::from)?;
        *slot = CString::new(text)
            .map_err(|_| Failure(CmmStatus::Invariant, "JSON contains NUL".into()))?
            .into_raw();
        Ok(CmmStatus::Ok)
    })
}

/// Release a fit. Null is ignored.
///
/// # Safety
/// `fit` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cmm_fit_free(fit: *mut CmmFit) {
    if !fit.is_null() {
        drop(Box::from_raw(fit));
    }
}

/// Release a string returned by the library. Null is ignored.
///
/// # Safety
/// `s` must be null or a string from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cmm_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
