//! C ABI over `koopman_is`.
//!
//! Every fallible function returns a [`KisStatus`]; on failure the message is available from
//! [`kis_last_error_message`] on the same thread. Handles are opaque and owned by the caller,
//! who releases them with the matching `_free` function. Panics never cross the boundary.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use koopman_is::config::ExperimentConfig;
use koopman_is::doob::DoobController;
use koopman_is::estimator::{analytic_oracles, run_ensemble, run_mc, EnsembleSpec, EstimatorReport};
use koopman_is::model::{make_builtin_model, EventObservable, Margin, PointGenerator, SdeModel};
use koopman_is::runner::{run_experiment, RunOptions};
use koopman_is::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KisStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ModelNotFound = 3,
    Config = 4,
    Unsupported = 5,
    Numerical = 6,
    Io = 7,
    Panic = 8,
}

/// Shape of the terminal event.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KisMarginKind {
    /// `x[coord] > level`
    HalfSpace = 0,
    /// `|x[coord]| > level`
    AbsCoord = 1,
    /// `||x|| > level`; `coord` is ignored.
    NormExterior = 2,
}

#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct KisEvent {
    pub kind: KisMarginKind,
    pub coord: usize,
    pub level: f64,
}

/// Summary of one ensemble.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct KisReport {
    pub estimate: f64,
    pub variance: f64,
    pub relative_error: f64,
    pub proportion_in_event: f64,
    pub second_moment: f64,
    pub samples: usize,
    pub blowup_count: usize,
    /// Multiplier of the control, NaN for plain Monte Carlo.
    pub multiplier: f64,
}

/// Opaque SDE model.
pub struct KisModel(SdeModel);

/// Opaque Doob controller.
pub struct KisController(DoobController);

struct Failure(KisStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e.root() {
            Error::ModelNotFound(_) => KisStatus::ModelNotFound,
            Error::InvalidParameter(_) | Error::Shape(_) | Error::IndexOutOfRange { .. } | Error::TimeOutOfRange { .. } => KisStatus::InvalidArgument,
            Error::Config(_) => KisStatus::Config,
            Error::Unsupported(_) => KisStatus::Unsupported,
            Error::Io(_) | Error::Csv(_) | Error::Json(_) => KisStatus::Io,
            _ => KisStatus::Numerical,
        };
        Failure(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(KisStatus::InvalidArgument, msg.into())
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> KisStatus {
    set_error("");
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => KisStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(p) => {
            let msg = p.downcast_ref::<&str>().map(|s| s.to_string()).or_else(|| p.downcast_ref::<String>().cloned());
            set_error(&format!("panic: {}", msg.unwrap_or_default()));
            KisStatus::Panic
        }
    }
}

unsafe fn non_null<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| Failure(KisStatus::NullPointer, format!("{what} is null")))
}

unsafe fn out_ref<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| Failure(KisStatus::NullPointer, format!("{what} is null")))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    match (p.is_null(), len) {
        (_, 0) => Ok(&[]),
        (true, _) => Err(Failure(KisStatus::NullPointer, format!("{what} is null"))),
        (false, n) => Ok(std::slice::from_raw_parts(p, n)),
    }
}

unsafe fn slice_mut<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Failure> {
    match (p.is_null(), len) {
        (_, 0) => Ok(&mut []),
        (true, _) => Err(Failure(KisStatus::NullPointer, format!("{what} is null"))),
        (false, n) => Ok(std::slice::from_raw_parts_mut(p, n)),
    }
}

unsafe fn string(p: *const c_char, what: &str) -> Result<String, Failure> {
    if p.is_null() {
        return Err(Failure(KisStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map(str::to_string).map_err(|_| invalid(format!("{what} is not UTF-8")))
}

fn margin(e: &KisEvent) -> Margin {
    match e.kind {
        KisMarginKind::HalfSpace => Margin::HalfSpace { coord: e.coord, threshold: e.level },
        KisMarginKind::AbsCoord => Margin::AbsCoord { coord: e.coord, level: e.level },
        KisMarginKind::NormExterior => Margin::NormExterior { level: e.level },
    }
}

fn report(r: &EstimatorReport, multiplier: f64) -> KisReport {
    KisReport {
        estimate: r.estimate,
        variance: r.sample_variance,
        relative_error: r.relative_error,
        proportion_in_event: r.proportion_in_event,
        second_moment: r.second_moment,
        samples: r.samples,
        blowup_count: r.blowup_count,
        multiplier,
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn kis_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread (empty after a success). The pointer stays
/// valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn kis_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Builds a built-in model (`ou1d`, `nonnormal2d`, `brownian_osc`, `advdiff`, `vdp`, `duffing`)
/// with `n_params` overrides given as parallel key and value arrays.
///
/// # Safety
/// `name` and every key must be NUL-terminated; the arrays must hold `n_params` entries.
#[no_mangle]
pub unsafe extern "C" fn kis_model_new(
    name: *const c_char,
    param_keys: *const *const c_char,
    param_values: *const f64,
    n_params: usize,
    out: *mut *mut KisModel,
) -> KisStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let name = string(name, "name")?;
        let values = slice(param_values, n_params, "param_values")?;
        let mut params = BTreeMap::new();
        if n_params > 0 {
            if param_keys.is_null() {
                return Err(Failure(KisStatus::NullPointer, "param_keys is null".into()));
            }
            for (i, v) in values.iter().enumerate() {
                params.insert(string(*param_keys.add(i), "parameter key")?, *v);
            }
        }
        let m = make_builtin_model(&name, &params)?;
        *out = Box::into_raw(Box::new(KisModel(m)));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`kis_model_new`] and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn kis_model_free(model: *mut KisModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle; the outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn kis_model_dims(model: *const KisModel, dim_state: *mut usize, dim_noise: *mut usize) -> KisStatus {
    guard(|| {
        let m = &non_null(model, "model")?.0;
        *out_ref(dim_state, "dim_state")? = m.dim_state();
        *out_ref(dim_noise, "dim_noise")? = m.dim_noise();
        Ok(())
    })
}

/// Drift `A(x)` into `out` (length `dim`).
///
/// # Safety
/// `x` and `out` must hold `dim` values.
#[no_mangle]
pub unsafe extern "C" fn kis_model_drift(model: *const KisModel, x: *const f64, dim: usize, out: *mut f64) -> KisStatus {
    guard(|| {
        let m = &non_null(model, "model")?.0;
        if dim != m.dim_state() {
            return Err(invalid(format!("dim {dim} differs from the model dimension {}", m.dim_state())));
        }
        let x = slice(x, dim, "x")?;
        m.drift_into(x, slice_mut(out, dim, "out")?);
        Ok(())
    })
}

/// Generator applied to a function with gradient `grad` (length `dim`) and row-major Hessian
/// `hess` (length `dim * dim`) at `x`.
///
/// # Safety
/// The arrays must hold the stated lengths; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kis_generator_apply(
    model: *const KisModel,
    x: *const f64,
    grad: *const f64,
    hess: *const f64,
    dim: usize,
    out: *mut f64,
) -> KisStatus {
    guard(|| {
        let m = &non_null(model, "model")?.0;
        if dim != m.dim_state() {
            return Err(invalid(format!("dim {dim} differs from the model dimension {}", m.dim_state())));
        }
        let (x, g, h) = (slice(x, dim, "x")?, slice(grad, dim, "grad")?, slice(hess, dim * dim, "hess")?);
        *out_ref(out, "out")? = PointGenerator::new(m, x).apply(g, h);
        Ok(())
    })
}

/// Loads a controller from a `controller.json` file written by the runner.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kis_controller_load(path: *const c_char, out: *mut *mut KisController) -> KisStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let text = std::fs::read_to_string(string(path, "path")?).map_err(Error::from)?;
        *out = Box::into_raw(Box::new(KisController(DoobController::from_json(&text)?)));
        Ok(())
    })
}

/// # Safety
/// `controller` must come from [`kis_controller_load`] and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn kis_controller_free(controller: *mut KisController) {
    if !controller.is_null() {
        drop(Box::from_raw(controller));
    }
}

/// # Safety
/// `controller` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn kis_controller_set_multiplier(controller: *mut KisController, c: f64) -> KisStatus {
    guard(|| {
        let ctl = &mut out_ref(controller, "controller")?.0;
        ctl.set_multiplier(c)?;
        Ok(())
    })
}

/// Bias `u(t, x)` into `u` (length `noise_dim`).
///
/// # Safety
/// `x` must hold `dim` values and `u` `noise_dim` values.
#[no_mangle]
pub unsafe extern "C" fn kis_controller_bias(
    controller: *const KisController,
    t: f64,
    x: *const f64,
    dim: usize,
    u: *mut f64,
    noise_dim: usize,
) -> KisStatus {
    guard(|| {
        let ctl = &non_null(controller, "controller")?.0;
        let (d, r) = (ctl.model().dim_state(), ctl.model().dim_noise());
        if dim != d || noise_dim != r {
            return Err(invalid(format!("expected dim {d} and noise_dim {r}, got {dim} and {noise_dim}")));
        }
        let v = ctl.bias_eval(t, slice(x, dim, "x")?)?;
        slice_mut(u, noise_dim, "u")?.copy_from_slice(&v);
        Ok(())
    })
}

/// Runs `samples` paths from `x0` on `[0, horizon]` with step `dt`: plain Monte Carlo when
/// `controller` is null, importance sampling under the controller otherwise.
///
/// # Safety
/// Handles must be live; `x0` must hold `dim` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kis_run_ensemble(
    model: *const KisModel,
    controller: *const KisController,
    event: *const KisEvent,
    x0: *const f64,
    dim: usize,
    horizon: f64,
    dt: f64,
    samples: usize,
    seed: u64,
    out: *mut KisReport,
) -> KisStatus {
    guard(|| {
        let m = &non_null(model, "model")?.0;
        let obs = EventObservable::indicator(margin(non_null(event, "event")?));
        let x0 = slice(x0, dim, "x0")?;
        let spec = EnsembleSpec::new(m, &obs, x0, horizon, dt, samples, seed)?;
        let r = match controller.as_ref() {
            None => report(&run_mc(&spec)?.report, f64::NAN),
            Some(KisController(ctl)) => {
                let prepared = ctl.prepare(&spec.grid)?;
                report(&run_ensemble(&spec, Some(&prepared))?.report, ctl.multiplier())
            }
        };
        *out_ref(out, "out")? = r;
        Ok(())
    })
}

/// Reference event probability of a linear model from its Gaussian terminal law.
///
/// # Safety
/// Handles must be live; `x0` must hold `dim` values; `rho` must be writable and `std_error`
/// writable or null.
#[no_mangle]
pub unsafe extern "C" fn kis_oracle_rho(
    model: *const KisModel,
    event: *const KisEvent,
    x0: *const f64,
    dim: usize,
    horizon: f64,
    rho: *mut f64,
    std_error: *mut f64,
) -> KisStatus {
    guard(|| {
        let m = &non_null(model, "model")?.0;
        let o = analytic_oracles(m, &margin(non_null(event, "event")?), slice(x0, dim, "x0")?, horizon)?;
        *out_ref(rho, "rho")? = o.value.rho;
        if let Some(se) = std_error.as_mut() {
            *se = o.value.std_error;
        }
        Ok(())
    })
}

/// Runs the experiment in a TOML config file, writing its outputs to `out_dir` (or the
/// configured directory when null).
///
/// # Safety
/// Strings must be NUL-terminated; `out` must be writable or null.
#[no_mangle]
pub unsafe extern "C" fn kis_run_experiment(config_path: *const c_char, out_dir: *const c_char, reuse_controller: bool, out: *mut KisReport) -> KisStatus {
    guard(|| {
        let cfg = ExperimentConfig::load(&PathBuf::from(string(config_path, "config_path")?))?;
        let out_dir = if out_dir.is_null() { None } else { Some(PathBuf::from(string(out_dir, "out_dir")?)) };
        let o = run_experiment(&cfg, &RunOptions { reuse_controller, out_dir })?;
        if let Some(r) = out.as_mut() {
            *r = report(&o.report, o.row.c.unwrap_or(f64::NAN));
        }
        Ok(())
    })
}
