//! C ABI over `koopman-ddpc`.
//!
//! Every fallible function returns a [`KdStatus`]. On failure a message is
//! kept per thread and can be read with [`kd_last_error`]. Handles are
//! opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use koopman_ddpc::experiment::{run_window, ExperimentConfig};
use koopman_ddpc::systems::{builtin, sample_pairs, verify_embedding, KoopmanSystem};
use koopman_ddpc::tracking::TrackingRun;
use koopman_ddpc::Error;
use nalgebra::DVector;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Numerical = 3,
    Unsupported = 4,
    Panic = 5,
}

/// A built-in system.
pub struct KdSystem {
    inner: KoopmanSystem,
}

/// A finished closed-loop run with its regret figures, when available.
pub struct KdRun {
    run: TrackingRun,
    regret: Option<f64>,
    optimal_cost: Option<f64>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &Error) -> KdStatus {
    match e {
        Error::Unsupported(_) => KdStatus::Unsupported,
        Error::Controller { source, .. } => status_of(source),
        Error::InvalidInput(_)
        | Error::Dimension { .. }
        | Error::IndexOutOfRange(_)
        | Error::TooShort { .. }
        | Error::Mismatch(_)
        | Error::Config(_)
        | Error::MissingFile(_)
        | Error::Io(_)
        | Error::Json(_) => KdStatus::InvalidArgument,
        _ => KdStatus::Numerical,
    }
}

struct Fail(KdStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(KdStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> KdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            KdStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            KdStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(KdStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn kd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Create `slow_manifold`, `quartic_manifold` or `unicycle`.
///
/// # Safety
/// `id` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn kd_system_new(id: *const c_char, out: *mut *mut KdSystem) -> KdStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let id = str_arg(id, "id")?;
        let inner = builtin(id).map_err(|e| Fail(KdStatus::InvalidArgument, e.to_string()))?;
        *out = Box::into_raw(Box::new(KdSystem { inner }));
        Ok(())
    })
}

/// # Safety
/// `sys` must come from [`kd_system_new`] and not be freed yet; null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn kd_system_free(sys: *mut KdSystem) {
    if !sys.is_null() {
        drop(Box::from_raw(sys));
    }
}

/// State, input and lifted dimensions. `n_x` is 0 when the system has no
/// embedding.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn kd_system_dims(sys: *const KdSystem, n_z: *mut usize, n_u: *mut usize, n_x: *mut usize) -> KdStatus {
    guard(|| {
        let sys = &sys.as_ref().ok_or_else(|| null("sys"))?.inner;
        *out_arg(n_z, "n_z")? = sys.n_z();
        *out_arg(n_u, "n_u")? = sys.n_u();
        *out_arg(n_x, "n_x")? = sys.n_x().unwrap_or(0);
        Ok(())
    })
}

/// One step `z_next = f(z, u)`.
///
/// # Safety
/// `z` and `z_next` must hold `n_z` doubles, `u` must hold `n_u`.
#[no_mangle]
pub unsafe extern "C" fn kd_system_step(
    sys: *const KdSystem,
    z: *const f64,
    n_z: usize,
    u: *const f64,
    n_u: usize,
    z_next: *mut f64,
) -> KdStatus {
    guard(|| {
        let sys = &sys.as_ref().ok_or_else(|| null("sys"))?.inner;
        if n_z != sys.n_z() || n_u != sys.n_u() {
            return Err(Fail(
                KdStatus::InvalidArgument,
                format!("expected n_z={} n_u={}, got {n_z} and {n_u}", sys.n_z(), sys.n_u()),
            ));
        }
        let z = DVector::from_column_slice(slice_arg(z, n_z, "z")?);
        let u = DVector::from_column_slice(slice_arg(u, n_u, "u")?);
        if z_next.is_null() {
            return Err(null("z_next"));
        }
        let next = sys.step(&z, &u)?;
        std::slice::from_raw_parts_mut(z_next, n_z).copy_from_slice(next.as_slice());
        Ok(())
    })
}

/// Largest embedding residuals over `samples` seeded draws in `[-2, 2]`.
///
/// # Safety
/// Output pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn kd_verify_embedding(
    sys: *const KdSystem,
    samples: usize,
    seed: u64,
    dynamics_residual: *mut f64,
    recovery_residual: *mut f64,
) -> KdStatus {
    guard(|| {
        let sys = &sys.as_ref().ok_or_else(|| null("sys"))?.inner;
        let dyn_out = out_arg(dynamics_residual, "dynamics_residual")?;
        let rec_out = out_arg(recovery_residual, "recovery_residual")?;
        if sys.lifted().is_none() {
            return Err(Fail(KdStatus::Unsupported, format!("{} has no embedding", sys.name())));
        }
        let rep = verify_embedding(sys, &sample_pairs(sys, samples, -2.0, 2.0, seed), f64::INFINITY)?;
        *dyn_out = rep.max_dynamics_residual;
        *rec_out = rep.max_recovery_residual;
        Ok(())
    })
}

/// Run one closed loop from a JSON experiment config at window `window`.
/// Relative paths in the config are resolved against the working directory.
///
/// # Safety
/// `config_json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn kd_run_from_config(config_json: *const c_char, window: usize, out: *mut *mut KdRun) -> KdStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let mut cfg = ExperimentConfig::from_json(str_arg(config_json, "config_json")?)?;
        cfg.resolve_paths(std::path::Path::new("."));
        cfg.validate()?;
        let o = run_window(&cfg, window, cfg.weights.r_scale, sine_amplitude(&cfg))?;
        *out = Box::into_raw(Box::new(KdRun {
            regret: o.report.as_ref().map(|r| r.regret),
            optimal_cost: o.report.as_ref().map(|r| r.optimal_cost),
            run: o.run,
        }));
        Ok(())
    })
}

fn sine_amplitude(cfg: &ExperimentConfig) -> f64 {
    match cfg.reference {
        koopman_ddpc::experiment::ReferenceSpec::Sine { amplitude, .. } => amplitude,
        _ => 1.0,
    }
}

/// # Safety
/// `run` must come from [`kd_run_from_config`] and not be freed yet; null is a
/// no-op.
#[no_mangle]
pub unsafe extern "C" fn kd_run_free(run: *mut KdRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Scored horizon `T`, state and input dimensions.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn kd_run_shape(run: *const KdRun, horizon: *mut usize, n_z: *mut usize, n_u: *mut usize) -> KdStatus {
    guard(|| {
        let run = &run.as_ref().ok_or_else(|| null("run"))?.run;
        *out_arg(horizon, "horizon")? = run.horizon();
        *out_arg(n_z, "n_z")? = run.states.first().map_or(0, |z| z.len());
        *out_arg(n_u, "n_u")? = run.controls.first().map_or(0, |u| u.len());
        Ok(())
    })
}

unsafe fn copy_rows(rows: &[DVector<f64>], buf: *mut f64, len: usize) -> Result<(), Fail> {
    let need: usize = rows.iter().map(|r| r.len()).sum();
    if buf.is_null() {
        return Err(null("buf"));
    }
    if len < need {
        return Err(Fail(KdStatus::InvalidArgument, format!("buffer holds {len} doubles, need {need}")));
    }
    let out = std::slice::from_raw_parts_mut(buf, need);
    for (chunk, r) in out.chunks_mut(rows.first().map_or(1, |r| r.len().max(1))).zip(rows) {
        chunk.copy_from_slice(r.as_slice());
    }
    Ok(())
}

/// Copy `z_1..z_T` row-major into `buf` (`T * n_z` doubles).
///
/// # Safety
/// `buf` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn kd_run_states(run: *const KdRun, buf: *mut f64, len: usize) -> KdStatus {
    guard(|| copy_rows(&run.as_ref().ok_or_else(|| null("run"))?.run.states, buf, len))
}

/// Copy `u_1..u_T` row-major into `buf` (`T * n_u` doubles).
///
/// # Safety
/// `buf` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn kd_run_controls(run: *const KdRun, buf: *mut f64, len: usize) -> KdStatus {
    guard(|| copy_rows(&run.as_ref().ok_or_else(|| null("run"))?.run.controls, buf, len))
}

/// Closed-loop cost `J_T`.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn kd_run_total_cost(run: *const KdRun, cost: *mut f64) -> KdStatus {
    guard(|| {
        *out_arg(cost, "cost")? = run.as_ref().ok_or_else(|| null("run"))?.run.total_cost;
        Ok(())
    })
}

/// Dynamic regret and the offline optimum; unsupported without an embedding.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn kd_run_regret(run: *const KdRun, regret: *mut f64, optimal_cost: *mut f64) -> KdStatus {
    guard(|| {
        let run = run.as_ref().ok_or_else(|| null("run"))?;
        let reg_out = out_arg(regret, "regret")?;
        let opt_out = out_arg(optimal_cost, "optimal_cost")?;
        match (run.regret, run.optimal_cost) {
            (Some(r), Some(c)) => {
                *reg_out = r;
                *opt_out = c;
                Ok(())
            }
            _ => Err(Fail(KdStatus::Unsupported, format!("{} has no embedding; regret is undefined", run.run.system))),
        }
    })
}
