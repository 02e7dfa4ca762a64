//! C ABI over `tsclimb-core`.
//!
//! A run is an opaque [`TscRun`] handle created from a JSON experiment
//! config. Every function returns a [`TscStatus`]; on failure a message is
//! available from [`tsc_last_error_message`] on the calling thread. Panics
//! never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use tsclimb_core::cli::{build_map, build_target, parse_config, run_experiment, ConfigError, ExperimentConfig, RunError};
use tsclimb_core::climb::{TrainError, Trainer};

/// Result codes shared by every exported function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TscStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidConfig = 2,
    Io = 3,
    Numerical = 4,
    BufferTooSmall = 5,
    Panic = 6,
    InvalidArgument = 7,
}

/// Opaque training run.
pub struct TscRun {
    trainer: Trainer,
    config: ExperimentConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::default());
}

fn fail(status: TscStatus, msg: impl Into<String>) -> TscStatus {
    set_error(msg);
    status
}

fn guard<F: FnOnce() -> TscStatus>(f: F) -> TscStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(TscStatus::Panic, format!("internal panic: {msg}"))
        }
    }
}

fn train_status(e: &TrainError) -> TscStatus {
    match e {
        TrainError::Config(_) => TscStatus::InvalidConfig,
        TrainError::Io(_) => TscStatus::Io,
        _ => TscStatus::Numerical,
    }
}

fn run_status(e: &RunError) -> TscStatus {
    match e {
        RunError::Io { .. } | RunError::Csv(_) | RunError::Json(_) => TscStatus::Io,
        RunError::Setup(_) | RunError::Target(_) => TscStatus::InvalidConfig,
        RunError::Train(t) => train_status(t),
        RunError::Flow(_) => TscStatus::Numerical,
    }
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, TscStatus> {
    if p.is_null() {
        return Err(fail(TscStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(TscStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// Copies `src` into a caller buffer. `written` always receives the required
/// length; a short buffer is left untouched.
unsafe fn copy_out(src: &[f64], buf: *mut f64, len: usize, written: *mut usize) -> TscStatus {
    if !written.is_null() {
        *written = src.len();
    }
    if src.is_empty() {
        return TscStatus::Ok;
    }
    if buf.is_null() {
        return fail(TscStatus::NullPointer, "output buffer is null");
    }
    if len < src.len() {
        return fail(
            TscStatus::BufferTooSmall,
            format!("buffer holds {len} values, {} needed", src.len()),
        );
    }
    ptr::copy_nonoverlapping(src.as_ptr(), buf, src.len());
    TscStatus::Ok
}

/// Creates a run from a JSON experiment config (same schema as the CLI).
///
/// # Safety
/// `config_json` must be a NUL-terminated string and `out` a valid pointer.
/// The handle must be released with [`tsc_run_free`].
#[no_mangle]
pub unsafe extern "C" fn tsc_run_create(config_json: *const c_char, out: *mut *mut TscRun) -> TscStatus {
    guard(|| {
        if out.is_null() {
            return fail(TscStatus::NullPointer, "out is null");
        }
        *out = ptr::null_mut();
        let text = match read_str(config_json, "config_json") {
            Ok(t) => t,
            Err(s) => return s,
        };
        let config = match ExperimentConfig::from_json(text) {
            Ok(c) => c,
            Err(e) => return fail(TscStatus::InvalidConfig, e.to_string()),
        };
        let built = match build_target(&config.target_spec(), config.seed) {
            Ok(b) => b,
            Err(e) => return fail(run_status(&e), e.to_string()),
        };
        let map = build_map(&config.flow, built.model.dim(), config.seed);
        match Trainer::new(config.trainer, config.hmc, built.model, map, config.seed) {
            Ok(trainer) => {
                *out = Box::into_raw(Box::new(TscRun { trainer, config }));
                TscStatus::Ok
            }
            Err(e) => fail(train_status(&e), e.to_string()),
        }
    })
}

/// Releases a run. Null is ignored.
///
/// # Safety
/// `run` must come from [`tsc_run_create`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn tsc_run_free(run: *mut TscRun) {
    if !run.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| drop(Box::from_raw(run))));
    }
}

/// Advances the run by up to `n` iterations, stopping at the configured
/// total. `done` (nullable) receives the number actually taken.
///
/// # Safety
/// `run` must be a live handle; `done` null or valid.
#[no_mangle]
pub unsafe extern "C" fn tsc_run_step(run: *mut TscRun, n: u64, done: *mut u64) -> TscStatus {
    guard(|| {
        let Some(r) = run.as_mut() else {
            return fail(TscStatus::NullPointer, "run is null");
        };
        let mut taken = 0;
        let mut status = TscStatus::Ok;
        while taken < n && !r.trainer.is_done() {
            if let Err(e) = r.trainer.step() {
                status = fail(train_status(&e), e.to_string());
                break;
            }
            taken += 1;
        }
        if !done.is_null() {
            *done = taken;
        }
        status
    })
}

/// Iterations completed so far (0 for a null handle).
///
/// # Safety
/// `run` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tsc_run_iteration(run: *const TscRun) -> u64 {
    run.as_ref().map_or(0, |r| r.trainer.state().iteration)
}

/// Total iterations the config asks for (0 for a null handle).
///
/// # Safety
/// `run` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tsc_run_total_iterations(run: *const TscRun) -> u64 {
    run.as_ref().map_or(0, |r| r.config.trainer.iterations)
}

/// Latent dimension (0 for a null handle).
///
/// # Safety
/// `run` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tsc_run_dim(run: *const TscRun) -> usize {
    run.as_ref().map_or(0, |r| r.trainer.state().map.dim())
}

/// Number of map parameters (0 for a null handle).
///
/// # Safety
/// `run` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn tsc_run_param_count(run: *const TscRun) -> usize {
    run.as_ref().map_or(0, |r| r.trainer.state().map.param_count())
}

/// Copies the flat map parameters.
///
/// # Safety
/// `run` live; `buf` valid for `len` doubles; `written` null or valid.
#[no_mangle]
pub unsafe extern "C" fn tsc_run_flow_params(run: *const TscRun, buf: *mut f64, len: usize, written: *mut usize) -> TscStatus {
    guard(|| match run.as_ref() {
        Some(r) => copy_out(&r.trainer.state().map.params(), buf, len, written),
        None => fail(TscStatus::NullPointer, "run is null"),
    })
}

/// Copies the current model parameters θ.
///
/// # Safety
/// As [`tsc_run_flow_params`].
#[no_mangle]
pub unsafe extern "C" fn tsc_run_theta(run: *const TscRun, buf: *mut f64, len: usize, written: *mut usize) -> TscStatus {
    guard(|| match run.as_ref() {
        Some(r) => copy_out(&r.trainer.state().theta, buf, len, written),
        None => fail(TscStatus::NullPointer, "run is null"),
    })
}

/// Copies the chain's current position (warped space for TSC).
///
/// # Safety
/// As [`tsc_run_flow_params`].
#[no_mangle]
pub unsafe extern "C" fn tsc_run_chain_position(run: *const TscRun, buf: *mut f64, len: usize, written: *mut usize) -> TscStatus {
    guard(|| match run.as_ref() {
        Some(r) => copy_out(&r.trainer.state().chain.position, buf, len, written),
        None => fail(TscStatus::NullPointer, "run is null"),
    })
}

/// Evaluates `log q(z)` under the current map.
///
/// # Safety
/// `run` live; `z` valid for `len` doubles; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn tsc_run_log_q(run: *const TscRun, z: *const f64, len: usize, out: *mut f64) -> TscStatus {
    guard(|| {
        let Some(r) = run.as_ref() else {
            return fail(TscStatus::NullPointer, "run is null");
        };
        if z.is_null() || out.is_null() {
            return fail(TscStatus::NullPointer, "z or out is null");
        }
        let map = &r.trainer.state().map;
        if len != map.dim() {
            return fail(
                TscStatus::InvalidArgument,
                format!("z has length {len}, map dimension is {}", map.dim()),
            );
        }
        match map.log_q(std::slice::from_raw_parts(z, len)) {
            Ok(v) => {
                *out = v;
                TscStatus::Ok
            }
            Err(e) => fail(TscStatus::Numerical, e.to_string()),
        }
    })
}

/// Runs a full experiment from a config file, writing artifacts like the CLI.
///
/// # Safety
/// `config_path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn tsc_run_experiment(config_path: *const c_char) -> TscStatus {
    guard(|| {
        let path = match read_str(config_path, "config_path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        let config = match parse_config(Path::new(path)) {
            Ok(c) => c,
            Err(e @ ConfigError::Read { .. }) => return fail(TscStatus::Io, e.to_string()),
            Err(e) => return fail(TscStatus::InvalidConfig, e.to_string()),
        };
        match run_experiment(&config) {
            Ok(_) => TscStatus::Ok,
            Err(e) => fail(run_status(&e), e.to_string()),
        }
    })
}

/// Message for the last failure on this thread; empty after a success.
/// Valid until the next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn tsc_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tsc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
