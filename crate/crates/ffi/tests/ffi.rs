use std::ffi::{CStr, CString};
use std::ptr;

use tsclimb_ffi::*;

fn config(iterations: u64, seed: u64) -> CString {
    CString::new(format!(
        r#"{{"target":{{"name":"gaussian"}},"trainer":{{"method":"tsc","iterations":{iterations},"freeze_window":10}},"seed":{seed}}}"#
    ))
    .unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(tsc_last_error_message()) }
        .to_string_lossy()
        .into_owned()
}

fn create(cfg: &CString) -> *mut TscRun {
    let mut run = ptr::null_mut();
    let status = unsafe { tsc_run_create(cfg.as_ptr(), &mut run) };
    assert_eq!(status, TscStatus::Ok, "{}", last_error());
    assert!(!run.is_null());
    run
}

fn params(run: *const TscRun) -> Vec<f64> {
    let n = unsafe { tsc_run_param_count(run) };
    let mut buf = vec![0.0; n];
    let mut written = 0;
    let s = unsafe { tsc_run_flow_params(run, buf.as_mut_ptr(), buf.len(), &mut written) };
    assert_eq!(s, TscStatus::Ok);
    assert_eq!(written, n);
    buf
}

#[test]
fn lifecycle_and_accessors() {
    let cfg = config(50, 3);
    let run = create(&cfg);
    unsafe {
        assert_eq!(tsc_run_dim(run), 2);
        assert_eq!(tsc_run_param_count(run), 4);
        assert_eq!(tsc_run_iteration(run), 0);
        assert_eq!(tsc_run_total_iterations(run), 50);

        let mut done = 0;
        assert_eq!(tsc_run_step(run, 30, &mut done), TscStatus::Ok);
        assert_eq!(done, 30);
        assert_eq!(tsc_run_step(run, 30, &mut done), TscStatus::Ok);
        assert_eq!(done, 20);
        assert_eq!(tsc_run_iteration(run), 50);
        assert_eq!(tsc_run_step(run, 5, &mut done), TscStatus::Ok);
        assert_eq!(done, 0);

        let mut pos = [0.0; 2];
        let mut written = 0;
        assert_eq!(tsc_run_chain_position(run, pos.as_mut_ptr(), 2, &mut written), TscStatus::Ok);
        assert_eq!(written, 2);
        assert!(pos.iter().all(|v| v.is_finite()));

        // Gaussian target carries no model parameters.
        let mut written = 99;
        assert_eq!(tsc_run_theta(run, ptr::null_mut(), 0, &mut written), TscStatus::Ok);
        assert_eq!(written, 0);

        let z = [0.5, -0.5];
        let mut lq = f64::NAN;
        assert_eq!(tsc_run_log_q(run, z.as_ptr(), 2, &mut lq), TscStatus::Ok);
        assert!(lq.is_finite());
        tsc_run_free(run);
    }
}

#[test]
fn same_seed_same_parameters() {
    let cfg = config(40, 11);
    let (a, b) = (create(&cfg), create(&cfg));
    unsafe {
        tsc_run_step(a, 40, ptr::null_mut());
        tsc_run_step(b, 40, ptr::null_mut());
    }
    assert_eq!(params(a), params(b));
    let c = create(&config(40, 12));
    unsafe { tsc_run_step(c, 40, ptr::null_mut()) };
    assert_ne!(params(a), params(c));
    unsafe {
        tsc_run_free(a);
        tsc_run_free(b);
        tsc_run_free(c);
    }
}

#[test]
fn short_buffer_reports_required_length() {
    let run = create(&config(5, 0));
    let mut buf = [7.0; 3];
    let mut written = 0;
    let s = unsafe { tsc_run_flow_params(run, buf.as_mut_ptr(), buf.len(), &mut written) };
    assert_eq!(s, TscStatus::BufferTooSmall);
    assert_eq!(written, 4);
    assert_eq!(buf, [7.0; 3]);
    assert!(last_error().contains("4 needed"));
    unsafe { tsc_run_free(run) };
}

#[test]
fn null_and_invalid_inputs() {
    unsafe {
        let mut run = ptr::null_mut();
        assert_eq!(tsc_run_create(ptr::null(), &mut run), TscStatus::NullPointer);
        assert!(run.is_null());
        let cfg = config(5, 0);
        assert_eq!(tsc_run_create(cfg.as_ptr(), ptr::null_mut()), TscStatus::NullPointer);
        assert_eq!(tsc_run_step(ptr::null_mut(), 1, ptr::null_mut()), TscStatus::NullPointer);
        assert_eq!(tsc_run_dim(ptr::null()), 0);
        tsc_run_free(ptr::null_mut());

        let bad = CString::new(r#"{"target":{"name":"nope"},"trainer":{"method":"tsc"}}"#).unwrap();
        assert_eq!(tsc_run_create(bad.as_ptr(), &mut run), TscStatus::InvalidConfig);
        assert!(!last_error().is_empty());
        let garbage = CString::new("{").unwrap();
        assert_eq!(tsc_run_create(garbage.as_ptr(), &mut run), TscStatus::InvalidConfig);

        let run = create(&cfg);
        assert!(last_error().is_empty());
        let z = [0.0; 3];
        let mut out = 0.0;
        assert_eq!(tsc_run_log_q(run, z.as_ptr(), 3, &mut out), TscStatus::InvalidArgument);
        tsc_run_free(run);
    }
}

#[test]
fn experiment_from_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg_path = dir.path().join("cfg.json");
    std::fs::write(
        &cfg_path,
        format!(
            r#"{{"target":{{"name":"gaussian"}},"trainer":{{"method":"msc","iterations":60,"freeze_window":10}},"output_dir":{:?},"eval":{{"n_posterior_samples":100}}}}"#,
            out.to_str().unwrap()
        ),
    )
    .unwrap();
    let p = CString::new(cfg_path.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { tsc_run_experiment(p.as_ptr()) }, TscStatus::Ok, "{}", last_error());
    assert!(out.join("summary.json").is_file());
    assert!(out.join("trace.csv").is_file());

    let missing = CString::new(dir.path().join("absent.json").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { tsc_run_experiment(missing.as_ptr()) }, TscStatus::Io);
}

#[test]
fn version_is_crate_version() {
    let v = unsafe { CStr::from_ptr(tsc_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/tsclimb.h")).unwrap();
    for name in [
        "tsc_run_create",
        "tsc_run_free",
        "tsc_run_step",
        "tsc_run_iteration",
        "tsc_run_total_iterations",
        "tsc_run_dim",
        "tsc_run_param_count",
        "tsc_run_flow_params",
        "tsc_run_theta",
        "tsc_run_chain_position",
        "tsc_run_log_q",
        "tsc_run_experiment",
        "tsc_last_error_message",
        "tsc_version",
        "TSC_STATUS_BUFFER_TOO_SMALL = 5",
        "typedef struct TscRun TscRun",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}
