//! Exercise the C ABI exactly as a foreign caller would: raw pointers,
//! status codes, and manual frees.

use std::ffi::CStr;
use std::ptr;

use ksmon_ffi::*;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

/// One synthetic batch from y = 2 x1 + noise.
fn batch(n: usize, p: usize, rng: &mut StdRng, shift: f64) -> (Vec<f64>, Vec<f64>) {
    let mut xs = Vec::with_capacity(n * p);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let mut row = vec![0.0; p];
        for value in row.iter_mut() {
            *value = rng.random::<f64>();
        }
        ys.push(2.0 * row[0] + 0.1 * (rng.random::<f64>() - 0.5) + shift);
        xs.extend_from_slice(&row);
    }
    (xs, ys)
}

fn last_error() -> String {
    let ptr = ksmon_last_error_message();
    assert!(!ptr.is_null(), "expected an error message");
    unsafe { CStr::from_ptr(ptr) }.to_str().unwrap().to_string()
}

unsafe fn build_monitor(m: usize, n: usize, p: usize, ucl: f64, seed: u64) -> *mut KsmonMonitor {
    let mut builder: *mut KsmonMonitorBuilder = ptr::null_mut();
    assert_eq!(
        ksmon_builder_new(
            p,
            ucl,
            seed,
            KsmonRegressor::Tree,
            KsmonResidualScheme::LeaveOneOutEnsemble,
            &mut builder,
        ),
        KsmonStatus::Ok
    );
    let mut rng = StdRng::seed_from_u64(seed);
    for _ in 0..m {
        let (xs, ys) = batch(n, p, &mut rng, 0.0);
        assert_eq!(
            ksmon_builder_add_historical(builder, xs.as_ptr(), ys.as_ptr(), n),
            KsmonStatus::Ok
        );
    }
    let mut monitor: *mut KsmonMonitor = ptr::null_mut();
    assert_eq!(ksmon_builder_finish(builder, &mut monitor), KsmonStatus::Ok);
    assert!(!monitor.is_null());
    monitor
}

#[test]
fn full_session_steps_alarms_and_restarts() {
    unsafe {
        let (m, n, p) = (4usize, 48usize, 2usize);
        let monitor = build_monitor(m, n, p, 0.5, 9);
        let mut rng = StdRng::seed_from_u64(1000);

        // in-control steps stay quiet
        let mut outcome = KsmonStepOutcome { t: 0, xi: 0.0, alarmed: false, argmax_j: 0 };
        for expected_t in 1..=3i64 {
            let (xs, ys) = batch(n, p, &mut rng, 0.0);
            assert_eq!(
                ksmon_monitor_step(monitor, xs.as_ptr(), ys.as_ptr(), n, &mut outcome),
                KsmonStatus::Ok
            );
            assert_eq!(outcome.t, expected_t);
            assert!(!outcome.alarmed, "false alarm: xi = {}", outcome.xi);
            assert!((-(m as i64 - 1)..expected_t).contains(&outcome.argmax_j));
        }
        let mut t = 0i64;
        assert_eq!(ksmon_monitor_current_t(monitor, &mut t), KsmonStatus::Ok);
        assert_eq!(t, 4);

        // a +10 shift must alarm with a near-total KS separation
        let (xs, ys) = batch(n, p, &mut rng, 10.0);
        assert_eq!(
            ksmon_monitor_step(monitor, xs.as_ptr(), ys.as_ptr(), n, &mut outcome),
            KsmonStatus::Ok
        );
        assert!(outcome.alarmed);
        assert!(outcome.xi > 0.9, "xi = {}", outcome.xi);

        // restart truncates back to the historical window
        assert_eq!(ksmon_monitor_restart(monitor), KsmonStatus::Ok);
        assert_eq!(ksmon_monitor_current_t(monitor, &mut t), KsmonStatus::Ok);
        assert_eq!(t, 1);

        ksmon_monitor_free(monitor);
    }
}

#[test]
fn json_round_trip_resumes_identically() {
    unsafe {
        let (m, n, p) = (3usize, 32usize, 1usize);
        let monitor = build_monitor(m, n, p, 1.5, 17);
        let mut rng = StdRng::seed_from_u64(4);
        let mut outcome = KsmonStepOutcome { t: 0, xi: 0.0, alarmed: false, argmax_j: 0 };
        let (xs, ys) = batch(n, p, &mut rng, 0.0);
        assert_eq!(
            ksmon_monitor_step(monitor, xs.as_ptr(), ys.as_ptr(), n, &mut outcome),
            KsmonStatus::Ok
        );

        let mut json: *mut std::ffi::c_char = ptr::null_mut();
        assert_eq!(ksmon_monitor_to_json(monitor, &mut json), KsmonStatus::Ok);
        let text = CStr::from_ptr(json).to_str().unwrap().to_string();
        assert!(text.contains("\"schema_version\""));

        let mut resumed: *mut KsmonMonitor = ptr::null_mut();
        assert_eq!(ksmon_monitor_from_json(json, &mut resumed), KsmonStatus::Ok);
        ksmon_string_free(json);

        // both copies must observe the next batch identically
        let (xs, ys) = batch(n, p, &mut rng, 0.0);
        let mut original = KsmonStepOutcome { t: 0, xi: 0.0, alarmed: false, argmax_j: 0 };
        let mut restored = KsmonStepOutcome { t: 0, xi: 0.0, alarmed: false, argmax_j: 0 };
        assert_eq!(
            ksmon_monitor_step(monitor, xs.as_ptr(), ys.as_ptr(), n, &mut original),
            KsmonStatus::Ok
        );
        assert_eq!(
            ksmon_monitor_step(resumed, xs.as_ptr(), ys.as_ptr(), n, &mut restored),
            KsmonStatus::Ok
        );
        assert_eq!(original.t, restored.t);
        assert_eq!(original.xi, restored.xi);
        assert_eq!(original.argmax_j, restored.argmax_j);

        ksmon_monitor_free(monitor);
        ksmon_monitor_free(resumed);
    }
}

#[test]
fn invalid_json_reports_serialization_with_message() {
    unsafe {
        let mut resumed: *mut KsmonMonitor = ptr::null_mut();
        let garbage = c"{not json";
        assert_eq!(
            ksmon_monitor_from_json(garbage.as_ptr(), &mut resumed),
            KsmonStatus::Serialization
        );
        assert!(resumed.is_null());
        assert!(last_error().contains("json"), "message: {}", last_error());
    }
}

#[test]
fn null_pointers_are_rejected_not_dereferenced() {
    unsafe {
        let mut out_f = 0.0f64;
        let values = [1.0f64, 2.0];
        assert_eq!(
            ksmon_ks_distance(ptr::null(), 0, values.as_ptr(), 2, &mut out_f),
            KsmonStatus::NullPointer
        );
        assert_eq!(ksmon_monitor_restart(ptr::null_mut()), KsmonStatus::NullPointer);
        let mut outcome = KsmonStepOutcome { t: 0, xi: 0.0, alarmed: false, argmax_j: 0 };
        assert_eq!(
            ksmon_monitor_step(ptr::null_mut(), values.as_ptr(), values.as_ptr(), 2, &mut outcome),
            KsmonStatus::NullPointer
        );
        let mut builder: *mut KsmonMonitorBuilder = ptr::null_mut();
        assert_eq!(
            ksmon_builder_new(
                0,
                0.5,
                1,
                KsmonRegressor::Tree,
                KsmonResidualScheme::InSample,
                &mut builder
            ),
            KsmonStatus::InvalidInput
        );
        assert!(last_error().contains("p must be"), "message: {}", last_error());
        // frees tolerate null
        ksmon_monitor_free(ptr::null_mut());
        ksmon_builder_free(ptr::null_mut());
        ksmon_string_free(ptr::null_mut());
    }
}

#[test]
fn non_finite_and_empty_input_errors() {
    unsafe {
        let mut builder: *mut KsmonMonitorBuilder = ptr::null_mut();
        assert_eq!(
            ksmon_builder_new(
                1,
                f64::NAN,
                1,
                KsmonRegressor::Tree,
                KsmonResidualScheme::LeaveOneOutEnsemble,
                &mut builder
            ),
            KsmonStatus::InvalidInput
        );

        assert_eq!(
            ksmon_builder_new(
                1,
                0.5,
                1,
                KsmonRegressor::Tree,
                KsmonResidualScheme::LeaveOneOutEnsemble,
                &mut builder
            ),
            KsmonStatus::Ok
        );
        let xs = [0.3f64];
        let nan_ys = [f64::NAN];
        assert_eq!(
            ksmon_builder_add_historical(builder, xs.as_ptr(), nan_ys.as_ptr(), 1),
            KsmonStatus::InvalidInput
        );
        assert_eq!(
            ksmon_builder_add_historical(builder, xs.as_ptr(), nan_ys.as_ptr(), 0),
            KsmonStatus::InvalidInput
        );
        // finishing with zero historical batches is rejected and still
        // consumes the builder
        let mut monitor: *mut KsmonMonitor = ptr::null_mut();
        assert_eq!(ksmon_builder_finish(builder, &mut monitor), KsmonStatus::InvalidInput);
        assert!(monitor.is_null());
    }
}

#[test]
fn ks_distance_matches_known_fixtures() {
    unsafe {
        let mut out = -1.0f64;
        let a = [1.0f64, 2.0];
        let b = [3.0f64, 4.0];
        assert_eq!(ksmon_ks_distance(a.as_ptr(), 2, b.as_ptr(), 2, &mut out), KsmonStatus::Ok);
        assert_eq!(out, 1.0);

        let a = [0.0f64, 1.0];
        let b = [0.0f64, 2.0];
        assert_eq!(ksmon_ks_distance(a.as_ptr(), 2, b.as_ptr(), 2, &mut out), KsmonStatus::Ok);
        assert_eq!(out, 0.5);

        // identical samples in different orders
        let a = [2.0f64, 1.0, 3.0];
        let b = [3.0f64, 2.0, 1.0];
        assert_eq!(ksmon_ks_distance(a.as_ptr(), 3, b.as_ptr(), 3, &mut out), KsmonStatus::Ok);
        assert_eq!(out, 0.0);

        assert_eq!(
            ksmon_ks_distance(a.as_ptr(), 0, b.as_ptr(), 3, &mut out),
            KsmonStatus::InvalidInput
        );
    }
}

#[test]
fn generated_header_exists_and_declares_the_api() {
    let header = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("include/ksmon.h");
    let text = std::fs::read_to_string(&header)
        .unwrap_or_else(|e| panic!("missing generated header {}: {e}", header.display()));
    for symbol in [
        "KsmonStatus",
        "KsmonStepOutcome",
        "typedef struct KsmonMonitor KsmonMonitor;",
        "typedef struct KsmonMonitorBuilder KsmonMonitorBuilder;",
        "ksmon_builder_new",
        "ksmon_builder_add_historical",
        "ksmon_builder_finish",
        "ksmon_builder_free",
        "ksmon_monitor_step",
        "ksmon_monitor_restart",
        "ksmon_monitor_current_t",
        "ksmon_monitor_to_json",
        "ksmon_monitor_from_json",
        "ksmon_monitor_free",
        "ksmon_string_free",
        "ksmon_ks_distance",
        "ksmon_last_error_message",
    ] {
        assert!(text.contains(symbol), "header lacks {symbol}");
    }
}
