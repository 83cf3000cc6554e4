//! C ABI for the profile monitor.
//!
//! Everything crosses the boundary through three conventions:
//!
//! * **Opaque handles.** [`KsmonMonitorBuilder`] and [`KsmonMonitor`] are
//!   heap-allocated by this library and only ever touched through pointers;
//!   release them with the matching `*_free` function.
//! * **Status codes.** Every fallible function returns a [`KsmonStatus`];
//!   results travel through out-pointers that are written only on
//!   `KSMON_STATUS_OK`.
//! * **Thread-local error text.** After a non-OK status,
//!   [`ksmon_last_error_message`] returns a human-readable description of
//!   what went wrong on the calling thread.
//!
//! A typical session from C:
//!
//! ```c
//! KsmonMonitorBuilder *builder = NULL;
//! ksmon_builder_new(3, 0.137, 42, KSMON_REGRESSOR_TREE,
//!                   KSMON_RESIDUAL_SCHEME_LEAVE_ONE_OUT_ENSEMBLE, &builder);
//! for (int j = 0; j < m; j++)
//!     ksmon_builder_add_historical(builder, xs[j], ys[j], n);
//! KsmonMonitor *monitor = NULL;
//! ksmon_builder_finish(builder, &monitor); /* consumes the builder */
//! KsmonStepOutcome outcome;
//! ksmon_monitor_step(monitor, new_xs, new_ys, n, &outcome);
//! if (outcome.alarmed) { ... }
//! ksmon_monitor_free(monitor);
//! ```
//!
//! The panic boundary is sealed: a Rust panic inside any call is caught and
//! reported as `KSMON_STATUS_INTERNAL` rather than unwinding into C.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use ksmon::data::{Ecdf, ObservationBatch};
use ksmon::monitor::{fit_historical, ks_distance, HistoricalResidualScheme, MonitorState};
use ksmon::tree::FitConfig;
use ksmon::Error;

/// Result of every fallible call in this interface.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum KsmonStatus {
    /// The call succeeded; out-pointers have been written.
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// A string argument was not valid UTF-8.
    Utf8 = 2,
    /// An argument violated a documented precondition.
    InvalidInput = 3,
    /// A point had the wrong number of predictors for this monitor.
    DimensionMismatch = 4,
    /// The handle cannot support the requested operation.
    InvalidState = 5,
    /// (De)serialization failed: malformed JSON, unsupported schema, or I/O.
    Serialization = 6,
    /// An unexpected internal failure (including a caught panic).
    Internal = 7,
}

/// Which regression method newly fitted steps use.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum KsmonRegressor {
    /// A single CART regression tree per step.
    Tree = 0,
    /// A bootstrap ensemble of trees per step.
    Forest = 1,
}

/// How residuals for the historical batches are computed.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum KsmonResidualScheme {
    /// Each historical batch is predicted by the other m-1 regressors.
    LeaveOneOutEnsemble = 0,
    /// Each historical batch is predicted by its own regressor.
    InSample = 1,
    /// Each historical batch is predicted by the mean of all m regressors
    /// (its own included).
    FullEnsemble = 2,
}

/// Fixed-size summary of one monitoring step.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct KsmonStepOutcome {
    /// The time index that was just monitored.
    pub t: i64,
    /// The monitoring statistic: the largest KS distance between this
    /// step's residual ECDF and every historical/previous one.
    pub xi: f64,
    /// Whether xi reached the control limit.
    pub alarmed: bool,
    /// Time index of the history entry attaining the maximum distance.
    pub argmax_j: i64,
}

/// Collects historical batches before the monitor starts.
pub struct KsmonMonitorBuilder {
    p: usize,
    ucl: f64,
    fit: FitConfig,
    scheme: HistoricalResidualScheme,
    batches: Vec<ObservationBatch>,
}

/// A live change-point monitor (opaque).
pub struct KsmonMonitor {
    inner: MonitorState,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let text = CString::new(message)
        .unwrap_or_else(|_| CString::new("error message contained a NUL byte").unwrap());
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(text));
}

fn fail(status: KsmonStatus, message: impl Into<String>) -> KsmonStatus {
    set_error(message.into());
    status
}

fn status_of(error: &Error) -> KsmonStatus {
    match error {
        Error::InvalidInput(_) | Error::NoSolution(_) | Error::Manifest(_) => {
            KsmonStatus::InvalidInput
        }
        Error::DimensionMismatch { .. } => KsmonStatus::DimensionMismatch,
        Error::InvalidState(_) => KsmonStatus::InvalidState,
        Error::SchemaVersion { .. }
        | Error::MalformedArtifact(_)
        | Error::Json(_)
        | Error::Csv(_)
        | Error::Toml(_)
        | Error::Io(_) => KsmonStatus::Serialization,
        Error::CalibrationFailed { .. } => KsmonStatus::Internal,
    }
}

fn report(error: Error) -> KsmonStatus {
    let status = status_of(&error);
    set_error(error.to_string());
    status
}

/// Run a fallible body behind the panic boundary.
fn guard(body: impl FnOnce() -> KsmonStatus) -> KsmonStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => fail(KsmonStatus::Internal, "internal panic"),
    }
}

/// Last error message for the calling thread, or null if no call on this
/// thread has failed yet.
///
/// The pointer stays valid until the next failing `ksmon_*` call on the
/// same thread; do not free it.
#[no_mangle]
pub extern "C" fn ksmon_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(std::ptr::null(), |s| s.as_ptr()))
}

/// Start building a monitor over profiles with `p` predictors.
///
/// `ucl` is the alarm threshold for the monitoring statistic (from
/// calibration), `seed` drives all fitting randomness, and `regressor` /
/// `scheme` select the per-step model and the historical residual scheme.
/// On success writes a builder handle to `out`; release it with either
/// `ksmon_builder_finish` or `ksmon_builder_free`.
///
/// # Safety
/// `out` must be a valid pointer to a `KsmonMonitorBuilder*`.
#[no_mangle]
pub unsafe extern "C" fn ksmon_builder_new(
    p: usize,
    ucl: f64,
    seed: u64,
    regressor: KsmonRegressor,
    scheme: KsmonResidualScheme,
    out: *mut *mut KsmonMonitorBuilder,
) -> KsmonStatus {
    guard(|| {
        if out.is_null() {
            return fail(KsmonStatus::NullPointer, "out pointer is null");
        }
        if p == 0 {
            return fail(KsmonStatus::InvalidInput, "p must be at least 1");
        }
        if !ucl.is_finite() || ucl <= 0.0 {
            return fail(KsmonStatus::InvalidInput, "ucl must be finite and positive");
        }
        let base = match regressor {
            KsmonRegressor::Tree => FitConfig::tree(),
            KsmonRegressor::Forest => FitConfig::forest(),
        };
        let scheme = match scheme {
            KsmonResidualScheme::LeaveOneOutEnsemble => {
                HistoricalResidualScheme::LeaveOneOutEnsemble
            }
            KsmonResidualScheme::InSample => HistoricalResidualScheme::InSample,
            KsmonResidualScheme::FullEnsemble => HistoricalResidualScheme::FullEnsemble,
        };
        let builder = KsmonMonitorBuilder {
            p,
            ucl,
            fit: FitConfig { rng_seed: seed, ..base },
            scheme,
            batches: Vec::new(),
        };
        unsafe { out.write(Box::into_raw(Box::new(builder))) };
        KsmonStatus::Ok
    })
}

/// Append one historical batch of `n` observations.
///
/// `predictors` holds `n * p` values in row-major order (all predictors of
/// observation 0, then observation 1, …); `responses` holds `n` values.
/// Batches are taken as the time-ordered history: the first one added is
/// the oldest.
///
/// # Safety
/// `builder` must come from `ksmon_builder_new` and not yet be consumed;
/// `predictors` and `responses` must point to `n * p` and `n` readable
/// doubles respectively.
#[no_mangle]
pub unsafe extern "C" fn ksmon_builder_add_historical(
    builder: *mut KsmonMonitorBuilder,
    predictors: *const f64,
    responses: *const f64,
    n: usize,
) -> KsmonStatus {
    guard(|| {
        let Some(builder) = (unsafe { builder.as_mut() }) else {
            return fail(KsmonStatus::NullPointer, "builder is null");
        };
        if predictors.is_null() || responses.is_null() {
            return fail(KsmonStatus::NullPointer, "data pointer is null");
        }
        if n == 0 {
            return fail(KsmonStatus::InvalidInput, "a batch needs at least one observation");
        }
        let xs = unsafe { std::slice::from_raw_parts(predictors, n * builder.p) };
        let ys = unsafe { std::slice::from_raw_parts(responses, n) };
        // real time indices are assigned in finish, once m is known
        match ObservationBatch::new(0, builder.p, xs.to_vec(), ys.to_vec()) {
            Ok(batch) => {
                builder.batches.push(batch);
                KsmonStatus::Ok
            }
            Err(error) => report(error),
        }
    })
}

/// Fit the historical regressors and hand over a running monitor.
///
/// Consumes the builder in all cases — do not use or free it afterwards.
/// On success writes the monitor handle to `out`; release it with
/// `ksmon_monitor_free`.
///
/// # Safety
/// `builder` must come from `ksmon_builder_new` and not yet be consumed;
/// `out` must be a valid pointer to a `KsmonMonitor*`.
#[no_mangle]
pub unsafe extern "C" fn ksmon_builder_finish(
    builder: *mut KsmonMonitorBuilder,
    out: *mut *mut KsmonMonitor,
) -> KsmonStatus {
    guard(|| {
        if builder.is_null() {
            return fail(KsmonStatus::NullPointer, "builder is null");
        }
        let builder = unsafe { Box::from_raw(builder) };
        if out.is_null() {
            return fail(KsmonStatus::NullPointer, "out pointer is null");
        }
        let mut batches = builder.batches;
        let m = batches.len() as i64;
        for (j, batch) in batches.iter_mut().enumerate() {
            batch.set_time_index(j as i64 + 1 - m);
        }
        let entries = match fit_historical(&batches, &builder.fit, builder.scheme) {
            Ok(entries) => entries,
            Err(error) => return report(error),
        };
        match MonitorState::new(entries, builder.ucl, builder.fit) {
            Ok(inner) => {
                unsafe { out.write(Box::into_raw(Box::new(KsmonMonitor { inner }))) };
                KsmonStatus::Ok
            }
            Err(error) => report(error),
        }
    })
}

/// Release a builder without finishing it. Null is a no-op.
///
/// # Safety
/// `builder` must come from `ksmon_builder_new` and not yet be consumed.
#[no_mangle]
pub unsafe extern "C" fn ksmon_builder_free(builder: *mut KsmonMonitorBuilder) {
    if !builder.is_null() {
        drop(unsafe { Box::from_raw(builder) });
    }
}

/// Monitor one new batch: compute its statistic, fit its regressor, and
/// advance the clock.
///
/// Layout of `predictors`/`responses` is as in
/// `ksmon_builder_add_historical`. The outcome (statistic, alarm flag,
/// closest history entry) is written to `out`. The batch is absorbed into
/// the history even when it raises an alarm; call `ksmon_monitor_restart`
/// to drop post-history steps after an alarm is handled.
///
/// # Safety
/// `monitor` must come from `ksmon_builder_finish` or
/// `ksmon_monitor_from_json`; `predictors`/`responses` must point to
/// `n * p` / `n` readable doubles; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ksmon_monitor_step(
    monitor: *mut KsmonMonitor,
    predictors: *const f64,
    responses: *const f64,
    n: usize,
    out: *mut KsmonStepOutcome,
) -> KsmonStatus {
    guard(|| {
        let Some(monitor) = (unsafe { monitor.as_mut() }) else {
            return fail(KsmonStatus::NullPointer, "monitor is null");
        };
        if predictors.is_null() || responses.is_null() || out.is_null() {
            return fail(KsmonStatus::NullPointer, "data or out pointer is null");
        }
        if n == 0 {
            return fail(KsmonStatus::InvalidInput, "a batch needs at least one observation");
        }
        let p = monitor.inner.p();
        let xs = unsafe { std::slice::from_raw_parts(predictors, n * p) };
        let ys = unsafe { std::slice::from_raw_parts(responses, n) };
        let batch =
            match ObservationBatch::new(monitor.inner.current_t(), p, xs.to_vec(), ys.to_vec()) {
                Ok(batch) => batch,
                Err(error) => return report(error),
            };
        match monitor.inner.monitor_step(&batch) {
            Ok(outcome) => {
                unsafe {
                    out.write(KsmonStepOutcome {
                        t: outcome.t,
                        xi: outcome.xi,
                        alarmed: outcome.alarmed,
                        argmax_j: outcome.argmax_j,
                    })
                };
                KsmonStatus::Ok
            }
            Err(error) => report(error),
        }
    })
}

/// Drop all post-historical steps and reset the clock to t = 1.
///
/// # Safety
/// `monitor` must be a live monitor handle.
#[no_mangle]
pub unsafe extern "C" fn ksmon_monitor_restart(monitor: *mut KsmonMonitor) -> KsmonStatus {
    guard(|| {
        let Some(monitor) = (unsafe { monitor.as_mut() }) else {
            return fail(KsmonStatus::NullPointer, "monitor is null");
        };
        monitor.inner.monitor_restart();
        KsmonStatus::Ok
    })
}

/// The time index the next `ksmon_monitor_step` call will monitor.
///
/// # Safety
/// `monitor` must be a live monitor handle; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ksmon_monitor_current_t(
    monitor: *const KsmonMonitor,
    out: *mut i64,
) -> KsmonStatus {
    guard(|| {
        let Some(monitor) = (unsafe { monitor.as_ref() }) else {
            return fail(KsmonStatus::NullPointer, "monitor is null");
        };
        if out.is_null() {
            return fail(KsmonStatus::NullPointer, "out pointer is null");
        }
        unsafe { out.write(monitor.inner.current_t()) };
        KsmonStatus::Ok
    })
}

/// Serialize the full monitor state to a JSON document.
///
/// On success writes a NUL-terminated string to `out`; release it with
/// `ksmon_string_free`.
///
/// # Safety
/// `monitor` must be a live monitor handle; `out` must be a valid pointer
/// to a `char*`.
#[no_mangle]
pub unsafe extern "C" fn ksmon_monitor_to_json(
    monitor: *const KsmonMonitor,
    out: *mut *mut c_char,
) -> KsmonStatus {
    guard(|| {
        let Some(monitor) = (unsafe { monitor.as_ref() }) else {
            return fail(KsmonStatus::NullPointer, "monitor is null");
        };
        if out.is_null() {
            return fail(KsmonStatus::NullPointer, "out pointer is null");
        }
        let json = match monitor.inner.to_json() {
            Ok(json) => json,
            Err(error) => return report(error),
        };
        match CString::new(json) {
            Ok(text) => {
                unsafe { out.write(text.into_raw()) };
                KsmonStatus::Ok
            }
            Err(_) => fail(KsmonStatus::Internal, "serialized state contained a NUL byte"),
        }
    })
}

/// Rebuild a monitor from a JSON document produced by
/// `ksmon_monitor_to_json`.
///
/// On success writes the monitor handle to `out`; release it with
/// `ksmon_monitor_free`.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be a valid pointer
/// to a `KsmonMonitor*`.
#[no_mangle]
pub unsafe extern "C" fn ksmon_monitor_from_json(
    json: *const c_char,
    out: *mut *mut KsmonMonitor,
) -> KsmonStatus {
    guard(|| {
        if json.is_null() || out.is_null() {
            return fail(KsmonStatus::NullPointer, "json or out pointer is null");
        }
        let text = match unsafe { CStr::from_ptr(json) }.to_str() {
            Ok(text) => text,
            Err(_) => return fail(KsmonStatus::Utf8, "json is not valid UTF-8"),
        };
        match MonitorState::from_json(text) {
            Ok(inner) => {
                unsafe { out.write(Box::into_raw(Box::new(KsmonMonitor { inner }))) };
                KsmonStatus::Ok
            }
            Err(error) => report(error),
        }
    })
}

/// Release a monitor handle. Null is a no-op.
///
/// # Safety
/// `monitor` must come from this library and not already be freed.
#[no_mangle]
pub unsafe extern "C" fn ksmon_monitor_free(monitor: *mut KsmonMonitor) {
    if !monitor.is_null() {
        drop(unsafe { Box::from_raw(monitor) });
    }
}

/// Release a string returned by `ksmon_monitor_to_json`. Null is a no-op.
///
/// # Safety
/// `text` must come from this library and not already be freed.
#[no_mangle]
pub unsafe extern "C" fn ksmon_string_free(text: *mut c_char) {
    if !text.is_null() {
        drop(unsafe { CString::from_raw(text) });
    }
}

/// Two-sample Kolmogorov-Smirnov distance between the empirical CDFs of
/// two samples (order of each sample is irrelevant).
///
/// # Safety
/// `a`/`b` must point to `a_len`/`b_len` readable doubles; `out` must be
/// a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ksmon_ks_distance(
    a: *const f64,
    a_len: usize,
    b: *const f64,
    b_len: usize,
    out: *mut f64,
) -> KsmonStatus {
    guard(|| {
        if a.is_null() || b.is_null() || out.is_null() {
            return fail(KsmonStatus::NullPointer, "sample or out pointer is null");
        }
        let a = unsafe { std::slice::from_raw_parts(a, a_len) };
        let b = unsafe { std::slice::from_raw_parts(b, b_len) };
        let (a, b) = match (Ecdf::from_values(a), Ecdf::from_values(b)) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(error), _) | (_, Err(error)) => return report(error),
        };
        unsafe { out.write(ks_distance(&a, &b)) };
        KsmonStatus::Ok
    })
}
