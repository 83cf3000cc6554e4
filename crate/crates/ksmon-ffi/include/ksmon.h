/* C interface for the ksmon profile-monitoring library. */

#ifndef KSMON_H
#define KSMON_H

/* Generated by cbindgen from the ksmon-ffi crate; do not edit by hand. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

// Result of every fallible call in this interface.
typedef enum {
  // The call succeeded; out-pointers have been written.
  KSMON_STATUS_OK = 0,
  // A required pointer argument was null.
  KSMON_STATUS_NULL_POINTER = 1,
  // A string argument was not valid UTF-8.
  KSMON_STATUS_UTF8 = 2,
  // An argument violated a documented precondition.
  KSMON_STATUS_INVALID_INPUT = 3,
  // A point had the wrong number of predictors for this monitor.
  KSMON_STATUS_DIMENSION_MISMATCH = 4,
  // The handle cannot support the requested operation.
  KSMON_STATUS_INVALID_STATE = 5,
  // (De)serialization failed: malformed JSON, unsupported schema, or I/O.
  KSMON_STATUS_SERIALIZATION = 6,
  // An unexpected internal failure (including a caught panic).
  KSMON_STATUS_INTERNAL = 7,
} KsmonStatus;

// Which regression method newly fitted steps use.
typedef enum {
  // A single CART regression tree per step.
  KSMON_REGRESSOR_TREE = 0,
  // A bootstrap ensemble of trees per step.
  KSMON_REGRESSOR_FOREST = 1,
} KsmonRegressor;

// How residuals for the historical batches are computed.
typedef enum {
  // Each historical batch is predicted by the other m-1 regressors.
  KSMON_RESIDUAL_SCHEME_LEAVE_ONE_OUT_ENSEMBLE = 0,
  // Each historical batch is predicted by its own regressor.
  KSMON_RESIDUAL_SCHEME_IN_SAMPLE = 1,
  // Each historical batch is predicted by the mean of all m regressors
  // (its own included).
  KSMON_RESIDUAL_SCHEME_FULL_ENSEMBLE = 2,
} KsmonResidualScheme;

// A live change-point monitor (opaque).
typedef struct KsmonMonitor KsmonMonitor;

// Collects historical batches before the monitor starts.
typedef struct KsmonMonitorBuilder KsmonMonitorBuilder;

// Fixed-size summary of one monitoring step.
typedef struct {
  // The time index that was just monitored.
  int64_t t;
  // The monitoring statistic: the largest KS distance between this
  // step's residual ECDF and every historical/previous one.
  double xi;
  // Whether xi reached the control limit.
  bool alarmed;
  // Time index of the history entry attaining the maximum distance.
  int64_t argmax_j;
} KsmonStepOutcome;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Last error message for the calling thread, or null if no call on this
// thread has failed yet.
//
// The pointer stays valid until the next failing `ksmon_*` call on the
// same thread; do not free it.
const char *ksmon_last_error_message(void);

// Start building a monitor over profiles with `p` predictors.
//
// `ucl` is the alarm threshold for the monitoring statistic (from
// calibration), `seed` drives all fitting randomness, and `regressor` /
// `scheme` select the per-step model and the historical residual scheme.
// On success writes a builder handle to `out`; release it with either
// `ksmon_builder_finish` or `ksmon_builder_free`.
//
// # Safety
// `out` must be a valid pointer to a `KsmonMonitorBuilder*`.
KsmonStatus ksmon_builder_new(uintptr_t p,
                              double ucl,
                              uint64_t seed,
                              KsmonRegressor regressor,
                              KsmonResidualScheme scheme,
                              KsmonMonitorBuilder **out);

// Append one historical batch of `n` observations.
//
// `predictors` holds `n * p` values in row-major order (all predictors of
// observation 0, then observation 1, …); `responses` holds `n` values.
// Batches are taken as the time-ordered history: the first one added is
// the oldest.
//
// # Safety
// `builder` must come from `ksmon_builder_new` and not yet be consumed;
// `predictors` and `responses` must point to `n * p` and `n` readable
// doubles respectively.
KsmonStatus ksmon_builder_add_historical(KsmonMonitorBuilder *builder,
                                         const double *predictors,
                                         const double *responses,
                                         uintptr_t n);

// Fit the historical regressors and hand over a running monitor.
//
// Consumes the builder in all cases — do not use or free it afterwards.
// On success writes the monitor handle to `out`; release it with
// `ksmon_monitor_free`.
//
// # Safety
// `builder` must come from `ksmon_builder_new` and not yet be consumed;
// `out` must be a valid pointer to a `KsmonMonitor*`.
KsmonStatus ksmon_builder_finish(KsmonMonitorBuilder *builder,
                                 KsmonMonitor **out);

// Release a builder without finishing it. Null is a no-op.
//
// # Safety
// `builder` must come from `ksmon_builder_new` and not yet be consumed.
void ksmon_builder_free(KsmonMonitorBuilder *builder);

// Monitor one new batch: compute its statistic, fit its regressor, and
// advance the clock.
//
// Layout of `predictors`/`responses` is as in
// `ksmon_builder_add_historical`. The outcome (statistic, alarm flag,
// closest history entry) is written to `out`. The batch is absorbed into
// the history even when it raises an alarm; call `ksmon_monitor_restart`
// to drop post-history steps after an alarm is handled.
//
// # Safety
// `monitor` must come from `ksmon_builder_finish` or
// `ksmon_monitor_from_json`; `predictors`/`responses` must point to
// `n * p` / `n` readable doubles; `out` must be a valid pointer.
KsmonStatus ksmon_monitor_step(KsmonMonitor *monitor,
                               const double *predictors,
                               const double *responses,
                               uintptr_t n,
                               KsmonStepOutcome *out);

// Drop all post-historical steps and reset the clock to t = 1.
//
// # Safety
// `monitor` must be a live monitor handle.
KsmonStatus ksmon_monitor_restart(KsmonMonitor *monitor);

// The time index the next `ksmon_monitor_step` call will monitor.
//
// # Safety
// `monitor` must be a live monitor handle; `out` must be valid.
KsmonStatus ksmon_monitor_current_t(const KsmonMonitor *monitor,
                                    int64_t *out);

// Serialize the full monitor state to a JSON document.
//
// On success writes a NUL-terminated string to `out`; release it with
// `ksmon_string_free`.
//
// # Safety
// `monitor` must be a live monitor handle; `out` must be a valid pointer
// to a `char*`.
KsmonStatus ksmon_monitor_to_json(const KsmonMonitor *monitor,
                                  char **out);

// Rebuild a monitor from a JSON document produced by
// `ksmon_monitor_to_json`.
//
// On success writes the monitor handle to `out`; release it with
// `ksmon_monitor_free`.
//
// # Safety
// `json` must be a NUL-terminated string; `out` must be a valid pointer
// to a `KsmonMonitor*`.
KsmonStatus ksmon_monitor_from_json(const char *json,
                                    KsmonMonitor **out);

// Release a monitor handle. Null is a no-op.
//
// # Safety
// `monitor` must come from this library and not already be freed.
void ksmon_monitor_free(KsmonMonitor *monitor);

// Release a string returned by `ksmon_monitor_to_json`. Null is a no-op.
//
// # Safety
// `text` must come from this library and not already be freed.
void ksmon_string_free(char *text);

// Two-sample Kolmogorov-Smirnov distance between the empirical CDFs of
// two samples (order of each sample is irrelevant).
//
// # Safety
// `a`/`b` must point to `a_len`/`b_len` readable doubles; `out` must be
// a valid pointer.
KsmonStatus ksmon_ks_distance(const double *a,
                              uintptr_t a_len,
                              const double *b,
                              uintptr_t b_len,
                              double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KSMON_H */
