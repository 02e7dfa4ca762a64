#ifndef TSCLIMB_H
#define TSCLIMB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result codes shared by every exported function.
 */
typedef enum TscStatus {
  TSC_STATUS_OK = 0,
  TSC_STATUS_NULL_POINTER = 1,
  TSC_STATUS_INVALID_CONFIG = 2,
  TSC_STATUS_IO = 3,
  TSC_STATUS_NUMERICAL = 4,
  TSC_STATUS_BUFFER_TOO_SMALL = 5,
  TSC_STATUS_PANIC = 6,
  TSC_STATUS_INVALID_ARGUMENT = 7,
} TscStatus;

/*
 Opaque training run.
 */
typedef struct TscRun TscRun;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Creates a run from a JSON experiment config (same schema as the CLI).

 # Safety
 `config_json` must be a NUL-terminated string and `out` a valid pointer.
 The handle must be released with [`tsc_run_free`].
 */
enum TscStatus tsc_run_create(const char *config_json, struct TscRun **out);

/*
 Releases a run. Null is ignored.

 # Safety
 `run` must come from [`tsc_run_create`] and not be used afterwards.
 */
void tsc_run_free(struct TscRun *run);

/*
 Advances the run by up to `n` iterations, stopping at the configured
 total. `done` (nullable) receives the number actually taken.

 # Safety
 `run` must be a live handle; `done` null or valid.
 */
enum TscStatus tsc_run_step(struct TscRun *run, uint64_t n, uint64_t *done);

/*
 Iterations completed so far (0 for a null handle).

 # Safety
 `run` must be null or a live handle.
 */
uint64_t tsc_run_iteration(const struct TscRun *run);

/*
 Total iterations the config asks for (0 for a null handle).

 # Safety
 `run` must be null or a live handle.
 */
uint64_t tsc_run_total_iterations(const struct TscRun *run);

/*
 Latent dimension (0 for a null handle).

 # Safety
 `run` must be null or a live handle.
 */
uintptr_t tsc_run_dim(const struct TscRun *run);

/*
 Number of map parameters (0 for a null handle).

 # Safety
 `run` must be null or a live handle.
 */
uintptr_t tsc_run_param_count(const struct TscRun *run);

/*
 Copies the flat map parameters.

 # Safety
 `run` live; `buf` valid for `len` doubles; `written` null or valid.
 */
enum TscStatus tsc_run_flow_params(const struct TscRun *run,
                                   double *buf,
                                   uintptr_t len,
                                   uintptr_t *written);

/*
 Copies the current model parameters θ.

 # Safety
 As [`tsc_run_flow_params`].
 */
enum TscStatus tsc_run_theta(const struct TscRun *run,
                             double *buf,
                             uintptr_t len,
                             uintptr_t *written);

/*
 Copies the chain's current position (warped space for TSC).

 # Safety
 As [`tsc_run_flow_params`].
 */
enum TscStatus tsc_run_chain_position(const struct TscRun *run,
                                      double *buf,
                                      uintptr_t len,
                                      uintptr_t *written);

/*
 Evaluates `log q(z)` under the current map.

 # Safety
 `run` live; `z` valid for `len` doubles; `out` valid.
 */
enum TscStatus tsc_run_log_q(const struct TscRun *run, const double *z, uintptr_t len, double *out);

/*
 Runs a full experiment from a config file, writing artifacts like the CLI.

 # Safety
 `config_path` must be a NUL-terminated string.
 */
enum TscStatus tsc_run_experiment(const char *config_path);

/*
 Message for the last failure on this thread; empty after a success.
 Valid until the next call into this library from the same thread.
 */
const char *tsc_last_error_message(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *tsc_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TSCLIMB_H */
