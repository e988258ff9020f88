/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#ifndef KOOPMAN_IS_H
#define KOOPMAN_IS_H

#include <stddef.h>
#include <stdint.h>
#include <stdbool.h>

// Result code of every fallible call.
typedef enum KisStatus {
  KIS_STATUS_OK = 0,
  KIS_STATUS_NULL_POINTER = 1,
  KIS_STATUS_INVALID_ARGUMENT = 2,
  KIS_STATUS_MODEL_NOT_FOUND = 3,
  KIS_STATUS_CONFIG = 4,
  KIS_STATUS_UNSUPPORTED = 5,
  KIS_STATUS_NUMERICAL = 6,
  KIS_STATUS_IO = 7,
  KIS_STATUS_PANIC = 8,
} KisStatus;

// Shape of the terminal event.
typedef enum KisMarginKind {
  // `x[coord] > level`
  KIS_MARGIN_KIND_HALF_SPACE = 0,
  // `|x[coord]| > level`
  KIS_MARGIN_KIND_ABS_COORD = 1,
  // `||x|| > level`; `coord` is ignored.
  KIS_MARGIN_KIND_NORM_EXTERIOR = 2,
} KisMarginKind;

// Opaque Doob controller.
typedef struct KisController KisController;

// Opaque SDE model.
typedef struct KisModel KisModel;

typedef struct KisEvent {
  enum KisMarginKind kind;
  size_t coord;
  double level;
} KisEvent;

// Summary of one ensemble.
typedef struct KisReport {
  double estimate;
  double variance;
  double relative_error;
  double proportion_in_event;
  double second_moment;
  size_t samples;
  size_t blowup_count;
  // Multiplier of the control, NaN for plain Monte Carlo.
  double multiplier;
} KisReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *kis_version(void);

// Message of the last failed call on this thread (empty after a success). The pointer stays
// valid until the next call into the library on this thread.
const char *kis_last_error_message(void);

// Builds a built-in model (`ou1d`, `nonnormal2d`, `brownian_osc`, `advdiff`, `vdp`, `duffing`)
// with `n_params` overrides given as parallel key and value arrays.
//
// # Safety
// `name` and every key must be NUL-terminated; the arrays must hold `n_params` entries.
enum KisStatus kis_model_new(const char *name,
                             const char *const *param_keys,
                             const double *param_values,
                             size_t n_params,
                             struct KisModel **out);

// # Safety
// `model` must come from [`kis_model_new`] and not be used afterwards. Null is ignored.
void kis_model_free(struct KisModel *model);

// # Safety
// `model` must be a live handle; the outputs must be writable.
enum KisStatus kis_model_dims(const struct KisModel *model, size_t *dim_state, size_t *dim_noise);

// Drift `A(x)` into `out` (length `dim`).
//
// # Safety
// `x` and `out` must hold `dim` values.
enum KisStatus kis_model_drift(const struct KisModel *model,
                               const double *x,
                               size_t dim,
                               double *out);

// Generator applied to a function with gradient `grad` (length `dim`) and row-major Hessian
// `hess` (length `dim * dim`) at `x`.
//
// # Safety
// The arrays must hold the stated lengths; `out` must be writable.
enum KisStatus kis_generator_apply(const struct KisModel *model,
                                   const double *x,
                                   const double *grad,
                                   const double *hess,
                                   size_t dim,
                                   double *out);

// Loads a controller from a `controller.json` file written by the runner.
//
// # Safety
// `path` must be NUL-terminated; `out` must be writable.
enum KisStatus kis_controller_load(const char *path, struct KisController **out);

// # Safety
// `controller` must come from [`kis_controller_load`] and not be used afterwards. Null is ignored.
void kis_controller_free(struct KisController *controller);

// # Safety
// `controller` must be a live handle.
enum KisStatus kis_controller_set_multiplier(struct KisController *controller, double c);

// Bias `u(t, x)` into `u` (length `noise_dim`).
//
// # Safety
// `x` must hold `dim` values and `u` `noise_dim` values.
enum KisStatus kis_controller_bias(const struct KisController *controller,
                                   double t,
                                   const double *x,
                                   size_t dim,
                                   double *u,
                                   size_t noise_dim);

// Runs `samples` paths from `x0` on `[0, horizon]` with step `dt`: plain Monte Carlo when
// `controller` is null, importance sampling under the controller otherwise.
//
// # Safety
// Handles must be live; `x0` must hold `dim` values; `out` must be writable.
enum KisStatus kis_run_ensemble(const struct KisModel *model,
                                const struct KisController *controller,
                                const struct KisEvent *event,
                                const double *x0,
                                size_t dim,
                                double horizon,
                                double dt,
                                size_t samples,
                                uint64_t seed,
                                struct KisReport *out);

// Reference event probability of a linear model from its Gaussian terminal law.
//
// # Safety
// Handles must be live; `x0` must hold `dim` values; `rho` must be writable and `std_error`
// writable or null.
enum KisStatus kis_oracle_rho(const struct KisModel *model,
                              const struct KisEvent *event,
                              const double *x0,
                              size_t dim,
                              double horizon,
                              double *rho,
                              double *std_error);

// Runs the experiment in a TOML config file, writing its outputs to `out_dir` (or the
// configured directory when null).
//
// # Safety
// Strings must be NUL-terminated; `out` must be writable or null.
enum KisStatus kis_run_experiment(const char *config_path,
                                  const char *out_dir,
                                  bool reuse_controller,
                                  struct KisReport *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KOOPMAN_IS_H */
