#ifndef QRLAPLACE_H
#define QRLAPLACE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible function.
typedef enum QrlStatus {
  QRL_STATUS_OK = 0,
  QRL_STATUS_NULL_POINTER = 1,
  QRL_STATUS_INVALID_ARGUMENT = 2,
  QRL_STATUS_DATA = 3,
  QRL_STATUS_NUMERICAL = 4,
  QRL_STATUS_UNSUPPORTED = 5,
  QRL_STATUS_BUFFER_TOO_SMALL = 6,
  QRL_STATUS_PANIC = 7,
} QrlStatus;

// Curvature used in the Laplace approximation, passed to the model
// constructors as its integer code.
typedef enum QrlCurvature {
  QRL_CURVATURE_FISHER = 0,
  QRL_CURVATURE_TKC = 1,
} QrlCurvature;

// Result of an empirical-Bayes fit.
typedef struct QrlFit QrlFit;

// A quantile regression model: quantile level, fixed effects and latent
// structure.
typedef struct QrlModel QrlModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *qrl_version(void);

// Length in bytes of the last error message on this thread, including the
// terminating NUL; 0 when the last call succeeded.
size_t qrl_last_error_length(void);

// Copies the last error message on this thread into `buf` (NUL-terminated).
// Returns the number of bytes written excluding the NUL, 0 when there is no
// error, or -1 when `buf` is null or shorter than
// [`qrl_last_error_length`].
//
// # Safety
// `buf` must point to `len` writable bytes.
int64_t qrl_last_error_message(char *buf, size_t len);

// Model with one grouping factor. `group` holds `n` ids in `0..num_groups`;
// `x` is the `n x n_coef` fixed-effect design (row-major, may be null when
// `n_coef` is 0).
//
// # Safety
// Pointers must reference arrays of the stated sizes; `out` must be
// writable.
enum QrlStatus qrl_model_new_grouped(double tau,
                                     const uint32_t *group,
                                     size_t n,
                                     size_t num_groups,
                                     const double *x,
                                     size_t n_coef,
                                     uint32_t curvature,
                                     struct QrlModel **out);

// Model with two crossed grouping factors.
//
// # Safety
// As [`qrl_model_new_grouped`].
enum QrlStatus qrl_model_new_crossed(double tau,
                                     const uint32_t *group1,
                                     size_t num_groups1,
                                     const uint32_t *group2,
                                     size_t num_groups2,
                                     size_t n,
                                     const double *x,
                                     size_t n_coef,
                                     uint32_t curvature,
                                     struct QrlModel **out);

// Gaussian-process model with a Matérn-3/2 kernel over `n x d` row-major
// input coordinates.
//
// # Safety
// As [`qrl_model_new_grouped`].
enum QrlStatus qrl_model_new_gp(double tau,
                                const double *coords,
                                size_t n,
                                size_t d,
                                const double *x,
                                size_t n_coef,
                                uint32_t curvature,
                                struct QrlModel **out);

// Releases a model. Null is ignored.
//
// # Safety
// `model` must come from a `qrl_model_new_*` function and not be used
// afterwards.
void qrl_model_free(struct QrlModel *model);

// Empirical-Bayes fit of `model` to the `n` responses `y`. `seed` drives
// the jittered optimizer restarts.
//
// # Safety
// `model` must be a live handle, `y` must hold `n` values and `out` must be
// writable.
enum QrlStatus qrl_fit(const struct QrlModel *model,
                       const double *y,
                       size_t n,
                       uint64_t seed,
                       struct QrlFit **out);

// Releases a fit result. Null is ignored.
//
// # Safety
// `fit` must come from [`qrl_fit`] and not be used afterwards.
void qrl_fit_free(struct QrlFit *fit);

// Fitted AL scale.
//
// # Safety
// `fit` must be a live handle and `out` writable.
enum QrlStatus qrl_fit_lambda(const struct QrlFit *fit, double *out);

// Laplace log-marginal likelihood at the fitted hyperparameters.
//
// # Safety
// `fit` must be a live handle and `out` writable.
enum QrlStatus qrl_fit_log_marginal(const struct QrlFit *fit, double *out);

// Prior covariance parameters: `sigma2` (grouped), `sigma2_1, sigma2_2`
// (crossed) or `sigma2, length_scale` (GP). The count is stored in `len`
// even when `cap` is too small.
//
// # Safety
// `fit` must be a live handle, `out` must hold `cap` values, `len` writable.
enum QrlStatus qrl_fit_theta(const struct QrlFit *fit, double *out, size_t cap, size_t *len);

// Fixed-effect coefficients.
//
// # Safety
// As [`qrl_fit_theta`].
enum QrlStatus qrl_fit_beta(const struct QrlFit *fit, double *out, size_t cap, size_t *len);

// Posterior mode of the latent effects.
//
// # Safety
// As [`qrl_fit_theta`].
enum QrlStatus qrl_fit_latent_mode(const struct QrlFit *fit, double *out, size_t cap, size_t *len);

// Predicted quantile and latent posterior sd for `n_new` points of a grouped
// model. A negative group id marks a group not seen in training. `x_new`
// has the same number of columns as the training design.
//
// # Safety
// `model` and `fit` must be live handles from the same model; arrays must
// hold `n_new` entries (`n_new x n_coef` for `x_new`).
enum QrlStatus qrl_predict_grouped(const struct QrlModel *model,
                                   const struct QrlFit *fit,
                                   const int64_t *group,
                                   const double *x_new,
                                   size_t n_new,
                                   double *quantile,
                                   double *latent_sd);

// Predicted quantile and latent posterior sd at `n_new x d` row-major
// coordinates of a GP model.
//
// # Safety
// As [`qrl_predict_grouped`], with `coords` holding `n_new x d` values.
enum QrlStatus qrl_predict_gp(const struct QrlModel *model,
                              const struct QrlFit *fit,
                              const double *coords,
                              size_t d,
                              const double *x_new,
                              size_t n_new,
                              double *quantile,
                              double *latent_sd);

// Pinball loss of `y` against quantile prediction `q` at level `tau`.
//
// # Safety
// `out` must be writable.
enum QrlStatus qrl_pinball_loss(double y, double q, double tau, double *out);

// Conformal correction `t` for intervals `[lower - t s, upper + t s]` at
// miscoverage `alpha`, with `s = sigma` when `sigma` is non-null and 1
// otherwise. `t` is `+inf` when the calibration set is too small.
//
// # Safety
// Arrays must hold `n` values; `out_t` must be writable.
enum QrlStatus qrl_cqr_calibrate(const double *y,
                                 const double *lower,
                                 const double *upper,
                                 const double *sigma,
                                 size_t n,
                                 double alpha,
                                 double *out_t);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* QRLAPLACE_H */
