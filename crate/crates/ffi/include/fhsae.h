#ifndef FHSAE_H
#define FHSAE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FhsaeStatus {
  FHSAE_STATUS_OK = 0,
  FHSAE_STATUS_NULL_POINTER = 1,
  FHSAE_STATUS_INVALID_INPUT = 2,
  /**
   * Collinear design, non-convergence and other numerical failures.
   */
  FHSAE_STATUS_NUMERICAL = 3,
  FHSAE_STATUS_IO = 4,
  FHSAE_STATUS_PANIC = 5,
} FhsaeStatus;

/**
 * Fitted Fay-Herriot model with its per-area predictions.
 */
typedef struct FhsaeFh FhsaeFh;

/**
 * Fitted generalized variance function.
 */
typedef struct FhsaeGvf FhsaeGvf;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or an empty string.
 * The pointer stays valid until the next fhsae call on the same thread.
 */
const char *fhsae_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *fhsae_version(void);

/**
 * Hájek mean and design variance of one area's sample.
 *
 * # Safety
 * `weights` and `outcomes` must point to `n` readable elements; outcomes are
 * 0 or 1. `estimate` and `variance` must be writable.
 */
enum FhsaeStatus fhsae_hajek(const double *weights,
                             const uint8_t *outcomes,
                             size_t n,
                             double *estimate,
                             double *variance);

/**
 * Fits the full six-term GVF to `d` areas. A negative `delta` selects the
 * mean of `variances`.
 *
 * # Safety
 * The three arrays must hold `d` elements; `out_handle` must be writable.
 */
enum FhsaeStatus fhsae_gvf_fit(const double *estimates,
                               const double *variances,
                               const size_t *sample_sizes,
                               size_t d,
                               double delta,
                               struct FhsaeGvf **out_handle);

/**
 * Smoothed variance for an area with the given estimate and sample size.
 *
 * # Safety
 * `handle` must come from [`fhsae_gvf_fit`]; `variance` must be writable.
 */
enum FhsaeStatus fhsae_gvf_predict(const struct FhsaeGvf *handle,
                                   double estimate,
                                   size_t sample_size,
                                   double *variance);

/**
 * # Safety
 * `handle` must come from [`fhsae_gvf_fit`] and not be used afterwards.
 * NULL is ignored.
 */
void fhsae_gvf_free(struct FhsaeGvf *handle);

/**
 * REML fit of the area-level model.
 *
 * `covariates` is row-major `d x p`; include a column of ones for an
 * intercept.
 *
 * # Safety
 * `direct` and `error_variances` must hold `d` elements, `covariates`
 * `d * p`; `out_handle` must be writable.
 */
enum FhsaeStatus fhsae_fh_fit(const double *direct,
                              const double *error_variances,
                              const double *covariates,
                              size_t d,
                              size_t p,
                              struct FhsaeFh **out_handle);

/**
 * # Safety
 * `handle` must come from [`fhsae_fh_fit`]; `sigma_u2` must be writable.
 */
enum FhsaeStatus fhsae_fh_sigma_u2(const struct FhsaeFh *handle, double *sigma_u2);

/**
 * Copies the regression coefficients into `beta`, which holds `len` values;
 * `len` must equal the `p` passed to [`fhsae_fh_fit`].
 *
 * # Safety
 * `handle` must come from [`fhsae_fh_fit`]; `beta` must hold `len` values.
 */
enum FhsaeStatus fhsae_fh_beta(const struct FhsaeFh *handle, double *beta, size_t len);

/**
 * EBLUP and Prasad-Rao MSE of area `area` (0-based, in fit order).
 *
 * # Safety
 * `handle` must come from [`fhsae_fh_fit`]; `eblup` and `mse` must be
 * writable.
 */
enum FhsaeStatus fhsae_fh_predict(const struct FhsaeFh *handle,
                                  size_t area,
                                  double *eblup,
                                  double *mse);

/**
 * # Safety
 * `handle` must come from [`fhsae_fh_fit`] and not be used afterwards.
 * NULL is ignored.
 */
void fhsae_fh_free(struct FhsaeFh *handle);

/**
 * Runs the full pipeline with default options on two CSV files and writes
 * `results.csv` and `model.txt` into `out_dir`.
 *
 * # Safety
 * All three arguments must be NUL-terminated UTF-8 paths.
 */
enum FhsaeStatus fhsae_pipeline_run(const char *units_csv,
                                    const char *areas_csv,
                                    const char *out_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FHSAE_H */
