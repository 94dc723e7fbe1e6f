#ifndef SELECTION_DML_H
#define SELECTION_DML_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible function.
 */
typedef enum SdmlStatus {
  SDML_STATUS_OK = 0,
  SDML_STATUS_NULL_ARGUMENT = 1,
  SDML_STATUS_INVALID_ARGUMENT = 2,
  SDML_STATUS_IO = 3,
  SDML_STATUS_INVALID_DATA = 4,
  SDML_STATUS_ESTIMATION = 5,
  SDML_STATUS_PANIC = 6,
} SdmlStatus;

/**
 * Estimator selector.
 */
typedef enum SdmlEstimator {
  SDML_ESTIMATOR_MAR = 0,
  SDML_ESTIMATOR_IV_TOTAL = 1,
  SDML_ESTIMATOR_IV_SELECTED = 2,
  SDML_ESTIMATOR_DYNAMIC = 3,
} SdmlEstimator;

/**
 * Opaque dataset handle.
 */
typedef struct SdmlDataset SdmlDataset;

/**
 * Point estimate of an ATE.
 */
typedef struct SdmlEstimate {
  double estimate;
  double se;
  double p_value;
  size_t n_effective;
  size_t n_trimmed;
} SdmlEstimate;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. Valid until the next call.
 */
const char *sdml_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *sdml_version(void);

/**
 * Loads a CSV file described by a TOML schema.
 *
 * # Safety
 * `csv_path` and `schema_path` must be NUL-terminated strings; `out` must be writable.
 */
enum SdmlStatus sdml_dataset_load_csv(const char *csv_path,
                                      const char *schema_path,
                                      struct SdmlDataset **out);

/**
 * Builds a dataset from column arrays.
 *
 * `outcome` is read only where `selection[i] != 0`; `covariates` is row-major `n x p`.
 * `post_covariates` (row-major `n x p_post`) and `instrument` may be NULL.
 *
 * # Safety
 * Every non-null pointer must reference at least the number of elements implied by `n`,
 * `p` and `p_post`; `out` must be writable.
 */
enum SdmlStatus sdml_dataset_new(size_t n,
                                 size_t p,
                                 const double *outcome,
                                 const uint8_t *selection,
                                 const int64_t *treatment,
                                 size_t levels,
                                 const double *covariates,
                                 size_t p_post,
                                 const double *post_covariates,
                                 const double *instrument,
                                 struct SdmlDataset **out);

/**
 * Row count, or 0 for a null handle.
 *
 * # Safety
 * `ds` must be null or a live handle.
 */
size_t sdml_dataset_n(const struct SdmlDataset *ds);

/**
 * Releases a dataset handle. Null is ignored.
 *
 * # Safety
 * `ds` must be null or a handle not yet freed.
 */
void sdml_dataset_free(struct SdmlDataset *ds);

/**
 * Estimates `E[Y(d) - Y(d_prime)]` with default lasso nuisances.
 *
 * # Safety
 * `ds` must be a live handle and `out` writable.
 */
enum SdmlStatus sdml_estimate_ate(const struct SdmlDataset *ds,
                                  enum SdmlEstimator estimator,
                                  size_t d,
                                  size_t d_prime,
                                  size_t k,
                                  uint64_t seed,
                                  double trim,
                                  struct SdmlEstimate *out);

/**
 * Runs an estimate described by a JSON estimate configuration and returns the result as JSON.
 *
 * # Safety
 * `ds` must be a live handle, `config_json` a NUL-terminated string and `out` writable.
 * The returned string must be released with [`sdml_string_free`].
 */
enum SdmlStatus sdml_estimate_json(const struct SdmlDataset *ds,
                                   const char *config_json,
                                   char **out);

/**
 * Runs a simulation study from a JSON study configuration and returns the report as JSON.
 *
 * # Safety
 * `config_json` must be a NUL-terminated string and `out` writable. The returned string must
 * be released with [`sdml_string_free`].
 */
enum SdmlStatus sdml_simulate_json(const char *config_json, char **out);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must be null or a string from this library not yet freed.
 */
void sdml_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SELECTION_DML_H */
