#ifndef CMM_H
#define CMM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. The values 2 to 5 match the command-line exit codes.
 */
typedef enum CmmStatus {
  CMM_STATUS_OK = 0,
  /**
   * Null pointer, invalid UTF-8 or a buffer that is too small.
   */
  CMM_STATUS_INVALID_ARGUMENT = 1,
  CMM_STATUS_CONFIG = 2,
  CMM_STATUS_DATA = 3,
  /**
   * The fit finished but did not meet the convergence rule; the handle is
   * still returned.
   */
  CMM_STATUS_NOT_CONVERGED = 4,
  CMM_STATUS_INVARIANT = 5,
  /**
   * The requested quantity does not exist for this object.
   */
  CMM_STATUS_UNAVAILABLE = 6,
  /**
   * A Rust panic was caught.
   */
  CMM_STATUS_PANIC = 7,
} CmmStatus;

/**
 * A loaded or simulated dataset.
 */
typedef struct CmmDataset CmmDataset;

/**
 * A fitted model.
 */
typedef struct CmmFit CmmFit;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *cmm_version(void);

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next library call on the same thread.
 */
const char *cmm_last_error(void);

/**
 * Negative binomial mass at `z` with mean `mu` and shape `delta`.
 *
 * # Safety
 * `out` must be null or point to writable memory for one `double`.
 */
enum CmmStatus cmm_nb_pmf(uint32_t z, double mu, double delta, double *out);

/**
 * Inflated distribution mass at `ell` in `0..=32`. `phi` holds the four
 * weights: base, zero, attraction set, thirty-one.
 *
 * # Safety
 * `phi` must point to four readable doubles; `out` to one writable double.
 */
enum CmmStatus cmm_inflated_pmf(int64_t ell,
                                double mu,
                                double delta,
                                const double *phi,
                                double *out);

/**
 * Unconditional probability that a round ends with a loss at card `k`.
 *
 * # Safety
 * `out` must point to one writable double.
 */
enum CmmStatus cmm_marginal_censor_prob(uint32_t k,
                                        int64_t gain,
                                        int64_t loss,
                                        int64_t n_loss_cards,
                                        double *out);

/**
 * Card count maximizing the expected round score.
 *
 * # Safety
 * `out` must point to one writable `uint32_t`.
 */
enum CmmStatus cmm_risk_neutral_optimum(int64_t gain,
                                        int64_t loss,
                                        int64_t n_loss_cards,
                                        uint32_t *out);

/**
 * Load a dataset from children and trials CSV files.
 *
 * # Safety
 * Paths must be NUL-terminated strings; `out` must point to a writable
 * handle slot.
 */
enum CmmStatus cmm_dataset_load(const char *children_csv,
                                const char *trials_csv,
                                struct CmmDataset **out);

/**
 * Simulate a dataset from a TOML run configuration (its `seed` and
 * `[simulate]` section); null uses the defaults.
 *
 * # Safety
 * `config_toml` must be null or NUL-terminated; `out` must be writable.
 */
enum CmmStatus cmm_dataset_simulate(const char *config_toml, struct CmmDataset **out);

/**
 * # Safety
 * `dataset` must be a live handle; `out` must be writable.
 */
enum CmmStatus cmm_dataset_n_children(const struct CmmDataset *dataset, size_t *out);

/**
 * # Safety
 * `dataset` must be a live handle; `out` must be writable.
 */
enum CmmStatus cmm_dataset_n_trials(const struct CmmDataset *dataset, size_t *out);

/**
 * Release a dataset. Null is ignored.
 *
 * # Safety
 * `dataset` must be null or a handle not yet freed.
 */
void cmm_dataset_free(struct CmmDataset *dataset);

/**
 * Fit the model. `config_toml` supplies the `schema`, `seed` and `[fit]`
 * settings (null: defaults). Returns `NotConverged` with a valid handle
 * when the optimizer stopped without meeting the convergence rule.
 *
 * # Safety
 * `dataset` must be a live handle, `config_toml` null or NUL-terminated,
 * `out` writable.
 */
enum CmmStatus cmm_fit_run(const struct CmmDataset *dataset,
                           const char *config_toml,
                           struct CmmFit **out);

/**
 * Rebuild a fit from its JSON form.
 *
 * # Safety
 * `json` must be NUL-terminated; `out` writable.
 */
enum CmmStatus cmm_fit_from_json(const char *json, struct CmmFit **out);

/**
 * # Safety
 * `fit` must be a live handle; `out` must be writable.
 */
enum CmmStatus cmm_fit_n_segments(const struct CmmFit *fit, size_t *out);

/**
 * Log-likelihood without the game-mechanics constant.
 *
 * # Safety
 * `fit` must be a live handle; `out` must be writable.
 */
enum CmmStatus cmm_fit_loglik(const struct CmmFit *fit, double *out);

/**
 * # Safety
 * `fit` must be a live handle; `out` must be writable.
 */
enum CmmStatus cmm_fit_bic(const struct CmmFit *fit, double *out);

/**
 * # Safety
 * `fit` must be a live handle; `out` must be writable.
 */
enum CmmStatus cmm_fit_converged(const struct CmmFit *fit, bool *out);

/**
 * Natural parameters in the order intercepts, covariate weights,
 * dispersion, four inflation weights, mixing weights. `needed` receives
 * the count even when `len` is too small.
 *
 * # Safety
 * `fit` must be a live handle; `buf` must hold `len` doubles; `needed` may
 * be null.
 */
enum CmmStatus cmm_fit_natural_params(const struct CmmFit *fit,
                                      double *buf,
                                      size_t len,
                                      size_t *needed);

/**
 * Standard errors aligned with [`cmm_fit_natural_params`]; `Unavailable`
 * when the Hessian could not be inverted.
 *
 * # Safety
 * As for [`cmm_fit_natural_params`].
 */
enum CmmStatus cmm_fit_standard_errors(const struct CmmFit *fit,
                                       double *buf,
                                       size_t len,
                                       size_t *needed);

/**
 * Expected cards for every trial of `dataset`, in the dataset's trial
 * order. `literal` selects the untruncated expected value.
 *
 * # Safety
 * Handles must be live; `buf` must hold `len` doubles; `needed` may be null.
 */
enum CmmStatus cmm_fit_predict(const struct CmmFit *fit,
                               const struct CmmDataset *dataset,
                               bool literal,
                               double *buf,
                               size_t len,
                               size_t *needed);

/**
 * Serialize a fit to JSON. Release the string with [`cmm_string_free`].
 *
 * # Safety
 * `fit` must be a live handle; `out` must be writable.
 */
enum CmmStatus cmm_fit_to_json(const struct CmmFit *fit, char **out);

/**
 * Release a fit. Null is ignored.
 *
 * # Safety
 * `fit` must be null or a handle not yet freed.
 */
void cmm_fit_free(struct CmmFit *fit);

/**
 * Release a string returned by the library. Null is ignored.
 *
 * # Safety
 * `s` must be null or a string from this library not yet freed.
 */
void cmm_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CMM_H */
