#ifndef DYNPRED_H
#define DYNPRED_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every call.
 */
typedef enum DpStatus {
  DP_STATUS_OK = 0,
  DP_STATUS_NULL_POINTER = 1,
  DP_STATUS_INVALID_ARGUMENT = 2,
  DP_STATUS_IO = 3,
  DP_STATUS_DATA = 4,
  DP_STATUS_MODEL = 5,
  DP_STATUS_METRIC = 6,
  DP_STATUS_BUNDLE = 7,
  DP_STATUS_BUFFER_TOO_SMALL = 8,
  DP_STATUS_PANIC = 9,
} DpStatus;

/**
 * Longitudinal and survival data, optionally landmarked.
 */
typedef struct DpDataset DpDataset;

/**
 * A fitted model with the layout of its training data.
 */
typedef struct DpModel DpModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next call on the same thread.
 */
const char *dp_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *dp_version(void);

/**
 * Loads a dataset from survival and longitudinal CSV files. `schema_toml`
 * may be null for the default column names.
 *
 * # Safety
 * String arguments must be NUL-terminated; `out` must be writable.
 */
enum DpStatus dp_dataset_load(const char *survival_path,
                              const char *longitudinal_path,
                              const char *schema_toml,
                              struct DpDataset **out);

/**
 * Simulates a dataset. `config_toml` holds simulation settings (null for
 * the defaults).
 *
 * # Safety
 * `config_toml` is null or NUL-terminated; `out` must be writable.
 */
enum DpStatus dp_dataset_simulate(const char *config_toml, struct DpDataset **out);

/**
 * Returns a new landmarked copy of `dataset`.
 *
 * # Safety
 * `dataset` must be a live handle; `out` must be writable.
 */
enum DpStatus dp_dataset_landmark(const struct DpDataset *dataset,
                                  double landmark,
                                  struct DpDataset **out);

/**
 * Number of subjects, or 0 for a null handle.
 *
 * # Safety
 * `dataset` is null or a live handle.
 */
size_t dp_dataset_n_subjects(const struct DpDataset *dataset);

/**
 * Number of observed events, or 0 for a null handle.
 *
 * # Safety
 * `dataset` is null or a live handle.
 */
size_t dp_dataset_n_events(const struct DpDataset *dataset);

/**
 * # Safety
 * `dataset` is null or a handle not yet freed.
 */
void dp_dataset_free(struct DpDataset *dataset);

/**
 * Fits the model on a landmarked dataset. `config_toml` uses the run
 * configuration keys (`y_names`, `fixed_terms`, `random_terms`, `baseline`,
 * `[penalty]`, `standardize`, `seed`, ...); null selects the defaults.
 *
 * # Safety
 * `dataset` must be a live handle; `out` must be writable.
 */
enum DpStatus dp_model_fit(const struct DpDataset *dataset,
                           const char *config_toml,
                           size_t workers,
                           struct DpModel **out);

/**
 * Writes the model bundle to directory `dir`.
 *
 * # Safety
 * `model` must be a live handle; `dir` NUL-terminated.
 */
enum DpStatus dp_model_save(const struct DpModel *model, const char *dir);

/**
 * Reads a model bundle from directory `dir`.
 *
 * # Safety
 * `dir` NUL-terminated; `out` must be writable.
 */
enum DpStatus dp_model_load(const char *dir, struct DpModel **out);

/**
 * Predicted survival probabilities for every subject of a landmarked
 * dataset, written row-major (`n_subjects × n_times`) into `out`.
 * `out_len` is the capacity of `out` in elements; `out_rows` receives the
 * number of subjects even when the buffer is too small.
 *
 * # Safety
 * Handles must be live; `times` has `n_times` elements; `out` has
 * `out_len` elements.
 */
enum DpStatus dp_model_predict(const struct DpModel *model,
                               const struct DpDataset *dataset,
                               const double *times,
                               size_t n_times,
                               double *out,
                               size_t out_len,
                               size_t *out_rows);

/**
 * Number of model coefficients (longitudinal summaries plus baseline
 * terms), or 0 for a null handle.
 *
 * # Safety
 * `model` is null or a live handle.
 */
size_t dp_model_n_coefficients(const struct DpModel *model);

/**
 * Copies the coefficients on the original covariate scale into `out`.
 *
 * # Safety
 * `model` must be live; `out` has `out_len` elements.
 */
enum DpStatus dp_model_coefficients(const struct DpModel *model, double *out, size_t out_len);

/**
 * # Safety
 * `model` is null or a handle not yet freed.
 */
void dp_model_free(struct DpModel *model);

/**
 * Harrell's concordance index of `risk` (higher means earlier events).
 *
 * # Safety
 * Arrays have `n` elements; `out` must be writable.
 */
enum DpStatus dp_concordance_index(const double *times,
                                   const uint8_t *events,
                                   const double *risk,
                                   size_t n,
                                   double *out);

/**
 * Cumulative/dynamic time-dependent AUC of `risk` at time `t`.
 *
 * # Safety
 * Arrays have `n` elements; `out` must be writable.
 */
enum DpStatus dp_td_auc(const double *times,
                        const uint8_t *events,
                        const double *risk,
                        size_t n,
                        double t,
                        double *out);

/**
 * Inverse-probability-of-censoring weighted Brier score of predicted
 * survival probabilities `surv` at time `t`.
 *
 * # Safety
 * Arrays have `n` elements; `out` must be writable.
 */
enum DpStatus dp_brier_score(const double *times,
                             const uint8_t *events,
                             const double *surv,
                             size_t n,
                             double t,
                             double *out);

/**
 * Draws Weibull times with survival `exp(−λ t^ν e^{lp})`, one per entry of
 * `linear_predictor`, into `out`.
 *
 * # Safety
 * `linear_predictor` and `out` have `n` elements.
 */
enum DpStatus dp_simulate_weibull(double lambda,
                                  double nu,
                                  const double *linear_predictor,
                                  size_t n,
                                  uint64_t seed,
                                  double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DYNPRED_H */
