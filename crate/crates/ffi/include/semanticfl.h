#ifndef SEMANTICFL_H
#define SEMANTICFL_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SflStatus {
  SFL_STATUS_OK = 0,
  SFL_STATUS_INVALID_INPUT = 1,
  SFL_STATUS_CONFIG = 2,
  SFL_STATUS_STATE = 3,
  SFL_STATUS_IO = 4,
  SFL_STATUS_FORMAT = 5,
  SFL_STATUS_INTEGRITY = 6,
  SFL_STATUS_PROVIDER = 7,
  SFL_STATUS_DIVERGED = 8,
  SFL_STATUS_NULL_POINTER = 9,
  SFL_STATUS_INFEASIBLE = 10,
  SFL_STATUS_REDUCED_RANK = 11,
  SFL_STATUS_BUFFER_TOO_SMALL = 12,
  SFL_STATUS_PANIC = 13,
} SflStatus;

/**
 * Opaque feature-store handle.
 */
typedef struct SflFeatureStore SflFeatureStore;

/**
 * Opaque model handle.
 */
typedef struct SflModel SflModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty if none. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *sfl_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *sfl_version(void);

/**
 * # Safety
 * `architecture` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SflStatus sfl_model_build(const char *architecture,
                               size_t num_classes,
                               size_t feature_dim,
                               uint64_t seed,
                               size_t input_channels,
                               size_t input_size,
                               struct SflModel **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum SflStatus sfl_model_load(const char *path, struct SflModel **out);

/**
 * # Safety
 * `model` must come from this library; `path` must be NUL-terminated.
 */
enum SflStatus sfl_model_save(const struct SflModel *model, const char *path);

/**
 * # Safety
 * `model` must come from this library or be null; it must not be used afterwards.
 */
void sfl_model_free(struct SflModel *model);

/**
 * # Safety
 * `model` must come from this library and `out` must be valid.
 */
enum SflStatus sfl_model_param_len(const struct SflModel *model, size_t *out);

/**
 * Copies the flat parameter vector into `buf` (`len` >= parameter count).
 *
 * # Safety
 * `buf` must point to `len` writable doubles.
 */
enum SflStatus sfl_model_get_params(const struct SflModel *model, double *buf, size_t len);

/**
 * # Safety
 * `params` must point to `len` readable doubles.
 */
enum SflStatus sfl_model_set_params(struct SflModel *model, const double *params, size_t len);

/**
 * Evaluation-mode forward pass on `batch` NCHW images.
 * Writes `batch x num_classes` logits and `batch x feature_dim` features.
 *
 * # Safety
 * Buffers must hold the stated number of doubles.
 */
enum SflStatus sfl_model_forward(const struct SflModel *model,
                                 const double *input,
                                 size_t batch,
                                 double *logits,
                                 size_t logits_len,
                                 double *features,
                                 size_t features_len);

/**
 * Mean cross-entropy of `batch x classes` logits.
 *
 * # Safety
 * Pointers must reference arrays of the stated sizes.
 */
enum SflStatus sfl_cross_entropy(const double *logits,
                                 size_t batch,
                                 size_t classes,
                                 const uint32_t *labels,
                                 double *out);

/**
 * Mean KL(softmax(teacher) || softmax(student)) over `batch x dim` rows.
 *
 * # Safety
 * Pointers must reference arrays of the stated sizes.
 */
enum SflStatus sfl_kd_loss(const double *teacher,
                           const double *student,
                           size_t batch,
                           size_t dim,
                           double *out);

/**
 * InfoNCE of `batch x dim` features against `classes x dim` text anchors.
 *
 * # Safety
 * Pointers must reference arrays of the stated sizes.
 */
enum SflStatus sfl_contrastive_loss(const double *features,
                                    size_t batch,
                                    const double *text,
                                    size_t classes,
                                    size_t dim,
                                    const uint32_t *labels,
                                    double tau,
                                    double *out);

/**
 * `(mu / 2) * ||local - global||^2`.
 *
 * # Safety
 * Both arrays must hold `len` doubles.
 */
enum SflStatus sfl_prox_term(const double *local,
                             const double *global,
                             size_t len,
                             double mu,
                             double *out);

/**
 * Sample-weighted average of `clients` parameter vectors stored row-major in
 * `params` (`clients x len`), with sample counts in `counts`.
 *
 * # Safety
 * `params` holds `clients * len` doubles, `counts` holds `clients` entries,
 * `out` holds `len` doubles.
 */
enum SflStatus sfl_fedavg_aggregate(const double *params,
                                    const uint64_t *counts,
                                    size_t clients,
                                    size_t len,
                                    double *out);

/**
 * Partitions `n` labeled samples. `assignment[i]` receives the client of
 * sample `i`, or -1 when the sample is dropped (long-tail subsampling).
 *
 * # Safety
 * `labels` and `assignment` must hold `n` entries; `scenario` is NUL-terminated.
 */
enum SflStatus sfl_partition(const uint32_t *labels,
                             size_t n,
                             const char *scenario,
                             size_t num_clients,
                             double alpha,
                             size_t classes_per_client,
                             double imbalance_ratio,
                             uint64_t seed,
                             int64_t *assignment);

/**
 * # Safety
 * `path` must be NUL-terminated and `out` valid.
 */
enum SflStatus sfl_store_load(const char *path, struct SflFeatureStore **out);

/**
 * # Safety
 * `store` must come from this library or be null; it must not be used afterwards.
 */
void sfl_store_free(struct SflFeatureStore *store);

/**
 * Feature dimension, sample count, and class count of a store.
 *
 * # Safety
 * `store` must come from this library; output pointers may be null to skip.
 */
enum SflStatus sfl_store_shape(const struct SflFeatureStore *store,
                               size_t *dim,
                               size_t *num_samples,
                               size_t *num_classes);

/**
 * Visual anchor of dataset sample `sample_id`, widened to double.
 *
 * # Safety
 * `buf` must hold `len` doubles.
 */
enum SflStatus sfl_store_visual(const struct SflFeatureStore *store,
                                size_t sample_id,
                                double *buf,
                                size_t len);

/**
 * Text anchor of class `class_id`, widened to double.
 *
 * # Safety
 * `buf` must hold `len` doubles.
 */
enum SflStatus sfl_store_text(const struct SflFeatureStore *store,
                              size_t class_id,
                              double *buf,
                              size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SEMANTICFL_H */
