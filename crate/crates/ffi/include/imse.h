#ifndef IMSE_H
#define IMSE_H

/* Generated by cbindgen from crates/ffi. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum ImseStatus {
  IMSE_STATUS_OK = 0,
  IMSE_STATUS_NULL_POINTER = 1,
  IMSE_STATUS_INVALID_ARGUMENT = 2,
  IMSE_STATUS_SHAPE = 3,
  IMSE_STATUS_NON_FINITE = 4,
  IMSE_STATUS_NO_CONVERGENCE = 5,
  IMSE_STATUS_LAYER_MISMATCH = 6,
  IMSE_STATUS_FORMAT = 7,
  IMSE_STATUS_DIVERGED = 8,
  IMSE_STATUS_IO = 9,
  IMSE_STATUS_CONFIG = 10,
  IMSE_STATUS_PANIC = 11,
} ImseStatus;

/**
 * Opaque adaptation session: a model, its source code and optimizer.
 */
typedef struct ImseAdapter ImseAdapter;

/**
 * Opaque domain bank.
 */
typedef struct ImseBank ImseBank;

/**
 * Opaque vision transformer.
 */
typedef struct ImseModel ImseModel;

typedef struct ImseModelInfo {
  size_t image_size;
  size_t channels;
  size_t num_classes;
  bool is_decomposed;
  /**
   * Singular values adaptation may change.
   */
  size_t trainable;
  /**
   * Scalars of the equivalent dense model.
   */
  size_t dense_parameters;
} ImseModelInfo;

/**
 * Adaptation settings. `mode` is 0 for the combined objective, 1 for
 * entropy only and 2 for diversity only.
 */
typedef struct ImseAdaptParams {
  double lambda_dm;
  double entropy_margin_factor;
  double learning_rate;
  double sam_rho;
  uint32_t mode;
} ImseAdaptParams;

typedef struct ImseStepReport {
  double entmin;
  double dm;
  double combined;
  size_t kept_samples;
  size_t batch_size;
  bool noop;
} ImseStepReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the calling thread's last failure, empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *imse_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *imse_version(void);

/**
 * Builds a dense model with the default configuration.
 *
 * # Safety
 * `out` must be a valid pointer to writable handle storage.
 */
enum ImseStatus imse_model_build(uint64_t seed, struct ImseModel **out);

/**
 * Loads a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum ImseStatus imse_model_load(const char *path, struct ImseModel **out);

/**
 * Writes a checkpoint file.
 *
 * # Safety
 * `model` must be a live handle and `path` a NUL-terminated string.
 */
enum ImseStatus imse_model_save(const struct ImseModel *model, const char *path);

/**
 * Factorizes every spectral target of a dense model into a new handle.
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum ImseStatus imse_model_decompose(const struct ImseModel *model, struct ImseModel **out);

/**
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum ImseStatus imse_model_info(const struct ImseModel *model, struct ImseModelInfo *out);

/**
 * Class logits, row-major `[batch, num_classes]`.
 *
 * # Safety
 * `pixels` must hold `batch` images and `out` `out_len` floats.
 */
enum ImseStatus imse_model_logits(const struct ImseModel *model,
                                  const float *pixels,
                                  size_t batch,
                                  float *out,
                                  size_t out_len);

/**
 * Argmax class per image.
 *
 * # Safety
 * `pixels` must hold `batch` images and `labels` `batch` entries.
 */
enum ImseStatus imse_model_predict(const struct ImseModel *model,
                                   const float *pixels,
                                   size_t batch,
                                   size_t *labels);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void imse_model_free(struct ImseModel *model);

/**
 * Fills `out` with the default adaptation settings.
 *
 * # Safety
 * `out` must be writable.
 */
enum ImseStatus imse_adapt_params_default(struct ImseAdaptParams *out);

/**
 * Starts an adaptation session on a copy of a decomposed model.
 *
 * # Safety
 * `model` must be a live handle, `params` null (defaults) or readable,
 * and `out` writable.
 */
enum ImseStatus imse_adapter_new(const struct ImseModel *model,
                                 const struct ImseAdaptParams *params,
                                 struct ImseAdapter **out);

/**
 * One adaptation step. Predictions and losses come from the forward
 * before the update. `predictions` and `report` may be null.
 *
 * # Safety
 * `pixels` must hold `batch` images, `predictions` `batch` entries.
 */
enum ImseStatus imse_adapter_step(struct ImseAdapter *adapter,
                                  const float *pixels,
                                  size_t batch,
                                  size_t *predictions,
                                  struct ImseStepReport *report);

/**
 * Restores the source singular values and clears the optimizer.
 *
 * # Safety
 * `adapter` must be a live handle.
 */
enum ImseStatus imse_adapter_reset(struct ImseAdapter *adapter);

/**
 * Copies the adapted model into a new handle.
 *
 * # Safety
 * `adapter` must be a live handle and `out` writable.
 */
enum ImseStatus imse_adapter_model(const struct ImseAdapter *adapter, struct ImseModel **out);

/**
 * # Safety
 * `adapter` must be null or a handle not yet freed.
 */
void imse_adapter_free(struct ImseAdapter *adapter);

/**
 * Reads a persisted domain bank.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum ImseStatus imse_bank_restore(const char *path, struct ImseBank **out);

/**
 * # Safety
 * `bank` must be a live handle and `path` a NUL-terminated string.
 */
enum ImseStatus imse_bank_persist(const struct ImseBank *bank, const char *path);

/**
 * # Safety
 * `bank` must be a live handle and `out` writable.
 */
enum ImseStatus imse_bank_len(const struct ImseBank *bank, size_t *out);

/**
 * Symmetric KL distance between the descriptors of entries `i` and `j`.
 *
 * # Safety
 * `bank` must be a live handle and `out` writable.
 */
enum ImseStatus imse_bank_distance(const struct ImseBank *bank, size_t i, size_t j, double *out);

/**
 * Loads entry `i`'s singular values into an adapter's model.
 *
 * # Safety
 * `bank` and `adapter` must be live handles.
 */
enum ImseStatus imse_bank_load_entry(const struct ImseBank *bank,
                                     size_t i,
                                     struct ImseAdapter *adapter);

/**
 * # Safety
 * `bank` must be null or a handle not yet freed.
 */
void imse_bank_free(struct ImseBank *bank);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* IMSE_H */
