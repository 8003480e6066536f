#ifndef MODELBRIDGE_H
#define MODELBRIDGE_H

/* Generated by cbindgen from crates/ffi/src; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MbStatus {
  MB_STATUS_OK = 0,
  MB_STATUS_NULL_POINTER = 1,
  MB_STATUS_INVALID_ARGUMENT = 2,
  MB_STATUS_CONFIG = 3,
  MB_STATUS_TRAINING = 4,
  MB_STATUS_IO = 5,
  MB_STATUS_PANIC = 6,
} MbStatus;

/**
 * New-modality prefix, bridge, old-modality suffix and head.
 */
typedef struct MbBridgedModel MbBridgedModel;

/**
 * A pretrained encoder, with its task head when the checkpoint has one.
 */
typedef struct MbModel MbModel;

typedef struct MbMetrics {
  double balanced_accuracy;
  double f1_macro;
  double f1_weighted;
} MbMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. The pointer stays
 * valid until the next call into the library from the same thread.
 */
const char *mb_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *mb_version(void);

/**
 * Linear CKA between row-major `x` [n, p] and `y` [n, q].
 *
 * # Safety
 * `x` and `y` must point to `n·p` and `n·q` readable doubles; `out` must be writable.
 */
enum MbStatus mb_cka_linear(const double *x,
                            const double *y,
                            size_t n,
                            size_t p,
                            size_t q,
                            double *out);

/**
 * Balanced accuracy and F1 scores of integer predictions.
 *
 * # Safety
 * `y_true` and `y_pred` must point to `n` readable values; `out` must be writable.
 */
enum MbStatus mb_metrics(const uint32_t *y_true,
                         const uint32_t *y_pred,
                         size_t n,
                         size_t classes,
                         struct MbMetrics *out);

/**
 * Loads an encoder checkpoint (for instance `seed-0/teacher.ckpt`).
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum MbStatus mb_model_load(const char *path, struct MbModel **out);

/**
 * # Safety
 * `model` must come from [`mb_model_load`] and not be used afterwards. Null is ignored.
 */
void mb_model_free(struct MbModel *model);

/**
 * Input shape (tokens, channels) and layer count.
 *
 * # Safety
 * `model` must be a live handle; the out pointers must be writable.
 */
enum MbStatus mb_model_info(const struct MbModel *model,
                            size_t *tokens,
                            size_t *channels,
                            size_t *layers);

/**
 * Class probabilities for `batch` row-major inputs of the model's input
 * shape. Writes `batch·classes` doubles into `out_probs`.
 *
 * # Safety
 * `model` must be a live handle with a task head; `x` must hold `x_len`
 * doubles and `out_probs` must have room for `capacity`.
 */
enum MbStatus mb_model_predict(const struct MbModel *model,
                               const double *x,
                               size_t x_len,
                               size_t batch,
                               double *out_probs,
                               size_t capacity);

/**
 * Combines a teacher checkpoint (encoder and head) with a bridge checkpoint
 * (new-modality encoder and bridge) into one classifier.
 *
 * # Safety
 * Both paths must be NUL-terminated strings; `out` must be writable.
 */
enum MbStatus mb_bridged_load(const char *teacher_path,
                              const char *bridge_path,
                              struct MbBridgedModel **out);

/**
 * # Safety
 * `model` must come from [`mb_bridged_load`] and not be used afterwards. Null is ignored.
 */
void mb_bridged_free(struct MbBridgedModel *model);

/**
 * Tap positions (1-based) and trainable bridge parameter count.
 *
 * # Safety
 * `model` must be a live handle; the out pointers must be writable.
 */
enum MbStatus mb_bridged_info(const struct MbBridgedModel *model,
                              size_t *input_position,
                              size_t *output_position,
                              size_t *bridge_params);

/**
 * Class probabilities for `batch` new-modality inputs.
 *
 * # Safety
 * As for [`mb_model_predict`].
 */
enum MbStatus mb_bridged_predict(const struct MbBridgedModel *model,
                                 const double *x,
                                 size_t x_len,
                                 size_t batch,
                                 double *out_probs,
                                 size_t capacity);

/**
 * Runs the full synthetic experiment and returns the JSON report. A null
 * `config_toml` selects the default config. Free the result with
 * [`mb_string_free`].
 *
 * # Safety
 * `config_toml` must be null or NUL-terminated; `out_json` must be writable.
 */
enum MbStatus mb_run_experiment(const char *config_toml, char **out_json);

/**
 * # Safety
 * `s` must come from this library and not be used afterwards. Null is ignored.
 */
void mb_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MODELBRIDGE_H */
