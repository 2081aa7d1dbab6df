#ifndef FUSIONNET_H
#define FUSIONNET_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  FUSIONNET_ACCURACY = 0,
  FUSIONNET_KAPPA = 1,
  FUSIONNET_SENSITIVITY = 2,
  FUSIONNET_SPECIFICITY = 3,
  FUSIONNET_PPV = 4,
} FusionnetMetric;

typedef enum {
  FUSIONNET_RESNET = 0,
  FUSIONNET_MAXVIT = 1,
  FUSIONNET_FUSION = 2,
} FusionnetModelKind;

typedef enum {
  FUSIONNET_OK = 0,
  FUSIONNET_ERR_NULL = 1,
  FUSIONNET_ERR_INVALID_ARGUMENT = 2,
  FUSIONNET_ERR_DIMENSION = 3,
  FUSIONNET_ERR_CONFIG = 4,
  FUSIONNET_ERR_VALIDATION = 5,
  FUSIONNET_ERR_PATH = 6,
  FUSIONNET_ERR_CHECKPOINT = 7,
  FUSIONNET_ERR_NON_FINITE = 8,
  FUSIONNET_ERR_INVERSION = 9,
  FUSIONNET_ERR_IO = 10,
  FUSIONNET_ERR_PANIC = 11,
} FusionnetStatus;

/**
 * Opaque metric report.
 */
typedef struct FusionnetMetrics FusionnetMetrics;

/**
 * Opaque model handle.
 */
typedef struct FusionnetModel FusionnetModel;

/**
 * Opaque result of one prediction call.
 */
typedef struct FusionnetPrediction FusionnetPrediction;

/**
 * Binary confusion matrix; pneumonia is the positive class.
 */
typedef struct {
  uint64_t tp;
  uint64_t fp;
  uint64_t tn;
  uint64_t fn_;
} FusionnetConfusion;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread (empty after a success).
 * Valid until the next call into the library from the same thread.
 */
const char *fusionnet_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *fusionnet_version(void);

/**
 * Builds a freshly initialised desk-scale model for square inputs of side
 * `resolution`.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for a handle.
 */
FusionnetStatus fusionnet_model_new(FusionnetModelKind kind,
                                    size_t resolution,
                                    uint64_t seed,
                                    FusionnetModel **out);

/**
 * Loads a model from a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid handle slot.
 */
FusionnetStatus fusionnet_model_load(const char *path, FusionnetModel **out);

/**
 * Writes the model's parameters to a checkpoint file (epoch 0, no history).
 *
 * # Safety
 * `model` must be a live handle and `path` a NUL-terminated string.
 */
FusionnetStatus fusionnet_model_save(const FusionnetModel *model, const char *path);

/**
 * Input side length the model expects (0 for a null handle).
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t fusionnet_model_resolution(const FusionnetModel *model);

/**
 * Total number of stored values (parameters and running statistics).
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t fusionnet_model_num_values(const FusionnetModel *model);

/**
 * Eval-mode prediction on `batch` normalized images laid out as
 * `[batch, 3, resolution, resolution]`.
 *
 * # Safety
 * `pixels` must point to `batch * 3 * resolution²` floats; `model` must be a
 * live handle and `out` a valid handle slot.
 */
FusionnetStatus fusionnet_model_predict(const FusionnetModel *model,
                                        const float *pixels,
                                        size_t batch,
                                        FusionnetPrediction **out);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void fusionnet_model_free(FusionnetModel *model);

/**
 * Number of images in the prediction (0 for a null handle).
 *
 * # Safety
 * `pred` must be null or a live handle.
 */
size_t fusionnet_prediction_len(const FusionnetPrediction *pred);

/**
 * Predicted class (0 normal, 1 pneumonia) and the two class probabilities
 * of image `index`. `probs` may be null.
 *
 * # Safety
 * `pred` must be a live handle, `class_out` writable, and `probs` null or
 * writable for two floats.
 */
FusionnetStatus fusionnet_prediction_get(const FusionnetPrediction *pred,
                                         size_t index,
                                         uint32_t *class_out,
                                         float *probs);

/**
 * # Safety
 * `pred` must be null or a handle not yet freed.
 */
void fusionnet_prediction_free(FusionnetPrediction *pred);

/**
 * Computes all five metrics from a confusion matrix.
 *
 * # Safety
 * `out` must be a valid handle slot.
 */
FusionnetStatus fusionnet_metrics_compute(FusionnetConfusion cm, FusionnetMetrics **out);

/**
 * Reads one metric. `*defined` is set to false (and `*value` to NaN) when
 * the metric's denominator is zero.
 *
 * # Safety
 * `metrics` must be a live handle; `value` and `defined` writable.
 */
FusionnetStatus fusionnet_metrics_get(const FusionnetMetrics *metrics,
                                      FusionnetMetric which,
                                      double *value,
                                      bool *defined);

/**
 * True when kappa's chance agreement is 1 and kappa was reported as 0.
 *
 * # Safety
 * `metrics` must be null or a live handle.
 */
bool fusionnet_metrics_kappa_degenerate(const FusionnetMetrics *metrics);

/**
 * # Safety
 * `metrics` must be null or a handle not yet freed.
 */
void fusionnet_metrics_free(FusionnetMetrics *metrics);

/**
 * Reconstructs the confusion matrix implied by a sensitivity/specificity
 * pair on `positives` positive and `negatives` negative samples.
 *
 * # Safety
 * `out` must be writable.
 */
FusionnetStatus fusionnet_invert_metrics(double sensitivity,
                                         double specificity,
                                         uint64_t positives,
                                         uint64_t negatives,
                                         FusionnetConfusion *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FUSIONNET_H */
