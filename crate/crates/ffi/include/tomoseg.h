#ifndef TOMOSEG_H
#define TOMOSEG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Clustering method selector for [`ts_pseudolabel`].
 */
typedef enum TsClusterMethod {
  TS_CLUSTER_METHOD_KMEANS = 0,
  TS_CLUSTER_METHOD_MULTI_OTSU = 1,
  TS_CLUSTER_METHOD_GMM = 2,
} TsClusterMethod;

/**
 * Result code of every fallible call.
 */
typedef enum TsStatus {
  TS_STATUS_OK = 0,
  TS_STATUS_NULL_POINTER = 1,
  TS_STATUS_INVALID_ARGUMENT = 2,
  TS_STATUS_IO = 3,
  TS_STATUS_FORMAT = 4,
  TS_STATUS_SHAPE = 5,
  TS_STATUS_CLUSTERING = 6,
  TS_STATUS_CONFIG = 7,
  TS_STATUS_CHECKPOINT = 8,
  TS_STATUS_NON_FINITE = 9,
  TS_STATUS_TRAINING = 10,
  TS_STATUS_PANIC = 11,
} TsStatus;

/**
 * Per-voxel class labels.
 */
typedef struct TsLabels TsLabels;

/**
 * Trained network ready for inference.
 */
typedef struct TsModel TsModel;

/**
 * Grayscale volume, normalized or raw.
 */
typedef struct TsVolume TsVolume;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *ts_version(void);

/**
 * Message of the last failed call on this thread ("" if none).
 */
const char *ts_last_error_message(void);

/**
 * Copies `depth*height*width` floats (z-major, then rows) into a new volume.
 *
 * # Safety
 * `data` must point to that many readable floats; `out_volume` must be writable.
 */
enum TsStatus ts_volume_from_data(size_t depth,
                                  size_t height,
                                  size_t width,
                                  const float *data,
                                  struct TsVolume **out_volume);

/**
 * Loads a slice directory or a raw volume with its TOML sidecar.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out_volume` must be writable.
 */
enum TsStatus ts_volume_load(const char *path, struct TsVolume **out_volume);

/**
 * Percentile min-max normalization to [0, 1]; returns a new volume.
 *
 * # Safety
 * `volume` must be a live handle; `out_volume` must be writable.
 */
enum TsStatus ts_volume_normalize(const struct TsVolume *volume,
                                  double p_lo,
                                  double p_hi,
                                  struct TsVolume **out_volume);

/**
 * # Safety
 * `volume` must be a live handle; the three outputs must be writable.
 */
enum TsStatus ts_volume_shape(const struct TsVolume *volume,
                              size_t *depth,
                              size_t *height,
                              size_t *width);

/**
 * Copies the voxel values into `buffer`, which must hold `len` floats with
 * `len` equal to the voxel count.
 *
 * # Safety
 * `volume` must be a live handle and `buffer` writable for `len` floats.
 */
enum TsStatus ts_volume_copy_data(const struct TsVolume *volume, float *buffer, size_t len);

/**
 * # Safety
 * `volume` must be NULL or a handle not yet freed.
 */
void ts_volume_free(struct TsVolume *volume);

/**
 * Default three-phase phantom (background, matrix, blobs) with Gaussian
 * noise `noise_sigma` and a linear multiplicative drift of `drift_amplitude`
 * along a ramp rotated 30° from the column axis.
 *
 * # Safety
 * Both outputs must be writable.
 */
enum TsStatus ts_phantom_three_phase(size_t depth,
                                     size_t height,
                                     size_t width,
                                     uint64_t seed,
                                     double noise_sigma,
                                     double drift_amplitude,
                                     struct TsVolume **out_volume,
                                     struct TsLabels **out_ground_truth);

/**
 * Clusters voxel intensities into `k` pseudo-label classes.
 *
 * # Safety
 * `volume` must be a live handle; `out_labels` must be writable.
 */
enum TsStatus ts_pseudolabel(const struct TsVolume *volume,
                             enum TsClusterMethod method,
                             size_t k,
                             uint64_t seed,
                             struct TsLabels **out_labels);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out_labels` must be writable.
 */
enum TsStatus ts_labels_load(const char *path, struct TsLabels **out_labels);

/**
 * Writes a raw label file plus its TOML sidecar.
 *
 * # Safety
 * `labels` must be a live handle and `path` a NUL-terminated string.
 */
enum TsStatus ts_labels_save(const struct TsLabels *labels, const char *path);

/**
 * # Safety
 * `labels` must be a live handle; all outputs must be writable.
 */
enum TsStatus ts_labels_shape(const struct TsLabels *labels,
                              size_t *depth,
                              size_t *height,
                              size_t *width,
                              size_t *num_classes);

/**
 * Copies the labels into `buffer`; `len` must equal the voxel count.
 *
 * # Safety
 * `labels` must be a live handle and `buffer` writable for `len` bytes.
 */
enum TsStatus ts_labels_copy_data(const struct TsLabels *labels, uint8_t *buffer, size_t len);

/**
 * # Safety
 * `labels` must be NULL or a handle not yet freed.
 */
void ts_labels_free(struct TsLabels *labels);

/**
 * Pixel accuracy and mIoU of `prediction` against `ground_truth`, skipping
 * the `ignore_len` ground-truth classes in `ignore` (which may be NULL when
 * `ignore_len` is 0).
 *
 * # Safety
 * Handles must be live, `ignore` readable for `ignore_len` bytes, outputs writable.
 */
enum TsStatus ts_evaluate(const struct TsLabels *prediction,
                          const struct TsLabels *ground_truth,
                          const uint8_t *ignore,
                          size_t ignore_len,
                          double *out_accuracy,
                          double *out_miou);

/**
 * Loads the deployable network (the teacher when present) from a checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out_model` must be writable.
 */
enum TsStatus ts_model_load(const char *path, struct TsModel **out_model);

/**
 * # Safety
 * `model` must be a live handle; `out_count` must be writable.
 */
enum TsStatus ts_model_param_count(const struct TsModel *model, size_t *out_count);

/**
 * Segments every slice of a normalized volume.
 *
 * # Safety
 * Handles must be live; `out_labels` must be writable.
 */
enum TsStatus ts_model_segment(const struct TsModel *model,
                               const struct TsVolume *volume,
                               struct TsLabels **out_labels);

/**
 * # Safety
 * `model` must be NULL or a handle not yet freed.
 */
void ts_model_free(struct TsModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TOMOSEG_H */
