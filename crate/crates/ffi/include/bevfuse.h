#ifndef BEVFUSE_H
#define BEVFUSE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum BfStatus {
  BF_OK = 0,
  BF_NULL_POINTER = 1,
  BF_INVALID_UTF8 = 2,
  BF_INVALID_ARGUMENT = 3,
  BF_IO = 4,
  BF_MALFORMED = 5,
  BF_VERSION_MISMATCH = 6,
  BF_MISSING_WEIGHTS = 7,
  BF_WEIGHTS_MISMATCH = 8,
  BF_NON_FINITE = 9,
  BF_OUT_OF_RANGE = 10,
  BF_INTERNAL = 11,
} BfStatus;

/**
 * Detections produced by [`bevfuse_detect`].
 */
typedef struct BfDetections BfDetections;

/**
 * A trained model loaded from a weights directory.
 */
typedef struct BfModel BfModel;

/**
 * One detection in ego coordinates.
 */
typedef struct BfDetection {
  double center[3];
  /**
   * length, width, height in meters
   */
  double size[3];
  double yaw;
  double score;
  uint64_t frame_id;
  /**
   * 0 = car, 1 = pedestrian
   */
  uint32_t class_id;
} BfDetection;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` as a
 * NUL-terminated string, truncating to `len - 1` bytes. Returns the full
 * message length in bytes (without the NUL), so a call with `len == 0`
 * sizes the buffer.
 *
 * # Safety
 * `buf` must be valid for `len` bytes or null with `len == 0`.
 */
size_t bevfuse_last_error(char *buf, size_t len);

/**
 * Loads the weights directory written by `bevfuse train`.
 *
 * # Safety
 * `dir` must be a NUL-terminated string; `out` must be writable.
 */
enum BfStatus bevfuse_model_load(const char *dir, struct BfModel **out);

/**
 * # Safety
 * `model` must come from [`bevfuse_model_load`] and not be used afterwards. Null is a no-op.
 */
void bevfuse_model_free(struct BfModel *model);

/**
 * Runs the detector over every frame of a dataset split directory.
 * `modalities` is a set such as `"LC"`; null picks the model's own set.
 *
 * # Safety
 * `model` must be a live handle, strings NUL-terminated, `out` writable.
 */
enum BfStatus bevfuse_detect(const struct BfModel *model,
                             const char *split_dir,
                             const char *modalities,
                             struct BfDetections **out);

/**
 * Number of detections; 0 for null.
 *
 * # Safety
 * `dets` must be a live handle or null.
 */
size_t bevfuse_detections_len(const struct BfDetections *dets);

/**
 * Copies detection `index` into `out`.
 *
 * # Safety
 * `dets` must be a live handle; `out` writable.
 */
enum BfStatus bevfuse_detections_get(const struct BfDetections *dets,
                                     size_t index,
                                     struct BfDetection *out);

/**
 * # Safety
 * `dets` must come from [`bevfuse_detect`] and not be used afterwards. Null is a no-op.
 */
void bevfuse_detections_free(struct BfDetections *dets);

/**
 * Mean relative AP difference in percent between bad- and nice-weather APs
 * over `n` range bins. Bins whose nice AP is zero or NaN are skipped.
 *
 * # Safety
 * `ap_bad` and `ap_nice` must hold `n` values; `out` writable.
 */
enum BfStatus bevfuse_mrapd(const double *ap_bad, const double *ap_nice, size_t n, double *out);

/**
 * Mean of `n` per-threshold APs.
 *
 * # Safety
 * `aps` must hold `n` values; `out` writable.
 */
enum BfStatus bevfuse_map_from_aps(const double *aps, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BEVFUSE_H */
