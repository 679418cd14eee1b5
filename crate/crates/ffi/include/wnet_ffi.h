#ifndef WNET_FFI_H
#define WNET_FFI_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum WnetStatus {
  WNET_STATUS_OK = 0,
  WNET_STATUS_NULL_POINTER = 1,
  WNET_STATUS_INVALID_ARGUMENT = 2,
  WNET_STATUS_SHAPE_MISMATCH = 3,
  WNET_STATUS_IO = 4,
  WNET_STATUS_CHECKPOINT = 5,
  WNET_STATUS_NON_FINITE = 6,
  WNET_STATUS_PANIC = 7,
} WnetStatus;

/**
 * Trained detector restored from a checkpoint.
 */
typedef struct WnetDetector WnetDetector;

/**
 * Window layout for tiled inference.
 */
typedef struct WnetTilePlan WnetTilePlan;

typedef struct WnetConfusion {
  uint64_t tp;
  uint64_t fp;
  uint64_t tn;
  uint64_t fn_;
} WnetConfusion;

/**
 * Accuracy rates; undefined values (zero denominators) are NaN.
 */
typedef struct WnetRates {
  double mar;
  double far;
  double oer;
  double pcc;
  double pre;
  double kappa;
  double precision;
  double recall;
} WnetRates;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. The pointer is
 * valid until the next call into this library on the same thread.
 */
const char *wnet_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *wnet_version(void);

/**
 * Load a checkpoint for inference on `patch x patch` windows.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum WnetStatus wnet_detector_load(const char *path, size_t patch, struct WnetDetector **out);

/**
 * # Safety
 * `detector` must come from [`wnet_detector_load`] or be null.
 */
void wnet_detector_free(struct WnetDetector *detector);

/**
 * Tiled inference on two interleaved 8-bit RGB images of `width x height`.
 * Writes `width * height` probabilities to `prob_out` and, when non-null,
 * a 0/255 change mask to `mask_out`.
 *
 * # Safety
 * Image buffers must hold `3 * width * height` bytes; output buffers must
 * hold `width * height` elements.
 */
enum WnetStatus wnet_detector_infer(const struct WnetDetector *detector,
                                    const uint8_t *t1_rgb,
                                    const uint8_t *t2_rgb,
                                    uint32_t width,
                                    uint32_t height,
                                    size_t stride,
                                    double threshold,
                                    float *prob_out,
                                    uint8_t *mask_out);

/**
 * # Safety
 * `out` must be a valid pointer.
 */
enum WnetStatus wnet_tile_plan_new(size_t width,
                                   size_t height,
                                   size_t patch,
                                   size_t stride,
                                   struct WnetTilePlan **out);

/**
 * Number of windows, or 0 for a null plan.
 *
 * # Safety
 * `plan` must come from [`wnet_tile_plan_new`] or be null.
 */
size_t wnet_tile_plan_len(const struct WnetTilePlan *plan);

/**
 * Origin of window `index` in raster order.
 *
 * # Safety
 * `plan` must come from [`wnet_tile_plan_new`]; `x` and `y` must be valid.
 */
enum WnetStatus wnet_tile_plan_origin(const struct WnetTilePlan *plan,
                                      size_t index,
                                      size_t *x,
                                      size_t *y);

/**
 * # Safety
 * `plan` must come from [`wnet_tile_plan_new`] or be null.
 */
void wnet_tile_plan_free(struct WnetTilePlan *plan);

/**
 * Count agreement between two masks of `len` bytes; nonzero means changed.
 *
 * # Safety
 * `pred` and `gt` must hold `len` bytes; `out` must be valid.
 */
enum WnetStatus wnet_confusion(const uint8_t *pred,
                               const uint8_t *gt,
                               size_t len,
                               struct WnetConfusion *out);

/**
 * # Safety
 * `counts` and `out` must be valid pointers.
 */
enum WnetStatus wnet_rates(const struct WnetConfusion *counts, struct WnetRates *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* WNET_FFI_H */
