#ifndef CROWD_COUNT_H
#define CROWD_COUNT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes of every fallible call.
typedef enum CcStatus {
  CC_STATUS_OK = 0,
  // A required pointer argument was null.
  CC_STATUS_NULL_POINTER = 1,
  // Bad argument value, configuration or tensor shape.
  CC_STATUS_INVALID_ARGUMENT = 2,
  // Unreadable file or malformed input data.
  CC_STATUS_DATA = 3,
  // Corrupt or incompatible checkpoint.
  CC_STATUS_CHECKPOINT = 4,
  // Non-finite values.
  CC_STATUS_NUMERICAL = 5,
  // Output buffer too small; the required length is still reported.
  CC_STATUS_BUFFER_TOO_SMALL = 6,
  // Internal panic caught at the boundary.
  CC_STATUS_PANIC = 7,
} CcStatus;

// Loaded checkpoint. Not thread-safe; use one handle per thread.
typedef struct CcModel CcModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *cc_version(void);

// Message of the last failed call on this thread, or null after a success.
// The pointer stays valid until the next call on the same thread.
const char *cc_last_error_message(void);

// Loads a checkpoint file in its stored precision.
//
// # Safety
// `path` must be a NUL-terminated string and `out` writable.
enum CcStatus cc_model_load(const char *path, struct CcModel **out);

// Releases a handle; null is ignored.
//
// # Safety
// `model` must come from [`cc_model_load`] and not be used afterwards.
void cc_model_free(struct CcModel *model);

// Network input size in pixels.
//
// # Safety
// Pointers must be valid.
enum CcStatus cc_model_input_size(const struct CcModel *model, size_t *height, size_t *width);

// Exact number of learnable scalars.
//
// # Safety
// Pointers must be valid.
enum CcStatus cc_model_param_count(const struct CcModel *model, uint64_t *out);

// Analytic FLOPs (multiply-accumulate = 2) for one image of the given size.
//
// # Safety
// Pointers must be valid.
enum CcStatus cc_model_flops(const struct CcModel *model,
                             size_t height,
                             size_t width,
                             uint64_t *out);

// Predicted count for one RGB image (`height·width·3` bytes).
//
// # Safety
// `pixels` must point to `height·width·3` readable bytes; `count` writable.
enum CcStatus cc_model_predict(const struct CcModel *model,
                               const uint8_t *pixels,
                               size_t height,
                               size_t width,
                               double *count);

// Pooling weights of the final token grid, row-major, summing to 1.
// `grid_h`/`grid_w` are always written; `weights` needs `grid_h·grid_w`
// slots, otherwise [`CcStatus::BufferTooSmall`] is returned.
//
// # Safety
// `pixels` as in [`cc_model_predict`]; `weights` must have `capacity` slots.
enum CcStatus cc_model_density_weights(const struct CcModel *model,
                                       const uint8_t *pixels,
                                       size_t height,
                                       size_t width,
                                       double *weights,
                                       size_t capacity,
                                       size_t *grid_h,
                                       size_t *grid_w);

// Energy per image in joules: power (W) times latency (s).
//
// # Safety
// `out` must be writable.
enum CcStatus cc_energy_per_image(double power_watts, double latency_seconds, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CROWD_COUNT_H */
