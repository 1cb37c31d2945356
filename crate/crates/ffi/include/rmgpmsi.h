#ifndef RMGPMSI_H
#define RMGPMSI_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/**
 * Result of every call.
 */
typedef enum RmgpmsiStatus {
  RMGPMSI_STATUS_OK = 0,
  /**
   * Null pointer, bad length or malformed string argument.
   */
  RMGPMSI_STATUS_INVALID_ARGUMENT = 1,
  /**
   * Invalid configuration or incompatible artifact.
   */
  RMGPMSI_STATUS_CONFIG = 2,
  /**
   * Unreadable or malformed data, including corrupt checkpoints.
   */
  RMGPMSI_STATUS_DATA = 3,
  /**
   * Training diverged.
   */
  RMGPMSI_STATUS_DIVERGENCE = 4,
  /**
   * Any other failure.
   */
  RMGPMSI_STATUS_OTHER = 5,
  /**
   * A panic was caught at the boundary.
   */
  RMGPMSI_STATUS_PANIC = 6,
} RmgpmsiStatus;

/**
 * Opaque trained model.
 */
typedef struct RmgpmsiModel RmgpmsiModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer is
 * valid until the next call on this thread.
 */
const char *rmgpmsi_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *rmgpmsi_version(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed already.
 */
void rmgpmsi_string_free(char *s);

/**
 * Loads a checkpoint into a new model handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum RmgpmsiStatus rmgpmsi_model_load(const char *path, struct RmgpmsiModel **out);

/**
 * Releases a model handle. Null is ignored.
 *
 * # Safety
 * `model` must come from [`rmgpmsi_model_load`] and not have been freed.
 */
void rmgpmsi_model_free(struct RmgpmsiModel *model);

/**
 * Class count `K`, expected input shape, and the number of interacting
 * stages. Any out-pointer may be null.
 *
 * # Safety
 * `model` must be a live handle; non-null out-pointers must be writable.
 */
enum RmgpmsiStatus rmgpmsi_model_info(const struct RmgpmsiModel *model,
                                      size_t *classes,
                                      size_t *height,
                                      size_t *width,
                                      size_t *channels,
                                      size_t *stage_num);

/**
 * Classifies one image of exactly the model's input shape. Writes the
 * concatenation head's `K` probabilities to `concat_probs` (may be null
 * to skip) and the concat and mix predictions to the class out-pointers
 * (each may be null).
 *
 * # Safety
 * `model` must be a live handle; `pixels` must hold
 * `height * width * channels` floats; `concat_probs`, when non-null, must
 * hold `classes` doubles.
 */
enum RmgpmsiStatus rmgpmsi_model_predict(struct RmgpmsiModel *model,
                                         const float *pixels,
                                         size_t height,
                                         size_t width,
                                         size_t channels,
                                         double *concat_probs,
                                         size_t classes,
                                         size_t *concat_class,
                                         size_t *mix_class);

/**
 * Writes a depth-`r` recursive mosaic of the input to `output` (same
 * shape). When `trace` is non-null it receives the mosaic trace text, to be
 * released with [`rmgpmsi_string_free`]. Depths above 3 need `allow_deep`.
 *
 * # Safety
 * `input` and `output` must each hold `height * width * channels` floats;
 * `trace`, when non-null, must be writable.
 */
enum RmgpmsiStatus rmgpmsi_mosaic(const float *input,
                                  float *output,
                                  size_t height,
                                  size_t width,
                                  size_t channels,
                                  uint32_t r,
                                  uint64_t seed,
                                  bool allow_deep,
                                  char **trace);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RMGPMSI_H */
