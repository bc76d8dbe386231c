#ifndef UXMIL_H
#define UXMIL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

#define UXMIL_OK 0

/**
 * A required pointer was null or a length did not match.
 */
#define UXMIL_ERR_ARGUMENT 1

#define UXMIL_ERR_DIMENSION 2

#define UXMIL_ERR_EMPTY_SEQUENCE 3

#define UXMIL_ERR_INDEX 4

#define UXMIL_ERR_CONTRACT 5

#define UXMIL_ERR_NON_FINITE 6

#define UXMIL_ERR_FORMAT 7

#define UXMIL_ERR_INPUT_TOO_SHORT 8

#define UXMIL_ERR_INPUT 9

#define UXMIL_ERR_VALIDATION 10

#define UXMIL_ERR_CONFIG 11

#define UXMIL_ERR_DIVERGED 12

#define UXMIL_ERR_IO 13

#define UXMIL_ERR_JSON 14

#define UXMIL_ERR_IMAGE 15

/**
 * A Rust panic was caught at the boundary.
 */
#define UXMIL_ERR_PANIC 16

#define UXMIL_PROFILE_STANDARD 0

#define UXMIL_PROFILE_DESK 1

#define UXMIL_PROFILE_TOY 2

#define UXMIL_MODALITY_AUDIO 0

#define UXMIL_MODALITY_VISION 1

#define UXMIL_MODALITY_MULTIMODAL 2

#define UXMIL_NUM_CLASSES 7

/**
 * Opaque model handle.
 */
typedef struct UxmilModel UxmilModel;

/**
 * Input geometry a model expects. Sizes are element counts.
 */
typedef struct UxmilInputDims {
  int32_t modality;
  uintptr_t num_patches;
  uintptr_t patch_height;
  uintptr_t patch_width;
  uintptr_t num_clips;
  uintptr_t frames_per_clip;
  uintptr_t frame_size;
} UxmilInputDims;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. Valid until the
 * next call into this library from the same thread.
 */
const char *uxmil_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *uxmil_version(void);

/**
 * Creates a randomly initialised model.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for a handle.
 */
int32_t uxmil_model_new(int32_t profile,
                        int32_t modality_code,
                        uint64_t seed,
                        struct UxmilModel **out);

/**
 * Loads a weight file and the JSON config saved next to it.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
int32_t uxmil_model_load(const char *path, struct UxmilModel **out);

/**
 * Writes the weights to `path` and the config next to it.
 *
 * # Safety
 * `model` must come from this library; `path` must be NUL-terminated.
 */
int32_t uxmil_model_save(const struct UxmilModel *model, const char *path);

/**
 * Releases a handle. NULL is ignored.
 *
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void uxmil_model_free(struct UxmilModel *model);

/**
 * # Safety
 * `model` must come from this library; `out` must be writable.
 */
int32_t uxmil_model_input_dims(const struct UxmilModel *model, struct UxmilInputDims *out);

/**
 * Evaluation-mode logits for one episode. `patches` is `[P, h, w]` and
 * `clips` `[M, T, s, s]`, row-major; the one a unimodal model does not use
 * may be NULL. Writes 7 values to `logits_out`.
 *
 * # Safety
 * Buffers must hold the stated number of elements.
 */
int32_t uxmil_model_logits(const struct UxmilModel *model,
                           const double *patches,
                           uintptr_t patches_len,
                           const double *clips,
                           uintptr_t clips_len,
                           double *logits_out);

/**
 * Rollout CLS scores per instance. `patch_scores` receives `P` values
 * (audio models), `clip_scores` `M` values (vision models); pass NULL for a
 * modality the model lacks.
 *
 * # Safety
 * Buffers must hold the stated number of elements.
 */
int32_t uxmil_model_attention(const struct UxmilModel *model,
                              const double *patches,
                              uintptr_t patches_len,
                              const double *clips,
                              uintptr_t clips_len,
                              double *patch_scores,
                              double *clip_scores);

/**
 * Maps a 1–7 score to 0 (negative), 1 (neutral) or 2 (positive).
 *
 * # Safety
 * `out` must be writable.
 */
int32_t uxmil_quantize3(uint8_t score, uint8_t *out);

/**
 * Attention rollout of `layers` row-stochastic `n×n` maps; writes `n×n`.
 *
 * # Safety
 * `maps` must hold `layers·n·n` values and `out` `n·n`.
 */
int32_t uxmil_attention_rollout(const double *maps, uintptr_t layers, uintptr_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* UXMIL_H */
