#ifndef AMTL_H
#define AMTL_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AmtlStatus {
  AMTL_STATUS_OK = 0,
  AMTL_STATUS_NULL_POINTER = 1,
  AMTL_STATUS_INVALID_UTF8 = 2,
  AMTL_STATUS_IO = 3,
  AMTL_STATUS_BAD_CHECKPOINT = 4,
  AMTL_STATUS_INVALID_INPUT = 5,
  AMTL_STATUS_BUFFER_TOO_SMALL = 6,
  AMTL_STATUS_CONFIG = 7,
  AMTL_STATUS_INTERNAL = 8,
} AmtlStatus;

/**
 * Loaded checkpoint plus search settings. Opaque to C callers.
 */
typedef struct AmtlModel AmtlModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Loads a checkpoint. On success `*out` owns a handle for [`amtl_model_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum AmtlStatus amtl_model_load(const char *path, struct AmtlModel **out);

/**
 * Replaces the policy head with the one stored in another checkpoint.
 *
 * # Safety
 * `model` must come from [`amtl_model_load`]; `path` must be NUL-terminated.
 */
enum AmtlStatus amtl_model_load_policy(struct AmtlModel *model, const char *path);

/**
 * Sets the search width and depth used by [`amtl_correct`].
 *
 * # Safety
 * `model` must come from [`amtl_model_load`].
 */
enum AmtlStatus amtl_model_set_search(struct AmtlModel *model, uintptr_t width, uintptr_t depth);

/**
 * Releases a model handle. Null is ignored.
 *
 * # Safety
 * `model` must come from [`amtl_model_load`] and not be used afterwards.
 */
void amtl_model_free(struct AmtlModel *model);

/**
 * Corrects one sentence. `fast` nonzero uses the policy span.
 * On success `*out` is a new string for [`amtl_string_free`].
 *
 * # Safety
 * `model` must be a live handle, `text` NUL-terminated, `out` valid.
 */
enum AmtlStatus amtl_correct(const struct AmtlModel *model,
                             const char *text,
                             int32_t fast,
                             char **out);

/**
 * Writes per-token wrongness probabilities into `scores[0..cap]`.
 * `*len` always receives the sentence length; a short buffer yields
 * `BufferTooSmall` without writing scores.
 *
 * # Safety
 * `scores` must hold `cap` doubles (may be null when `cap` is 0).
 */
enum AmtlStatus amtl_score(const struct AmtlModel *model,
                           const char *text,
                           double *scores,
                           uintptr_t cap,
                           uintptr_t *len);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void amtl_string_free(char *s);

/**
 * Message for the last failure on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *amtl_last_error_message(void);

/**
 * Library version as a static string.
 */
const char *amtl_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AMTL_H */
