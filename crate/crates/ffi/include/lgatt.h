#ifndef LGATT_H
#define LGATT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LgattStatus {
  LGATT_STATUS_OK = 0,
  LGATT_STATUS_NULL_POINTER = 1,
  LGATT_STATUS_INVALID_ARGUMENT = 2,
  LGATT_STATUS_SHAPE = 3,
  LGATT_STATUS_FORMAT = 4,
  LGATT_STATUS_IO = 5,
  LGATT_STATUS_METRIC = 6,
  LGATT_STATUS_PANIC = 7,
} LgattStatus;

/**
 * An attention mask over `size` frames.
 */
typedef struct LgattMask LgattMask;

/**
 * A loaded model checkpoint.
 */
typedef struct LgattModel LgattModel;

typedef struct LgattModelInfo {
  size_t max_frames;
  size_t visual_dim;
  size_t audio_dim;
  size_t num_classes;
} LgattModelInfo;

typedef struct LgattEvalReport {
  double gap;
  double map;
  double perr;
  double hit1;
} LgattEvalReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL if none. The
 * pointer stays valid until the next failing call on the same thread.
 */
const char *lgatt_last_error(void);

/**
 * Builds a mask from `spec` (`bd:W`, `tp:W`, `td:W:L` or `full`) over `size`
 * frames.
 *
 * # Safety
 * `spec` must be a NUL-terminated string and `out` a valid pointer.
 */
enum LgattStatus lgatt_mask_new(const char *spec, size_t size, struct LgattMask **out);

/**
 * Frame count of `mask`, or 0 for NULL.
 *
 * # Safety
 * `mask` must be NULL or a live handle from [`lgatt_mask_new`].
 */
size_t lgatt_mask_size(const struct LgattMask *mask);

/**
 * Writes whether query frame `i` may attend to key frame `j`.
 *
 * # Safety
 * `mask` must be a live handle and `out` a valid pointer.
 */
enum LgattStatus lgatt_mask_keeps(const struct LgattMask *mask, size_t i, size_t j, bool *out);

/**
 * Copies the row-major keep matrix (1 keep, 0 forbid) into `buf`, which
 * must hold `size * size` bytes.
 *
 * # Safety
 * `mask` must be a live handle and `buf` valid for `len` writes.
 */
enum LgattStatus lgatt_mask_copy(const struct LgattMask *mask, uint8_t *buf, size_t len);

/**
 * # Safety
 * `mask` must be NULL or a handle from [`lgatt_mask_new`] not yet freed.
 */
void lgatt_mask_free(struct LgattMask *mask);

/**
 * Loads a checkpoint written by `lgatt train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum LgattStatus lgatt_model_load(const char *path, struct LgattModel **out);

/**
 * # Safety
 * `model` must be a live handle and `out` a valid pointer.
 */
enum LgattStatus lgatt_model_info(const struct LgattModel *model, struct LgattModelInfo *out);

/**
 * Class probabilities for one video of `frames` frames. `visual` holds
 * `frames * visual_dim` and `audio` `frames * audio_dim` row-major values;
 * videos longer than the model's `max_frames` are truncated. `scores` must
 * hold `num_classes` values.
 *
 * # Safety
 * All pointers must be valid for the stated lengths.
 */
enum LgattStatus lgatt_model_predict(const struct LgattModel *model,
                                     const float *visual,
                                     const float *audio,
                                     size_t frames,
                                     double *scores,
                                     size_t num_classes);

/**
 * # Safety
 * `model` must be NULL or a handle from [`lgatt_model_load`] not yet freed.
 */
void lgatt_model_free(struct LgattModel *model);

/**
 * GAP (top 20), MAP, PERR and Hit@1 of `num_videos x num_classes` row-major
 * `scores` in `[0, 1]`. Labels are in CSR form: the classes of video `v` are
 * `labels[label_offsets[v] .. label_offsets[v + 1]]`.
 *
 * # Safety
 * `scores` must hold `num_videos * num_classes` values, `label_offsets`
 * `num_videos + 1` values, and `labels` `label_offsets[num_videos]` values.
 */
enum LgattStatus lgatt_evaluate(const double *scores,
                                size_t num_videos,
                                size_t num_classes,
                                const size_t *label_offsets,
                                const size_t *labels,
                                struct LgattEvalReport *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LGATT_H */
