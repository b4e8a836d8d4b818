#ifndef VTAGENT_H
#define VTAGENT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum VtStatus {
  VT_STATUS_OK = 0,
  VT_STATUS_NULL_POINTER = 1,
  VT_STATUS_INVALID_UTF8 = 2,
  VT_STATUS_INVALID_ARGUMENT = 3,
  VT_STATUS_PARSE_ERROR = 4,
  VT_STATUS_NON_FINITE = 5,
  VT_STATUS_IO = 6,
  VT_STATUS_BUFFER_TOO_SMALL = 7,
  VT_STATUS_PANIC = 99,
} VtStatus;

/**
 * Loaded dataset manifest.
 */
typedef struct VtManifest VtManifest;

/**
 * Parsed model turn.
 */
typedef struct VtTurn VtTurn;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or NULL. Valid until the next
 * failing call on the same thread.
 */
const char *vt_last_error_message(void);

/**
 * Releases a string returned by this library. NULL is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed already.
 */
void vt_string_free(char *s);

/**
 * # Safety
 * `text` must be a NUL-terminated string; `out` must be writable.
 */
enum VtStatus vt_normalize_answer(const char *text, char **out);

/**
 * Character-level edit distance.
 *
 * # Safety
 * `a` and `b` must be NUL-terminated strings; `out` must be writable.
 */
enum VtStatus vt_levenshtein(const char *a, const char *b, size_t *out);

/**
 * ANLS of `pred` against `n_golds` gold answers.
 *
 * # Safety
 * `pred` and each of the `n_golds` entries of `golds` must be NUL-terminated.
 */
enum VtStatus vt_anls(const char *pred,
                      const char *const *golds,
                      size_t n_golds,
                      double threshold,
                      double *out);

/**
 * 1 when the normalized prediction equals a normalized gold answer, else 0.
 *
 * # Safety
 * As for [`vt_anls`].
 */
enum VtStatus vt_exact_accuracy(const char *pred,
                                const char *const *golds,
                                size_t n_golds,
                                uint8_t *out);

/**
 * Correctness reward plus the keyframe-selection bonus.
 */
double vt_compute_reward(bool answer_correct, bool tool_used);

/**
 * Group-normalized advantages of `n` rewards, written to `out[0..n]`.
 *
 * # Safety
 * `rewards` must hold `n` values and `out` room for `n`.
 */
enum VtStatus vt_group_advantages(const double *rewards, size_t n, double delta, double *out);

/**
 * Clipped surrogate objective over a group of `n` trajectories.
 *
 * # Safety
 * The three input arrays must each hold `n` values.
 */
enum VtStatus vt_grpo_objective(const double *new_logp,
                                const double *old_logp,
                                const double *advantages,
                                size_t n,
                                double eps,
                                double *out);

/**
 * Validates raw frame ids. Kept ids are written to `out_ids` (at most
 * `out_cap`), their count to `out_len`. An empty result is `VT_STATUS_PARSE_ERROR`.
 *
 * # Safety
 * `ids` must hold `n` values and `out_ids` room for `out_cap`.
 */
enum VtStatus vt_validate_keyframes(const int64_t *ids,
                                    size_t n,
                                    size_t frame_count,
                                    size_t cap,
                                    size_t *out_ids,
                                    size_t out_cap,
                                    size_t *out_len);

/**
 * Parses one model turn. Free the handle with [`vt_turn_free`].
 *
 * # Safety
 * `text` must be NUL-terminated; `out` must be writable.
 */
enum VtStatus vt_turn_parse(const char *text, struct VtTurn **out);

/**
 * # Safety
 * `turn` must come from [`vt_turn_parse`] and not have been freed. NULL is ignored.
 */
void vt_turn_free(struct VtTurn *turn);

/**
 * True when the turn's action is a keyframe selection.
 *
 * # Safety
 * `turn` must be a live handle or NULL (NULL yields false).
 */
bool vt_turn_is_select(const struct VtTurn *turn);

/**
 * Frame ids of a selection action, as written (unvalidated).
 *
 * # Safety
 * `turn` must be a live handle; `buf` must have room for `cap` values.
 */
enum VtStatus vt_turn_frame_ids(const struct VtTurn *turn,
                                int64_t *buf,
                                size_t cap,
                                size_t *out_len);

/**
 * Answer text of an answer action.
 *
 * # Safety
 * `turn` must be a live handle; `out` must be writable.
 */
enum VtStatus vt_turn_answer(const struct VtTurn *turn, char **out);

/**
 * Reasoning text of the turn (possibly empty).
 *
 * # Safety
 * `turn` must be a live handle; `out` must be writable.
 */
enum VtStatus vt_turn_reasoning(const struct VtTurn *turn, char **out);

/**
 * Canonical rendering of the turn.
 *
 * # Safety
 * `turn` must be a live handle; `out` must be writable.
 */
enum VtStatus vt_turn_render(const struct VtTurn *turn, char **out);

/**
 * Loads a JSONL manifest. Free the handle with [`vt_manifest_free`].
 *
 * # Safety
 * `path` must be NUL-terminated; `out` must be writable.
 */
enum VtStatus vt_manifest_load(const char *path, bool skip_frame_check, struct VtManifest **out);

/**
 * # Safety
 * `m` must come from [`vt_manifest_load`] and not have been freed. NULL is ignored.
 */
void vt_manifest_free(struct VtManifest *m);

/**
 * Number of samples; 0 for NULL.
 *
 * # Safety
 * `m` must be a live handle or NULL.
 */
size_t vt_manifest_len(const struct VtManifest *m);

/**
 * Sample id at `index`.
 *
 * # Safety
 * `m` must be a live handle; `out` must be writable.
 */
enum VtStatus vt_manifest_sample_id(const struct VtManifest *m, size_t index, char **out);

/**
 * Frame count of the sample at `index`.
 *
 * # Safety
 * `m` must be a live handle; `out` must be writable.
 */
enum VtStatus vt_manifest_frame_count(const struct VtManifest *m, size_t index, size_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VTAGENT_H */
