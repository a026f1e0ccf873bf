#ifndef XCROSS_H
#define XCROSS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Kind of model held by an [`XcModel`].
 */
typedef enum XcModelKind {
  /**
   * Base encoder with one domain's adapters and head.
   */
  XC_MODEL_KIND_SINGLE_DOMAIN = 0,
  /**
   * X-Cross over several source adapters.
   */
  XC_MODEL_KIND_INTEGRATED = 1,
} XcModelKind;

/**
 * Result of every call.
 */
typedef enum XcStatus {
  XC_STATUS_OK = 0,
  XC_STATUS_NULL_POINTER = 1,
  XC_STATUS_INVALID_ARGUMENT = 2,
  XC_STATUS_IO = 3,
  XC_STATUS_PARSE = 4,
  XC_STATUS_HASH_MISMATCH = 5,
  XC_STATUS_NON_FINITE = 6,
  XC_STATUS_PANIC = 7,
} XcStatus;

/**
 * A loaded checkpoint that can score prompts.
 */
typedef struct XcModel XcModel;

typedef struct XcReport {
  /**
   * Percentages.
   */
  double hit1;
  double hit3;
  double hit10;
  /**
   * In `[0, 1]`.
   */
  double mrr10;
  size_t count;
} XcReport;

typedef struct XcParamReport {
  size_t integrator_per_layer;
  /**
   * One adapted `d×d` matrix of one domain.
   */
  size_t lora_per_matrix;
  double ratio;
} XcParamReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (always
 * NUL-terminated when `len > 0`) and returns the full message length
 * excluding the terminator.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t xc_last_error(char *buf, size_t len);

/**
 * Loads a checkpoint written by `xcross train-source` or `xcross
 * train-xcross`. Component hashes are verified.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum XcStatus xc_model_load(const char *path, struct XcModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from [`xc_model_load`] and not be used afterwards.
 */
void xc_model_free(struct XcModel *model);

/**
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum XcStatus xc_model_kind(const struct XcModel *model, enum XcModelKind *out);

/**
 * Maximum prompt length accepted by the model.
 *
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum XcStatus xc_model_max_len(const struct XcModel *model, size_t *out);

/**
 * Scores `count` prompts stored back to back in `tokens`, prompt `i`
 * having `lengths[i]` tokens. Writes `count` scores to `scores`.
 *
 * # Safety
 * `tokens` must hold `Σ lengths` values, `lengths` `count` values and
 * `scores` room for `count` doubles.
 */
enum XcStatus xc_model_score(const struct XcModel *model,
                             const uint32_t *tokens,
                             const size_t *lengths,
                             size_t count,
                             double *scores);

/**
 * Evaluates the model on one domain split (`0` train, `1` valid, `2`
 * test) of a data directory written by `xcross gen-data`.
 *
 * # Safety
 * `model` must be a live handle, `data_dir` a NUL-terminated string and
 * `out` writable.
 */
enum XcStatus xc_model_evaluate(const struct XcModel *model,
                                const char *data_dir,
                                uint16_t domain,
                                uint32_t split,
                                struct XcReport *out);

/**
 * 1-based rank of `scores[positive]` among `count` scores; ties count
 * against the positive.
 *
 * # Safety
 * `scores` must hold `count` doubles; `out` must be writable.
 */
enum XcStatus xc_rank_of(const double *scores, size_t count, size_t positive, size_t *out);

/**
 * Integrator parameters per layer for `n` domains of width `d`, against
 * one rank-`rank` LoRA matrix.
 *
 * # Safety
 * `out` must be writable.
 */
enum XcStatus xc_param_report(size_t n, size_t d, size_t rank, struct XcParamReport *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* XCROSS_H */
