/* SPDX-License-Identifier: MIT OR Apache-2.0 */

#ifndef XCONSIST_H
#define XCONSIST_H

/* Generated by cbindgen from crates/ffi/src. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every `xc_*` call.
 */
typedef enum XcStatus {
  XC_STATUS_OK = 0,
  /**
   * A required pointer was NULL.
   */
  XC_STATUS_NULL = 1,
  XC_STATUS_ARGUMENT = 2,
  XC_STATUS_IO = 3,
  XC_STATUS_PARSE = 4,
  XC_STATUS_CONFIG = 5,
  XC_STATUS_NUMERIC = 6,
  XC_STATUS_MODEL = 7,
  /**
   * The score is undefined for the input (constant or empty data).
   */
  XC_STATUS_UNDEFINED = 8,
  /**
   * The engine panicked; the handle that was passed in should be freed.
   */
  XC_STATUS_PANIC = 9,
} XcStatus;

/**
 * Opaque model handle.
 */
typedef struct XcModel XcModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The pointer
 * stays valid until the next `xc_*` call on the same thread.
 */
const char *xc_last_error(void);

/**
 * Engine version as a static NUL-terminated string.
 */
const char *xc_version(void);

/**
 * Load a model checkpoint. On success `*out` owns a new handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum XcStatus xc_model_load(const char *path, struct XcModel **out);

/**
 * Release a handle from [`xc_model_load`]. NULL is ignored.
 *
 * # Safety
 * `model` must come from [`xc_model_load`] and not be used afterwards.
 */
void xc_model_free(struct XcModel *model);

/**
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum XcStatus xc_model_n_layers(const struct XcModel *model, size_t *out);

/**
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum XcStatus xc_model_vocab_size(const struct XcModel *model, size_t *out);

/**
 * Top-`k` object candidates for a cloze `prompt`, beam width `k`.
 *
 * `layer < 0` reads the final head; otherwise the logit lens of that
 * layer. Encoder prompts carry one `<mask>` per object token and ignore
 * `n_object`. Candidate `i` occupies `tokens[i * n .. (i + 1) * n]` with
 * `n = *out_n_object`, and its log-probability is `logprobs[i]`. Fewer
 * than `k` candidates are returned when the vocabulary has fewer
 * sequences of that length.
 *
 * # Safety
 * `tokens` must hold `tokens_capacity` items, `logprobs` `k` items.
 */
enum XcStatus xc_model_candidates(const struct XcModel *model,
                                  const char *prompt,
                                  size_t n_object,
                                  int32_t layer,
                                  size_t k,
                                  uint32_t *tokens,
                                  size_t tokens_capacity,
                                  double *logprobs,
                                  size_t *out_n_object,
                                  size_t *out_count);

/**
 * Mean RankC over `n_probes` code-mixed/monolingual list pairs.
 *
 * # Safety
 * `cm` and `mono` must each hold `n_probes * k * seq_len` tokens.
 */
enum XcStatus xc_rankc(const uint32_t *cm,
                       const uint32_t *mono,
                       size_t n_probes,
                       size_t k,
                       size_t seq_len,
                       double *out);

/**
 * Fraction of pairs with the same rank-1 sequence. Same layout as
 * [`xc_rankc`].
 *
 * # Safety
 * `cm` and `mono` must each hold `n_probes * k * seq_len` tokens.
 */
enum XcStatus xc_top1(const uint32_t *cm,
                      const uint32_t *mono,
                      size_t n_probes,
                      size_t k,
                      size_t seq_len,
                      double *out);

/**
 * Linear CKA between row-major `rows × x_cols` and `rows × y_cols`
 * batches.
 *
 * # Safety
 * `x` and `y` must hold `rows * x_cols` and `rows * y_cols` values.
 */
enum XcStatus xc_cka_linear(const double *x,
                            const double *y,
                            size_t rows,
                            size_t x_cols,
                            size_t y_cols,
                            double *out);

/**
 * Spearman correlation of `n` paired values and its two-sided p-value.
 *
 * # Safety
 * `x` and `y` must hold `n` values; `rho` and `p_value` must be writable.
 */
enum XcStatus xc_spearman(const double *x, const double *y, size_t n, double *rho, double *p_value);

/**
 * Run the experiment described by a JSON config file. `*out_exit_code`
 * receives the command-line exit code: 0 when every analysis succeeded,
 * 2 for configuration problems, 3 otherwise. A run whose analyses fail
 * individually still returns `XC_STATUS_OK` with exit code 3.
 *
 * # Safety
 * `config_path` must be NUL-terminated and `out_exit_code` writable.
 */
enum XcStatus xc_run_experiment(const char *config_path, int32_t *out_exit_code);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* XCONSIST_H */
