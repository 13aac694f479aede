/* C interface for the nfhmm source-separation toolkit. */

#ifndef NFHMM_H
#define NFHMM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every `nfhmm_*` call.
 */
typedef enum NfhmmStatus {
  NFHMM_STATUS_OK = 0,
  NFHMM_STATUS_NULL_ARGUMENT = 1,
  NFHMM_STATUS_INVALID_UTF8 = 2,
  NFHMM_STATUS_IO_ERROR = 3,
  NFHMM_STATUS_INVALID_INPUT = 4,
  NFHMM_STATUS_NUMERICAL_FAILURE = 5,
  NFHMM_STATUS_PANIC = 6,
} NfhmmStatus;

/**
 * Inference engine selector: 0 = variational, 1 = exact, 2 = plca.
 */
typedef enum NfhmmAlgorithm {
  NFHMM_ALGORITHM_VARIATIONAL = 0,
  NFHMM_ALGORITHM_EXACT = 1,
  NFHMM_ALGORITHM_PLCA = 2,
} NfhmmAlgorithm;

/**
 * Opaque handle to a trained source model.
 */
typedef struct NfhmmModel NfhmmModel;

/**
 * STFT settings shared by training and separation.
 */
typedef struct NfhmmStftParams {
  uintptr_t window_length;
  uintptr_t hop_length;
  uintptr_t fft_length;
  /**
   * 0 = periodic Hann, 1 = rectangular.
   */
  uint32_t window_kind;
} NfhmmStftParams;

/**
 * SDR / SIR / SAR in decibels.
 */
typedef struct NfhmmScores {
  double sdr;
  double sir;
  double sar;
} NfhmmScores;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message text of the most recent error on this thread. The pointer stays
 * valid until the next failing `nfhmm_*` call on the same thread. Returns
 * null when no error has occurred yet.
 */
const char *nfhmm_last_error_message(void);

/**
 * Default STFT settings: 1024-sample Hann window, 256-sample hop.
 */
struct NfhmmStftParams nfhmm_stft_params_default(void);

/**
 * Train a source model from one or more WAV files (concatenated in order)
 * and hand back an owned handle through `out_model`.
 *
 * # Safety
 * `wav_paths` must point to `n_paths` valid NUL-terminated strings and
 * `out_model` must be a valid pointer.
 */
enum NfhmmStatus nfhmm_model_train(const char *const *wav_paths,
                                   uintptr_t n_paths,
                                   struct NfhmmStftParams stft_params,
                                   uintptr_t n_dicts,
                                   uintptr_t n_elems,
                                   uintptr_t max_iters,
                                   double rel_tol,
                                   uint64_t seed,
                                   double gain,
                                   struct NfhmmModel **out_model);

/**
 * Load a model file produced by `nfhmm_model_save` or the CLI.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string and `out_model` a valid
 * pointer.
 */
enum NfhmmStatus nfhmm_model_load(const char *path, struct NfhmmModel **out_model);

/**
 * Write a model to disk; the file round-trips bit-exactly.
 *
 * # Safety
 * `model` must be a live handle from this library and `path` a valid
 * NUL-terminated string.
 */
enum NfhmmStatus nfhmm_model_save(const struct NfhmmModel *model, const char *path);

/**
 * Report a model's dimensions. Null out-pointers are skipped.
 *
 * # Safety
 * `model` must be a live handle from this library.
 */
enum NfhmmStatus nfhmm_model_dims(const struct NfhmmModel *model,
                                  uintptr_t *out_n_dicts,
                                  uintptr_t *out_n_elems,
                                  uintptr_t *out_n_bins);

/**
 * Release a model handle. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle obtained from this library that has not
 * been freed yet.
 */
void nfhmm_model_free(struct NfhmmModel *model);

/**
 * Separate a mixture WAV with the given source models and write one WAV per
 * source into `out_dir` as `<stem>.source<k>.wav`. On success the number of
 * inference iterations is stored in `out_iterations` (when non-null).
 *
 * # Safety
 * `mixture_path`, `out_dir`, and `stem` must be valid NUL-terminated
 * strings; `models` must point to `n_models` live model handles.
 */
enum NfhmmStatus nfhmm_separate(const char *mixture_path,
                                const struct NfhmmModel *const *models,
                                uintptr_t n_models,
                                enum NfhmmAlgorithm algorithm,
                                double gamma,
                                uintptr_t max_iters,
                                double rel_tol,
                                double gain,
                                struct NfhmmStftParams stft_params,
                                const char *out_dir,
                                const char *stem,
                                uintptr_t *out_iterations);

/**
 * Score one estimate WAV against reference WAVs; `target_index` names the
 * reference the estimate should match.
 *
 * # Safety
 * `estimate_path` must be a valid NUL-terminated string, `reference_paths`
 * must point to `n_references` valid strings, and `out_scores` must be a
 * valid pointer.
 */
enum NfhmmStatus nfhmm_bss_eval(const char *estimate_path,
                                const char *const *reference_paths,
                                uintptr_t n_references,
                                uintptr_t target_index,
                                struct NfhmmScores *out_scores);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NFHMM_H */
