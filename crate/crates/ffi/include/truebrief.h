#ifndef TRUEBRIEF_H
#define TRUEBRIEF_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every call.
 */
typedef enum TbStatus {
  TB_STATUS_OK = 0,
  TB_STATUS_NULL_POINTER = 1,
  TB_STATUS_INVALID_UTF8 = 2,
  TB_STATUS_INVALID_ARGUMENT = 3,
  TB_STATUS_IO = 4,
  TB_STATUS_NUMERICAL = 5,
  TB_STATUS_PANIC = 6,
} TbStatus;

/**
 * Preference loss selector for [`tb_preference_loss`].
 */
typedef enum TbLoss {
  TB_LOSS_DPO = 0,
  /**
   * Add-DPO with divisor `k`.
   */
  TB_LOSS_ADD_DPO_K = 1,
  /**
   * Add-DPO with divisor `k - 1`.
   */
  TB_LOSS_ADD_DPO_K_MINUS1 = 2,
  TB_LOSS_PL_DPO = 3,
} TbLoss;

/**
 * Opaque fitted hallucination detector.
 */
typedef struct TbDetector TbDetector;

/**
 * Opaque toy decoder.
 */
typedef struct TbModel TbModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (NUL
 * terminated, truncated to `cap`) and returns the full length including the
 * terminator. Pass a null `buf` to query the length.
 *
 * # Safety
 *
 * `buf` must be null or point to `cap` writable bytes.
 */
size_t tb_last_error(char *buf, size_t cap);

/**
 * Releases a string returned by this library.
 *
 * # Safety
 *
 * `s` must be null or a pointer obtained from this library and not yet
 * freed.
 */
void tb_string_free(char *s);

/**
 * Mean preference loss over `n_samples` samples of `k` responses each.
 * `policy` and `reference` hold `n_samples * k` log-probabilities, row
 * major, chosen response first in each row.
 *
 * # Safety
 *
 * `policy` and `reference` must point to `n_samples * k` readable values;
 * `out_loss` must be writable.
 */
enum TbStatus tb_preference_loss(enum TbLoss kind,
                                 double beta,
                                 size_t k,
                                 size_t n_samples,
                                 const double *policy,
                                 const double *reference,
                                 double *out_loss);

/**
 * `(completeness / 5 + f_score) / 2`.
 *
 * # Safety
 *
 * `out` must be writable.
 */
enum TbStatus tb_balanced_score(double completeness, double f_score, double *out_score);

/**
 * F1 from precision and recall; 0 when both are 0.
 */
double tb_f1(double precision, double recall);

/**
 * ROUGE-N F1 (`n >= 1`) or ROUGE-L F1 (`n == 0`) of `candidate` against
 * `reference`.
 *
 * # Safety
 *
 * Both strings must be NUL terminated; `out_f1` must be writable.
 */
enum TbStatus tb_rouge_f1(const char *reference, const char *candidate, size_t n, double *out_f1);

/**
 * Share of `candidate` sentences supported by `source` under the lexical
 * proxy judge.
 *
 * # Safety
 *
 * Both strings must be NUL terminated; `out_score` must be writable.
 */
enum TbStatus tb_faithfulness_proxy(const char *source, const char *candidate, double *out_score);

/**
 * A freshly initialised model with the default vocabulary and a feed-forward
 * width of `4 * d_model`.
 *
 * # Safety
 *
 * `out_model` must be writable.
 */
enum TbStatus tb_model_new(size_t layers,
                           size_t heads,
                           size_t d_model,
                           size_t context,
                           uint64_t seed,
                           struct TbModel **out_model);

/**
 * Loads a `.tblm` checkpoint.
 *
 * # Safety
 *
 * `path` must be NUL terminated; `out_model` must be writable.
 */
enum TbStatus tb_model_load(const char *path, struct TbModel **out_model);

/**
 * Writes a model to a `.tblm` checkpoint.
 *
 * # Safety
 *
 * `model` must be a live handle and `path` NUL terminated.
 */
enum TbStatus tb_model_save(const struct TbModel *model, const char *path);

/**
 * Releases a model handle.
 *
 * # Safety
 *
 * `model` must be null or a live handle from this library.
 */
void tb_model_free(struct TbModel *model);

/**
 * Greedy continuation of `prompt` of at most `max_new` tokens. The text is
 * returned in `out_text` and must be released with [`tb_string_free`].
 *
 * # Safety
 *
 * `model` must be a live handle, `prompt` NUL terminated and `out_text`
 * writable.
 */
enum TbStatus tb_model_generate(const struct TbModel *model,
                                const char *prompt,
                                size_t max_new,
                                char **out_text);

/**
 * Log-probability of `response` (followed by end of sequence) given
 * `prompt`.
 *
 * # Safety
 *
 * `model` must be a live handle, both strings NUL terminated and `out_logprob`
 * writable.
 */
enum TbStatus tb_model_sequence_logprob(const struct TbModel *model,
                                        const char *prompt,
                                        const char *response,
                                        double *out_logprob);

/**
 * Parses a detector saved as JSON by the `detect` command.
 *
 * # Safety
 *
 * `json` must be NUL terminated; `out_detector` must be writable.
 */
enum TbStatus tb_detector_from_json(const char *json, struct TbDetector **out_detector);

/**
 * Releases a detector handle.
 *
 * # Safety
 *
 * `detector` must be null or a live handle from this library.
 */
void tb_detector_free(struct TbDetector *detector);

/**
 * Number of features the detector expects; 0 for a null handle.
 *
 * # Safety
 *
 * `detector` must be null or a live handle.
 */
size_t tb_detector_input_len(const struct TbDetector *detector);

/**
 * Classifies one feature vector. `out_label` is 1 for hallucinated.
 *
 * # Safety
 *
 * `features` must point to `len` readable values; the outputs must be
 * writable.
 */
enum TbStatus tb_detector_predict(const struct TbDetector *detector,
                                  const double *features,
                                  size_t len,
                                  int *out_label,
                                  double *out_score);

/**
 * Generates from `prompt` with `model`, featurizes the trace the way the
 * detector was trained and classifies it.
 *
 * # Safety
 *
 * Handles must be live, `prompt` NUL terminated and outputs writable.
 */
enum TbStatus tb_detect_generation(const struct TbModel *model,
                                   const struct TbDetector *detector,
                                   const char *prompt,
                                   size_t max_new,
                                   int *out_label,
                                   double *out_score);

/**
 * Runs the command-line front end with `argv[0..argc]` and the process
 * environment; returns its exit code.
 *
 * # Safety
 *
 * `argv` must point to `argc` NUL-terminated strings.
 */
int tb_cli_run(int argc, const char *const *argv);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TRUEBRIEF_H */
