#ifndef MTSEQ_H
#define MTSEQ_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum MtseqStatus {
  MTSEQ_STATUS_OK = 0,
  MTSEQ_STATUS_NULL_POINTER = 1,
  MTSEQ_STATUS_INVALID_UTF8 = 2,
  MTSEQ_STATUS_IO = 3,
  MTSEQ_STATUS_CORRUPT = 4,
  MTSEQ_STATUS_INVALID_ARGUMENT = 5,
  MTSEQ_STATUS_UNKNOWN_TASK = 6,
  MTSEQ_STATUS_MISMATCH = 7,
  MTSEQ_STATUS_RUNTIME = 8,
  MTSEQ_STATUS_PANIC = 9,
} MtseqStatus;

/**
 * Loaded BPE merges.
 */
typedef struct MtseqBpe MtseqBpe;

/**
 * A loaded model.
 */
typedef struct MtseqModel MtseqModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static string.
 */
const char *mtseq_version(void);

/**
 * Message for the last failure on this thread, or null. Valid until the
 * next mtseq call on the same thread.
 */
const char *mtseq_last_error_message(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be freed twice.
 */
void mtseq_string_free(char *s);

/**
 * Loads a model container.
 *
 * # Safety
 * `path` is a nul-terminated string; `out` is writable.
 */
enum MtseqStatus mtseq_model_load(const char *path, struct MtseqModel **out);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` comes from [`mtseq_model_load`] and is not used afterwards.
 */
void mtseq_model_free(struct MtseqModel *model);

/**
 * Number of tasks in the model.
 *
 * # Safety
 * `model` is a live handle; `out` is writable.
 */
enum MtseqStatus mtseq_model_task_count(const struct MtseqModel *model, size_t *out);

/**
 * Name of task `index`; free with [`mtseq_string_free`].
 *
 * # Safety
 * `model` is a live handle; `out` is writable.
 */
enum MtseqStatus mtseq_model_task_name(const struct MtseqModel *model, size_t index, char **out);

/**
 * Loads BPE merges written by `mtseq bpe-learn` or training.
 *
 * # Safety
 * `path` is a nul-terminated string; `out` is writable.
 */
enum MtseqStatus mtseq_bpe_load(const char *path, struct MtseqBpe **out);

/**
 * Releases BPE merges. Null is ignored.
 *
 * # Safety
 * `bpe` comes from [`mtseq_bpe_load`] and is not used afterwards.
 */
void mtseq_bpe_free(struct MtseqBpe *bpe);

/**
 * Translates one whitespace-tokenized sentence with beam search. `bpe` and
 * `task` may be null; a null task picks the model's only translation task.
 * `beam` 0 uses the default width.
 *
 * # Safety
 * Pointers are live handles, nul-terminated strings or null where allowed;
 * `out` is writable.
 */
enum MtseqStatus mtseq_translate(const struct MtseqModel *model,
                                 const struct MtseqBpe *bpe,
                                 const char *task,
                                 const char *sentence,
                                 uint32_t beam,
                                 char **out);

/**
 * Labels every word of one sentence; the output has one label per word.
 * `bpe` and `task` may be null as in [`mtseq_translate`].
 *
 * # Safety
 * As [`mtseq_translate`].
 */
enum MtseqStatus mtseq_tag(const struct MtseqModel *model,
                           const struct MtseqBpe *bpe,
                           const char *task,
                           const char *sentence,
                           char **out);

/**
 * Corpus BLEU of two line-aligned files, in `[0, 100]`.
 *
 * # Safety
 * Paths are nul-terminated strings; `out` is writable.
 */
enum MtseqStatus mtseq_eval_bleu_files(const char *hyp, const char *reference, double *out);

/**
 * Label error rate of two line-aligned files, in `[0, 100]`. With `coarse`
 * nonzero, labels are cut at `delimiter` (null means ".") first.
 *
 * # Safety
 * Paths are nul-terminated strings; `delimiter` may be null; `out` is writable.
 */
enum MtseqStatus mtseq_eval_tag_error_files(const char *hyp,
                                            const char *reference,
                                            int32_t coarse,
                                            const char *delimiter,
                                            double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MTSEQ_H */
