#ifndef RECTFLOW_H
#define RECTFLOW_H

/* Generated by cbindgen; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes mirroring the CLI exit-code convention.
 */
typedef enum RfStatus {
  /**
   * Success.
   */
  RF_OK = 0,
  /**
   * Null pointer or invalid UTF-8 argument.
   */
  RF_BAD_ARGUMENT = 1,
  /**
   * Validation, file-format or I/O failure.
   */
  RF_INVALID_INPUT = 2,
  /**
   * Numerical failure (shape mismatch, divergence, non-finite values).
   */
  RF_NUMERIC = 3,
} RfStatus;

/**
 * Opaque frame buffer: row-major `rows x cols` doubles.
 */
typedef struct RfBuffer RfBuffer;

/**
 * Opaque corpus handle.
 */
typedef struct RfCorpus RfCorpus;

/**
 * Opaque trained-model handle.
 */
typedef struct RfModel RfModel;

/**
 * Opaque phone-template handle.
 */
typedef struct RfTemplates RfTemplates;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the most recent failure on this thread; valid until the next
 * failing call. Never null.
 */
const char *rf_last_error(void);

/**
 * Static version string of the underlying library.
 */
const char *rf_version(void);

/**
 * Load a checkpoint into a new model handle.
 *
 * # Safety
 * `path` must be NUL-terminated; `out` must be a valid pointer.
 */
enum RfStatus rf_model_load(const char *path, struct RfModel **out);

/**
 * Rectification round recorded in the checkpoint (0 = base model).
 *
 * # Safety
 * `model` must come from `rf_model_load` and not be freed.
 */
uint32_t rf_model_round(const struct RfModel *model);

/**
 * # Safety
 * `model` must come from `rf_model_load`; passing null is a no-op.
 */
void rf_model_free(struct RfModel *model);

/**
 * Read a corpus file into a new handle.
 *
 * # Safety
 * `path` must be NUL-terminated; `out` must be a valid pointer.
 */
enum RfStatus rf_corpus_read(const char *path, struct RfCorpus **out);

/**
 * Number of utterances, or SIZE_MAX for a null handle.
 *
 * # Safety
 * `corpus` must come from `rf_corpus_read` and not be freed.
 */
uintptr_t rf_corpus_len(const struct RfCorpus *corpus);

/**
 * # Safety
 * `corpus` must come from `rf_corpus_read`; passing null is a no-op.
 */
void rf_corpus_free(struct RfCorpus *corpus);

/**
 * Read a template file into a new handle.
 *
 * # Safety
 * `path` must be NUL-terminated; `out` must be a valid pointer.
 */
enum RfStatus rf_templates_read(const char *path, struct RfTemplates **out);

/**
 * Phone-vocabulary size, or SIZE_MAX for a null handle.
 *
 * # Safety
 * `templates` must come from `rf_templates_read` and not be freed.
 */
uintptr_t rf_templates_vocab_size(const struct RfTemplates *templates);

/**
 * # Safety
 * `templates` must come from `rf_templates_read`; passing null is a no-op.
 */
void rf_templates_free(struct RfTemplates *templates);

/**
 * Generate frames for corpus utterance `utt_index` with ground-truth
 * durations, integrating from seeded Gaussian noise.
 *
 * # Safety
 * Handles must be live; `solver` NUL-terminated ("euler", "midpoint",
 * "rk4"); `out` must be a valid pointer.
 */
enum RfStatus rf_sample(const struct RfModel *model,
                        const struct RfCorpus *corpus,
                        uintptr_t utt_index,
                        const char *solver,
                        uintptr_t nfe,
                        uint64_t seed,
                        struct RfBuffer **out);

/**
 * # Safety
 * `buf` must come from `rf_sample` and not be freed.
 */
uintptr_t rf_buffer_rows(const struct RfBuffer *buf);

/**
 * # Safety
 * `buf` must come from `rf_sample` and not be freed.
 */
uintptr_t rf_buffer_cols(const struct RfBuffer *buf);

/**
 * Row-major data pointer, valid until the buffer is freed.
 *
 * # Safety
 * `buf` must come from `rf_sample` and not be freed.
 */
const double *rf_buffer_data(const struct RfBuffer *buf);

/**
 * # Safety
 * `buf` must come from `rf_sample`; passing null is a no-op.
 */
void rf_buffer_free(struct RfBuffer *buf);

/**
 * Energy distance between two row-major sample blocks of width `d`.
 *
 * # Safety
 * `a` must point to `n*d` doubles, `b` to `m*d`; `out` must be valid.
 */
enum RfStatus rf_energy_distance(const double *a,
                                 uintptr_t n,
                                 const double *b,
                                 uintptr_t m,
                                 uintptr_t d,
                                 double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RECTFLOW_H */
