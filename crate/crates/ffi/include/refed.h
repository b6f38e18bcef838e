#ifndef REFED_H
#define REFED_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call. Values 3 to 9 match the exit codes of the
 * `refed` command line tool.
 */
typedef enum RefedStatus {
  REFED_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  REFED_STATUS_NULL_POINTER = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  REFED_STATUS_INVALID_UTF8 = 2,
  REFED_STATUS_NOT_FOUND = 3,
  /**
   * Malformed dataset, checkpoint or JSON.
   */
  REFED_STATUS_FORMAT = 4,
  REFED_STATUS_CONFIG = 5,
  /**
   * Shapes, ranges or lengths do not fit.
   */
  REFED_STATUS_INVALID_INPUT = 6,
  /**
   * A computation produced a non-finite value.
   */
  REFED_STATUS_NUMERIC = 7,
  REFED_STATUS_IO = 8,
  REFED_STATUS_CHECK_FAILED = 9,
  /**
   * A caller-supplied buffer has the wrong length.
   */
  REFED_STATUS_BUFFER_SIZE = 10,
  /**
   * An internal invariant failed; the handle arguments are unchanged.
   */
  REFED_STATUS_PANIC = 11,
} RefedStatus;

/**
 * Opaque labeled dataset.
 */
typedef struct RefedDataset RefedDataset;

/**
 * Opaque trained model together with its checkpoint header.
 */
typedef struct RefedModel RefedModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * The message of the last failed call on this thread, or null if the last
 * call succeeded. Valid until the next call into this library on the same
 * thread.
 */
const char *refed_last_error(void);

/**
 * Loads a SITSB dataset file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum RefedStatus refed_dataset_load(const char *path, struct RefedDataset **out);

/**
 * Writes a dataset as a SITSB file.
 *
 * # Safety
 * `dataset` must come from this library; `path` must be NUL-terminated.
 */
enum RefedStatus refed_dataset_save(const struct RefedDataset *dataset, const char *path);

/**
 * Builds a dataset from flat arrays. `features` holds `n * t_len * n_bands`
 * values, sample-major, then time, then band. `domains` holds 0 for
 * source and 1 for target. Classes are named `class_0`, `class_1`, ...
 *
 * # Safety
 * Every array must hold the stated number of elements.
 */
enum RefedStatus refed_dataset_from_arrays(size_t n,
                                           size_t t_len,
                                           size_t n_bands,
                                           size_t n_classes,
                                           const float *features,
                                           const uint16_t *labels,
                                           const uint32_t *polygon_ids,
                                           const uint8_t *domains,
                                           struct RefedDataset **out);

/**
 * Number of samples; 0 for a null handle.
 *
 * # Safety
 * `dataset` must be null or come from this library.
 */
size_t refed_dataset_len(const struct RefedDataset *dataset);

/**
 * Series length, band count and class count.
 *
 * # Safety
 * `dataset` must come from this library; the outputs must be valid pointers.
 */
enum RefedStatus refed_dataset_shape(const struct RefedDataset *dataset,
                                     size_t *t_len,
                                     size_t *n_bands,
                                     size_t *n_classes);

/**
 * Copies the class labels into `out`, which must hold one per sample.
 *
 * # Safety
 * `out` must point to `len` writable elements.
 */
enum RefedStatus refed_dataset_labels(const struct RefedDataset *dataset,
                                      uint16_t *out,
                                      size_t len);

/**
 * Releases a dataset. Null is ignored.
 *
 * # Safety
 * `dataset` must be null or come from this library, and not be used again.
 */
void refed_dataset_free(struct RefedDataset *dataset);

/**
 * Generates a synthetic source/target pair. `config_json` is a generator
 * configuration, or null for the defaults.
 *
 * # Safety
 * `config_json` must be null or NUL-terminated; the outputs must be valid.
 */
enum RefedStatus refed_synth_generate(const char *config_json,
                                      struct RefedDataset **source,
                                      struct RefedDataset **target);

/**
 * Loads a checkpoint.
 *
 * # Safety
 * `path` must be NUL-terminated and `out` a valid pointer.
 */
enum RefedStatus refed_model_load(const char *path, struct RefedModel **out);

/**
 * Writes a checkpoint.
 *
 * # Safety
 * `model` must come from this library; `path` must be NUL-terminated.
 */
enum RefedStatus refed_model_save(const struct RefedModel *model, const char *path);

/**
 * Trains one method. `mode` is one of `refed`, `only_source`,
 * `only_target`, `source_target`, `finetune`; `config_json` is a run
 * configuration or null for the defaults. The target is split by polygon
 * with ratios 0.5/0.2/0.3 and `split_seed`; the best epoch on the target
 * validation share is returned. Either dataset may be null if the mode
 * does not use it.
 *
 * # Safety
 * Handles must be null or come from this library; strings NUL-terminated.
 */
enum RefedStatus refed_train(const char *mode,
                             const char *config_json,
                             const struct RefedDataset *source,
                             const struct RefedDataset *target,
                             uint64_t split_seed,
                             struct RefedModel **out);

/**
 * Number of classes the model predicts; 0 for a null handle.
 *
 * # Safety
 * `model` must be null or come from this library.
 */
size_t refed_model_n_classes(const struct RefedModel *model);

/**
 * 1 for a two-branch model, 0 for a single-branch baseline or null.
 *
 * # Safety
 * `model` must be null or come from this library.
 */
int32_t refed_model_is_two_branch(const struct RefedModel *model);

/**
 * Class probabilities, `len(dataset) * n_classes` values, row-major. The
 * raw dataset is scaled the way the model was trained.
 *
 * # Safety
 * `out` must point to `len` writable floats.
 */
enum RefedStatus refed_model_predict_proba(const struct RefedModel *model,
                                           const struct RefedDataset *dataset,
                                           float *out,
                                           size_t len);

/**
 * Predicted class per sample (the most probable, lowest index on ties).
 *
 * # Safety
 * `out` must point to `len` writable elements.
 */
enum RefedStatus refed_model_predict(const struct RefedModel *model,
                                     const struct RefedDataset *dataset,
                                     uint32_t *out,
                                     size_t len);

/**
 * Weighted F1 and overall accuracy, in percent, of `predicted` against
 * `reference` (class indices below `n_classes`).
 *
 * # Safety
 * Both arrays must hold `n` elements; the outputs must be valid pointers.
 */
enum RefedStatus refed_metrics(const uint32_t *reference,
                               const uint32_t *predicted,
                               size_t n,
                               size_t n_classes,
                               double *weighted_f1,
                               double *accuracy);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must be null or come from this library, and not be used again.
 */
void refed_model_free(struct RefedModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* REFED_H */
