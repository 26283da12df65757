#ifndef METACL_H
#define METACL_H

/* Generated by cbindgen from crates/ffi/src; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Outcome of a call. Zero is success; every other value names the kind of failure.
 */
typedef enum MetaclStatus {
  METACL_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  METACL_STATUS_NULL_POINTER = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  METACL_STATUS_INVALID_UTF8 = 2,
  /**
   * Bad configuration, method name or option value.
   */
  METACL_STATUS_CONFIG = 3,
  /**
   * The call was made in the wrong order or with an out-of-range index.
   */
  METACL_STATUS_CONTRACT = 4,
  /**
   * Dataset contents could not be used.
   */
  METACL_STATUS_DATA = 5,
  /**
   * A binary container or checkpoint was malformed.
   */
  METACL_STATUS_FORMAT = 6,
  /**
   * Reading or writing a file failed.
   */
  METACL_STATUS_IO = 7,
  /**
   * Internal tensor shapes disagreed.
   */
  METACL_STATUS_SHAPE = 8,
  /**
   * A computation produced a non-finite value.
   */
  METACL_STATUS_NUMERIC = 9,
  /**
   * The library panicked; the handle involved should be freed and not reused.
   */
  METACL_STATUS_PANIC = 10,
} MetaclStatus;

/**
 * A running or finished experiment together with its task stream.
 */
typedef struct MetaclExperiment MetaclExperiment;

/**
 * An accuracy matrix built row by row from the caller's numbers.
 */
typedef struct MetaclMatrix MetaclMatrix;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static nul-terminated string.
 */
const char *metacl_version(void);

/**
 * Message of the most recent failure on this thread, or null if none.
 * The pointer stays valid until the next failing call on this thread.
 */
const char *metacl_last_error(void);

/**
 * Create an experiment on the built-in `blobs8` stream with `labelled`
 * labelled items per task. `method` is `mcssl`, `single-ssl` or `ewc-ssl`.
 */
enum MetaclStatus metacl_experiment_new_blobs8(uint64_t seed,
                                               size_t labelled,
                                               const char *method,
                                               struct MetaclExperiment **out);

/**
 * Create an experiment from a JSON configuration document.
 */
enum MetaclStatus metacl_experiment_new_from_json(const char *config_json,
                                                  const char *method,
                                                  struct MetaclExperiment **out);

/**
 * Reopen an experiment saved with [`metacl_experiment_save`].
 */
enum MetaclStatus metacl_experiment_load(const char *dir, struct MetaclExperiment **out);

/**
 * Write the experiment's state into `dir`, creating it if needed.
 */
enum MetaclStatus metacl_experiment_save(const struct MetaclExperiment *exp, const char *dir);

/**
 * Learn and evaluate the next task. Sets `*finished` when no task remains
 * afterwards; calling again once finished is a no-op.
 */
enum MetaclStatus metacl_experiment_step(struct MetaclExperiment *exp, bool *finished);

/**
 * Learn and evaluate every remaining task.
 */
enum MetaclStatus metacl_experiment_run(struct MetaclExperiment *exp);

/**
 * Number of tasks in the stream and number learned so far.
 */
enum MetaclStatus metacl_experiment_progress(const struct MetaclExperiment *exp,
                                             size_t *num_tasks,
                                             size_t *learned);

/**
 * Accuracy on task `j` after learning task `k` (both from zero, `j <= k`).
 */
enum MetaclStatus metacl_experiment_accuracy(const struct MetaclExperiment *exp,
                                             size_t k,
                                             size_t j,
                                             double *out);

/**
 * Average accuracy and average forgetting over the rows recorded so far.
 */
enum MetaclStatus metacl_experiment_summary(const struct MetaclExperiment *exp,
                                            double *avg_accuracy,
                                            double *avg_forgetting);

/**
 * Release an experiment. Null is ignored.
 */
void metacl_experiment_free(struct MetaclExperiment *exp);

/**
 * An empty accuracy matrix. Never null.
 */
struct MetaclMatrix *metacl_matrix_new(void);

/**
 * Append the next row; row `k` (from zero) must hold `k + 1` values in `[0, 1]`.
 */
enum MetaclStatus metacl_matrix_push_row(struct MetaclMatrix *m, const double *values, size_t len);

/**
 * Average accuracy and average forgetting of the matrix.
 */
enum MetaclStatus metacl_matrix_summary(const struct MetaclMatrix *m,
                                        double *avg_accuracy,
                                        double *avg_forgetting);

/**
 * Release a matrix. Null is ignored.
 */
void metacl_matrix_free(struct MetaclMatrix *m);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* METACL_H */
