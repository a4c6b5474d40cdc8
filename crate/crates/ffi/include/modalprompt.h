#ifndef MODALPROMPT_H
#define MODALPROMPT_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MpStatus {
  MP_STATUS_OK = 0,
  MP_STATUS_NULL_POINTER = 1,
  MP_STATUS_INVALID_ARGUMENT = 2,
  MP_STATUS_PARSE = 3,
  MP_STATUS_IO = 4,
  MP_STATUS_SHAPE = 5,
  MP_STATUS_UNDEFINED_METRIC = 6,
  /**
   * A fixture comparison ran and found mismatches.
   */
  MP_STATUS_CHECK_FAILED = 7,
  MP_STATUS_BUFFER_TOO_SMALL = 8,
  MP_STATUS_INTERNAL = 99,
} MpStatus;

/**
 * Accuracy matrix being filled row by row.
 */
typedef struct MpMatrix MpMatrix;

/**
 * Metrics computed from a complete matrix.
 */
typedef struct MpReport MpReport;

/**
 * A prompt pool loaded from disk.
 */
typedef struct MpStore MpStore;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `cap`). Returns the full message length in bytes.
 *
 * # Safety
 * `buf` must be null or point to `cap` writable bytes.
 */
size_t mp_last_error(char *buf, size_t cap);

/**
 * Creates an empty matrix over `n_tasks` tasks named `t1..tN`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum MpStatus mp_matrix_new(size_t n_tasks, struct MpMatrix **out);

/**
 * Parses a CSV matrix (header of task names, lower-triangular rows).
 *
 * # Safety
 * `csv` must be a NUL-terminated string and `out` a valid pointer.
 */
enum MpStatus mp_matrix_from_csv(const char *csv, struct MpMatrix **out);

/**
 * Loads one of the shipped reference matrices by name.
 *
 * # Safety
 * `name` must be a NUL-terminated string and `out` a valid pointer.
 */
enum MpStatus mp_matrix_fixture(const char *name, struct MpMatrix **out);

/**
 * Appends the next stage row; its length must equal the stage number.
 *
 * # Safety
 * `m` must come from this library; `values` must hold `len` doubles.
 */
enum MpStatus mp_matrix_push_row(struct MpMatrix *m, const double *values, size_t len);

/**
 * # Safety
 * `m` must be null or a handle from this library not yet freed.
 */
void mp_matrix_free(struct MpMatrix *m);

/**
 * Computes Last, Avg, B and M from a complete matrix.
 *
 * # Safety
 * `m` must be a live matrix handle and `out` a valid pointer.
 */
enum MpStatus mp_report_new(const struct MpMatrix *m, struct MpReport **out);

/**
 * Reads one value by key: `last.i`, `avg.i` (task i, 1-based), `bwt.t`,
 * `ma.t` (stage t ≥ 2), or `<metric>.mean`.
 *
 * # Safety
 * `r` must be a live report handle, `key` NUL-terminated, `out` valid.
 */
enum MpStatus mp_report_value(const struct MpReport *r, const char *key, double *out);

/**
 * Compares a report with a shipped fixture's reference values. Writes the
 * number of mismatching values to `n_failed` and returns `CheckFailed` when
 * it is non-zero.
 *
 * # Safety
 * `r` must be a live report handle, `name` NUL-terminated, `n_failed` valid.
 */
enum MpStatus mp_report_check_fixture(const struct MpReport *r, const char *name, size_t *n_failed);

/**
 * # Safety
 * `r` must be null or a handle from this library not yet freed.
 */
void mp_report_free(struct MpReport *r);

/**
 * Top-`k` task selection from per-task image and text similarities.
 * Task `i` of the input arrays has id `i + 1`. Chosen ids are written to
 * `out_ids` in ascending order; `out_len` receives how many.
 *
 * # Safety
 * `image_sim` and `text_sim` must hold `n_tasks` doubles; `out_ids` must
 * hold `cap` slots; `out_len` must be valid.
 */
enum MpStatus mp_select(const double *image_sim,
                        const double *text_sim,
                        size_t n_tasks,
                        size_t k,
                        double image_weight,
                        double text_weight,
                        uint32_t *out_ids,
                        size_t cap,
                        size_t *out_len);

/**
 * Prefix length in tokens for `k` routed sets of `prompt_len` rows out of `n_tasks`.
 */
size_t mp_prefix_tokens(size_t prompt_len, size_t k, size_t n_tasks);

/**
 * Loads a prompt pool written by the `train` command.
 *
 * # Safety
 * `path` must be NUL-terminated and `out` valid.
 */
enum MpStatus mp_store_load(const char *path, struct MpStore **out);

/**
 * Number of prompt sets and rows per set.
 *
 * # Safety
 * `s` must be a live store handle; outputs must be valid.
 */
enum MpStatus mp_store_shape(const struct MpStore *s, size_t *n_tasks, size_t *prompt_len);

/**
 * # Safety
 * `s` must be null or a handle from this library not yet freed.
 */
void mp_store_free(struct MpStore *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MODALPROMPT_H */
