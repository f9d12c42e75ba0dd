#ifndef PMTREC_H
#define PMTREC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every exported function.
typedef enum PmtStatus {
  PMT_STATUS_OK = 0,
  PMT_STATUS_NULL_POINTER = 1,
  PMT_STATUS_INVALID_ARGUMENT = 2,
  PMT_STATUS_IO = 3,
  PMT_STATUS_FORMAT = 4,
  PMT_STATUS_CONFIG = 5,
  PMT_STATUS_EMPTY_DATASET = 6,
  PMT_STATUS_NUMERICAL = 7,
  PMT_STATUS_PANIC = 99,
} PmtStatus;

// Opaque prepared dataset.
typedef struct PmtDataset PmtDataset;

// Opaque embedding table.
typedef struct PmtTable PmtTable;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty after a success.
// The pointer stays valid until the next call on the same thread.
const char *pmt_last_error(void);

// Library version as a static NUL-terminated string.
const char *pmt_version(void);

// Creates a Xavier-initialized table of `(n_users + n_items) x d`.
//
// # Safety
// `out` must be a valid pointer to write a handle to.
enum PmtStatus pmt_table_init(size_t n_users,
                              size_t n_items,
                              size_t d,
                              uint64_t seed,
                              struct PmtTable **out);

// Loads a checkpoint written by the library or by [`pmt_table_save`].
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum PmtStatus pmt_table_load(const char *path, struct PmtTable **out);

// # Safety
// `table` must be a live handle and `path` a NUL-terminated string.
enum PmtStatus pmt_table_save(const struct PmtTable *table, const char *path);

// Writes the table's user count, item count and dimension. Any output may be null.
//
// # Safety
// `table` must be a live handle; non-null outputs must be writable.
enum PmtStatus pmt_table_dims(const struct PmtTable *table,
                              size_t *n_users,
                              size_t *n_items,
                              size_t *d);

// Copies row `row` (users first, then items) into `out`, which holds `len == d` values.
//
// # Safety
// `table` must be a live handle and `out` valid for `len` writes.
enum PmtStatus pmt_table_row(const struct PmtTable *table, size_t row, double *out, size_t len);

// Releases a table handle. Null is ignored.
//
// # Safety
// `table` must come from this library and not be used afterwards.
void pmt_table_free(struct PmtTable *table);

// Loads a dataset bundle written by `pmtrec prepare`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum PmtStatus pmt_dataset_load(const char *path, struct PmtDataset **out);

// # Safety
// `ds` must be a live handle; non-null outputs must be writable.
enum PmtStatus pmt_dataset_dims(const struct PmtDataset *ds, size_t *n_users, size_t *n_items);

// Releases a dataset handle. Null is ignored.
//
// # Safety
// `ds` must come from this library and not be used afterwards.
void pmt_dataset_free(struct PmtDataset *ds);

// Full-ranking metrics at cutoff `k` on `split` (0 = val, 1 = test).
//
// # Safety
// Handles must be live; outputs must be writable.
enum PmtStatus pmt_evaluate(const struct PmtTable *table,
                            const struct PmtDataset *ds,
                            int32_t split,
                            size_t k,
                            double *recall,
                            double *hit_ratio,
                            double *ndcg,
                            size_t *n_users);

// Per-row task weights from a row-major `n_rows x n_tasks` norm matrix (task 0 is
// the main task): focusing with `alpha^epoch`, then a softmax at temperature `tau`.
//
// # Safety
// `norms` must be readable and `weights` writable for `n_rows * n_tasks` values.
enum PmtStatus pmt_balance_weights(const double *norms,
                                   size_t n_rows,
                                   size_t n_tasks,
                                   double alpha,
                                   double tau,
                                   uint32_t epoch,
                                   double *weights);

// Pools dense per-task gradients laid out `[task][row][dim]` into `out`
// (`[row][dim]`). `kind` is one of `pmtrec`, `ew`, `rlw`, `pcgrad`, `graddrop`;
// task 0 is the main task. All-zero task rows count as absent.
//
// # Safety
// `kind` must be a NUL-terminated string, `grads` readable for
// `n_tasks * n_rows * d` values and `out` writable for `n_rows * d` values.
enum PmtStatus pmt_pool_dense(const char *kind,
                              const double *grads,
                              size_t n_tasks,
                              size_t n_rows,
                              size_t d,
                              double alpha,
                              double tau,
                              uint32_t epoch,
                              uint64_t seed,
                              double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PMTREC_H */
