#ifndef CLFDR_H
#define CLFDR_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every call.
typedef enum ClfdrStatus {
  CLFDR_STATUS_OK = 0,
  // A required pointer was null.
  CLFDR_STATUS_NULL_POINTER = 1,
  // Malformed data or an out-of-range parameter.
  CLFDR_STATUS_INVALID_INPUT = 2,
  // A file could not be read.
  CLFDR_STATUS_IO = 3,
  // The computation finished but did not converge.
  CLFDR_STATUS_NOT_CONVERGED = 4,
  // An output buffer is too small.
  CLFDR_STATUS_BUFFER_TOO_SMALL = 5,
  // Internal failure. Please report it.
  CLFDR_STATUS_PANIC = 6,
} ClfdrStatus;

// Count table with its covariate vector.
typedef struct ClfdrDataset ClfdrDataset;

// Fitted multinomial mixture.
typedef struct ClfdrFit ClfdrFit;

// Rejection interval `[a, b]` of the two-group model at one size.
typedef struct ClfdrBoundary {
  uint64_t n;
  // Standardized mean of the alternative at this size.
  double mu;
  double a;
  // Infinite when the alternative variance equals the null variance.
  double b;
  // 0 when no z reaches the threshold.
  uint8_t exists;
} ClfdrBoundary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or null after a
// successful one. Valid until the next call on the same thread.
const char *clfdr_last_error(void);

// Library version as a static NUL-terminated string.
const char *clfdr_version(void);

// Reads a count CSV (covariate header row, optional label column).
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum ClfdrStatus clfdr_dataset_load_path(const char *path, struct ClfdrDataset **out);

// Parses a count CSV held in memory.
//
// # Safety
// `data` must be valid for `len` bytes and `out` a valid pointer.
enum ClfdrStatus clfdr_dataset_load_buffer(const uint8_t *data,
                                           size_t len,
                                           struct ClfdrDataset **out);

// Builds a dataset from a row-major `n_tests x n_groups` count matrix.
//
// # Safety
// `x` must hold `n_groups` values, `counts` `n_tests * n_groups` values.
enum ClfdrStatus clfdr_dataset_from_counts(const double *x,
                                           size_t n_groups,
                                           const uint32_t *counts,
                                           size_t n_tests,
                                           struct ClfdrDataset **out);

// Number of tests (rows), or 0 for a null handle.
//
// # Safety
// `ds` must be null or a live dataset handle.
size_t clfdr_dataset_n_tests(const struct ClfdrDataset *ds);

// Number of groups (columns), or 0 for a null handle.
//
// # Safety
// `ds` must be null or a live dataset handle.
size_t clfdr_dataset_n_groups(const struct ClfdrDataset *ds);

// # Safety
// `ds` must be null or a handle not freed before.
void clfdr_dataset_free(struct ClfdrDataset *ds);

// Fits a mixture with `k` non-null components by EM. A fit that stops at
// `max_iter` is still returned, with status `NotConverged`.
//
// # Safety
// `ds` must be a live dataset handle and `out` a valid pointer.
enum ClfdrStatus clfdr_fit_em(const struct ClfdrDataset *ds,
                              size_t k,
                              double tol,
                              size_t max_iter,
                              size_t restarts,
                              uint64_t seed,
                              struct ClfdrFit **out);

// Number of non-null components, or 0 for a null handle.
//
// # Safety
// `fit` must be null or a live fit handle.
size_t clfdr_fit_k(const struct ClfdrFit *fit);

// Copies effects and proportions (null first, `k + 1` each) and the final
// log-likelihood. Any output may be null.
//
// # Safety
// `gammas` and `pis` must hold `len` values; `len` must be at least `k + 1`.
enum ClfdrStatus clfdr_fit_params(const struct ClfdrFit *fit,
                                  double *gammas,
                                  double *pis,
                                  size_t len,
                                  double *loglik);

// # Safety
// `fit` must be null or a handle not freed before.
void clfdr_fit_free(struct ClfdrFit *fit);

// clFDR of every test of `ds` under `fit`. Skipped tests get NaN.
//
// # Safety
// `out` must hold `len >= n_tests` values.
enum ClfdrStatus clfdr_stats(const struct ClfdrFit *fit,
                             const struct ClfdrDataset *ds,
                             double *out,
                             size_t len);

// Benjamini-Hochberg at level `alpha`. `reject[i]` is set to 1 or 0;
// `k` and `threshold` (the largest rejected p-value) may be null.
//
// # Safety
// `p` and `reject` must hold `len` values.
enum ClfdrStatus clfdr_bh(const double *p,
                          size_t len,
                          double alpha,
                          uint8_t *reject,
                          size_t *k,
                          double *threshold);

// Step-up on (conditional) local FDR values: rejects the largest set
// whose mean statistic stays at or below `alpha`. NaN entries are skipped.
//
// # Safety
// `stats` and `reject` must hold `len` values.
enum ClfdrStatus clfdr_stepup(const double *stats,
                              size_t len,
                              double alpha,
                              uint8_t *reject,
                              size_t *k,
                              double *lambda);

// Rejection interval of the two-group model `(pi0, gamma1)` at size `n`
// and clFDR threshold `lambda`.
//
// # Safety
// `x` must hold `n_groups` values; `out` must be valid.
enum ClfdrStatus clfdr_rejection_boundary(double pi0,
                                          double gamma1,
                                          double lambda,
                                          uint64_t n,
                                          const double *x,
                                          size_t n_groups,
                                          struct ClfdrBoundary *out);

// Smallest `z` in `[0, 50]` where the marginal lFDR of the two-group model
// reaches `lambda`, with sizes drawn from `(sizes[i], probs[i])`. Writes
// NaN when there is none.
//
// # Safety
// `x` must hold `n_groups` values, `sizes` and `probs` `n_sizes` values.
enum ClfdrStatus clfdr_lfdr_threshold(double pi0,
                                      double gamma1,
                                      double lambda,
                                      const double *x,
                                      size_t n_groups,
                                      const uint64_t *sizes,
                                      const double *probs,
                                      size_t n_sizes,
                                      double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CLFDR_H */
