#ifndef POISSON_CHAOS_H
#define POISSON_CHAOS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PcStatus {
  PC_STATUS_OK = 0,
  PC_STATUS_NULL_POINTER = 1,
  PC_STATUS_INVALID_ARGUMENT = 2,
  PC_STATUS_NOT_SYMMETRIC = 3,
  PC_STATUS_SPACE_MISMATCH = 4,
  PC_STATUS_NOT_POSITIVE_DEFINITE = 5,
  /**
   * A work or memory budget would be exceeded.
   */
  PC_STATUS_GUARD = 6,
  PC_STATUS_FILE = 7,
  /**
   * The requested quantity is not defined for this input (d2 for singular C).
   */
  PC_STATUS_UNDEFINED = 8,
  PC_STATUS_PANIC = 9,
} PcStatus;

typedef enum PcMode {
  PC_MODE_ANALYTIC = 0,
  PC_MODE_MONTE_CARLO = 1,
} PcMode;

typedef enum PcWhich {
  PC_WHICH_A = 0,
  PC_WHICH_Q = 1,
  PC_WHICH_QH = 2,
} PcWhich;

typedef struct PcCov PcCov;

typedef struct PcExpansion PcExpansion;

typedef struct PcKernel PcKernel;

typedef struct PcReport PcReport;

typedef struct PcSpace PcSpace;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *pc_version(void);

/**
 * Message for the last failed call on this thread; empty after a success.
 * Valid until the next `pc_*` call on the same thread.
 */
const char *pc_last_error(void);

/**
 * # Safety
 * `weights` points to `m` doubles; `out` is writable.
 */
enum PcStatus pc_space_new(const double *weights, size_t m, struct PcSpace **out);

/**
 * # Safety
 * `space` is null or came from `pc_space_new` and was not freed.
 */
void pc_space_free(struct PcSpace *space);

/**
 * Number of cells, or 0 for a null handle.
 *
 * # Safety
 * `space` is null or a live handle.
 */
size_t pc_space_len(const struct PcSpace *space);

/**
 * Row-major values of length m^order.
 *
 * # Safety
 * `space` is live, `values` points to `len` doubles, `out` is writable.
 */
enum PcStatus pc_kernel_new(const struct PcSpace *space,
                            size_t order,
                            const double *values,
                            size_t len,
                            struct PcKernel **out);

/**
 * Reads a kernel TOML file; it gets its own space.
 *
 * # Safety
 * `path` is a NUL-terminated string; `out` is writable.
 */
enum PcStatus pc_kernel_read(const char *file, struct PcKernel **out);

/**
 * # Safety
 * `kernel` is null or a live handle.
 */
void pc_kernel_free(struct PcKernel *kernel);

/**
 * # Safety
 * `kernel` is null or a live handle.
 */
size_t pc_kernel_order(const struct PcKernel *kernel);

/**
 * Number of stored values (m^order), or 0 for a null handle.
 *
 * # Safety
 * `kernel` is null or a live handle.
 */
size_t pc_kernel_len(const struct PcKernel *kernel);

/**
 * Copies the values into `buf`, which must hold exactly `pc_kernel_len` doubles.
 *
 * # Safety
 * `kernel` is live and `buf` points to `len` writable doubles.
 */
enum PcStatus pc_kernel_values(const struct PcKernel *kernel, double *buf, size_t len);

/**
 * L2(μ^p) norm, or NaN for a null handle.
 *
 * # Safety
 * `kernel` is null or a live handle.
 */
double pc_kernel_norm(const struct PcKernel *kernel);

/**
 * # Safety
 * `kernel` is live and `out` is writable.
 */
enum PcStatus pc_symmetrize(const struct PcKernel *kernel, struct PcKernel **out);

/**
 * The star contraction of `f` and `g` identifying `r` variables and integrating out `l`.
 *
 * # Safety
 * `f`, `g` are live and `out` is writable.
 */
enum PcStatus pc_star_contract(const struct PcKernel *f,
                               const struct PcKernel *g,
                               size_t r,
                               size_t l,
                               struct PcKernel **out);

/**
 * # Safety
 * `f`, `g` are live and `out` is writable.
 */
enum PcStatus pc_contraction_norm(const struct PcKernel *f,
                                  const struct PcKernel *g,
                                  size_t r,
                                  size_t l,
                                  double *out);

/**
 * mean + Σ I_k(f_k). The kernels are copied; orders must be distinct and at least 1.
 *
 * # Safety
 * `space` is live, `kernels` points to `n` live handles, `out` is writable.
 */
enum PcStatus pc_expansion_new(const struct PcSpace *space,
                               double mean,
                               const struct PcKernel *const *kernels,
                               size_t n,
                               struct PcExpansion **out);

/**
 * Reads a chaos expansion TOML file (kernel paths relative to it).
 *
 * # Safety
 * `path` is a NUL-terminated string; `out` is writable.
 */
enum PcStatus pc_expansion_read(const char *file, struct PcExpansion **out);

/**
 * # Safety
 * `e` is null or a live handle.
 */
void pc_expansion_free(struct PcExpansion *e);

/**
 * Var F, or NaN for a null handle.
 *
 * # Safety
 * `e` is null or a live handle.
 */
double pc_expansion_variance(const struct PcExpansion *e);

/**
 * Symmetric d x d matrix from row-major entries.
 *
 * # Safety
 * `entries` points to `d * d` doubles; `out` is writable.
 */
enum PcStatus pc_cov_new(size_t d, const double *entries, struct PcCov **out);

/**
 * # Safety
 * `c` is null or a live handle.
 */
void pc_cov_free(struct PcCov *c);

/**
 * Interpolation (d3) bound for the vector of `n` centered expansions against N(0, C).
 * `reps` and `seed` are used only in Monte Carlo mode.
 *
 * # Safety
 * `list` points to `n` live handles, `cov` is live, `out` is writable.
 */
enum PcStatus pc_bound_d3(const struct PcExpansion *const *list,
                          size_t n,
                          const struct PcCov *cov,
                          enum PcMode how,
                          size_t reps,
                          uint64_t seed,
                          struct PcReport **out);

/**
 * Malliavin-Stein (d2) bound; needs C positive definite.
 *
 * # Safety
 * As for `pc_bound_d3`.
 */
enum PcStatus pc_bound_d2(const struct PcExpansion *const *list,
                          size_t n,
                          const struct PcCov *cov,
                          enum PcMode how,
                          size_t reps,
                          uint64_t seed,
                          struct PcReport **out);

/**
 * # Safety
 * `r` is null or a live handle.
 */
void pc_report_free(struct PcReport *r);

/**
 * # Safety
 * `r` is null or a live handle.
 */
double pc_report_d3(const struct PcReport *r);

/**
 * Writes the d2 bound, or returns `Undefined` when C is singular.
 *
 * # Safety
 * `r` is live and `out` is writable.
 */
enum PcStatus pc_report_d2(const struct PcReport *r, double *out);

/**
 * Σ E[(C(i,j) - ⟨DF_i, -DL⁻¹F_j⟩)²].
 *
 * # Safety
 * `r` is null or a live handle.
 */
double pc_report_term_sq_sum(const struct PcReport *r);

/**
 * # Safety
 * `r` is null or a live handle.
 */
double pc_report_cubic_term(const struct PcReport *r);

/**
 * Replications of `n` expansions on one space, row-major into `buf` (n x reps).
 *
 * # Safety
 * `list` points to `n` live handles and `buf` to `len` writable doubles.
 */
enum PcStatus pc_simulate(const struct PcExpansion *const *list,
                          size_t n,
                          size_t reps,
                          uint64_t seed,
                          double *buf,
                          size_t len);

/**
 * Closed-form covariance of the OU functionals i and j at horizon `t`
 * (Rademacher marks; `h` is used by Qh only).
 *
 * # Safety
 * `lambdas` points to `n` doubles; `out` is writable.
 */
enum PcStatus pc_ou_cov_exact(const double *lambdas,
                              size_t n,
                              double t,
                              double h,
                              enum PcWhich w,
                              size_t i,
                              size_t j,
                              double *out);

/**
 * Large-T limit covariance, row-major into `buf` of length n * n.
 *
 * # Safety
 * `lambdas` points to `n` doubles and `buf` to `len` writable doubles.
 */
enum PcStatus pc_ou_cov_limit(const double *lambdas,
                              size_t n,
                              double h,
                              enum PcWhich w,
                              double *buf,
                              size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* POISSON_CHAOS_H */
