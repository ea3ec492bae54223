#ifndef TSNE_LIMITS_FFI_H
#define TSNE_LIMITS_FFI_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum TslStatus {
  TSL_STATUS_OK = 0,
  TSL_STATUS_NULL_POINTER = 1,
  TSL_STATUS_INVALID_UTF8 = 2,
  TSL_STATUS_PARAMETER = 3,
  TSL_STATUS_DIVERGENCE = 4,
  TSL_STATUS_ISOLATED_VERTEX = 5,
  TSL_STATUS_RESOLUTION = 6,
  TSL_STATUS_DEGENERATE_SUPPORT = 7,
  TSL_STATUS_INFINITE_ENERGY = 8,
  TSL_STATUS_NONCONVERGENCE = 9,
  TSL_STATUS_INTERNAL_CONSISTENCY = 10,
  TSL_STATUS_DIMENSION = 11,
  TSL_STATUS_INPUT = 12,
  TSL_STATUS_PRECONDITION = 13,
  TSL_STATUS_IO = 14,
  TSL_STATUS_BUFFER_TOO_SMALL = 15,
  TSL_STATUS_PANIC = 16,
} TslStatus;

/**
 * Opaque data density.
 */
typedef struct TslDensity TslDensity;

/**
 * Opaque gradient-descent output.
 */
typedef struct TslEmbedding TslEmbedding;

/**
 * Opaque affinity graph `P`.
 */
typedef struct TslGraph TslGraph;

/**
 * Opaque 1D/2D/3D kernel.
 */
typedef struct TslKernel TslKernel;

/**
 * Opaque 1D continuum problem.
 */
typedef struct TslProblem1D TslProblem1D;

/**
 * Opaque solver output.
 */
typedef struct TslSolution TslSolution;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the next call.
 */
const char *tsl_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *tsl_version(void);

/**
 * Parse `uniform`, `uniform:a,b` or `mixture:p,var,c`.
 *
 * # Safety
 * `spec` must be a NUL-terminated string; `out` must be writable.
 */
enum TslStatus tsl_density_parse(const char *spec, struct TslDensity **out);

/**
 * # Safety
 * `d` must be null or come from `tsl_density_parse`.
 */
void tsl_density_free(struct TslDensity *d);

/**
 * Draw `n` i.i.d. samples into `out` (capacity `cap ≥ n·dim`).
 *
 * # Safety
 * `d` must be a live handle and `out` must hold `cap` doubles.
 */
enum TslStatus tsl_density_sample(const struct TslDensity *d,
                                  size_t n,
                                  uint64_t seed,
                                  double *out,
                                  size_t cap);

/**
 * # Safety
 * `d` must be a live handle, `x` must hold `dim` doubles, `out` must be writable.
 */
enum TslStatus tsl_density_pdf(const struct TslDensity *d, const double *x, double *out);

/**
 * `family` is `gaussian`, `epanechnikov` or `truncated-gaussian`.
 *
 * # Safety
 * `family` must be a NUL-terminated string; `out` must be writable.
 */
enum TslStatus tsl_kernel_new(const char *family, size_t dim, struct TslKernel **out);

/**
 * # Safety
 * `k` must be null or come from `tsl_kernel_new`.
 */
void tsl_kernel_free(struct TslKernel *k);

/**
 * `Θ(v) = v² Φ₁'(v)` of a 1D kernel.
 *
 * # Safety
 * `k` must be a live handle; `out` must be writable.
 */
enum TslStatus tsl_kernel_theta(const struct TslKernel *k, double v, double *out);

/**
 * `Φ₁(v)` of a 1D kernel.
 *
 * # Safety
 * `k` must be a live handle; `out` must be writable.
 */
enum TslStatus tsl_kernel_phi1(const struct TslKernel *k, double v, double *out);

/**
 * Affinities of `n` points of dimension `dim` stored row-major in `points`.
 *
 * `sigma` is `knn`, `power` or a constant such as `1`.
 *
 * # Safety
 * Handles must be live, `points` must hold `n·dim` doubles, strings NUL-terminated, `out` writable.
 */
enum TslStatus tsl_graph_build(const double *points,
                               size_t n,
                               size_t dim,
                               const struct TslKernel *kernel,
                               const char *sigma,
                               const struct TslDensity *density,
                               double h,
                               bool include_self_in_degree,
                               struct TslGraph **out);

/**
 * # Safety
 * `g` must be null or come from `tsl_graph_build`.
 */
void tsl_graph_free(struct TslGraph *g);

/**
 * Number of vertices.
 *
 * # Safety
 * `g` must be a live handle or null (returns 0).
 */
size_t tsl_graph_len(const struct TslGraph *g);

/**
 * Symmetric `p_ij`.
 *
 * # Safety
 * `g` must be a live handle; `out` must be writable.
 */
enum TslStatus tsl_graph_p(const struct TslGraph *g, size_t i, size_t j, double *out);

/**
 * KL divergence of `P` against the embedding `y` (`n·m` doubles) with t-SNE or SNE `ψ`.
 *
 * # Safety
 * Handles must be live, `y` must hold `n·m` doubles, `mode` NUL-terminated, `out` writable.
 */
enum TslStatus tsl_kl(const struct TslGraph *g,
                      const double *y,
                      size_t m,
                      const char *mode,
                      double *out);

/**
 * Plain gradient descent `Y ← Y − dt ∇KL` from `y0`.
 *
 * # Safety
 * Handles must be live, `y0` must hold `n·m` doubles, `mode` NUL-terminated, `out` writable.
 */
enum TslStatus tsl_embed(const struct TslGraph *g,
                         const double *y0,
                         size_t m,
                         size_t steps,
                         double dt,
                         const char *mode,
                         uint64_t seed,
                         struct TslEmbedding **out);

/**
 * # Safety
 * `e` must be null or come from `tsl_embed`.
 */
void tsl_embedding_free(struct TslEmbedding *e);

/**
 * Copy the final embedding into `out` (capacity `cap ≥ n·m`).
 *
 * # Safety
 * `e` must be a live handle and `out` must hold `cap` doubles.
 */
enum TslStatus tsl_embedding_copy_y(const struct TslEmbedding *e, double *out, size_t cap);

/**
 * Final KL, the number of steps taken and whether the run diverged.
 *
 * # Safety
 * `e` must be a live handle; out pointers must be writable.
 */
enum TslStatus tsl_embedding_summary(const struct TslEmbedding *e,
                                     double *final_kl,
                                     size_t *steps,
                                     bool *diverged);

/**
 * Continuum problem `min ∫Φ₁(σT')ρ + log ∫ρ²/T'` on a uniform grid of `nodes` points.
 *
 * # Safety
 * Handles must be live, `sigma` NUL-terminated, `out` writable.
 */
enum TslStatus tsl_problem1d_new(const struct TslDensity *density,
                                 const char *sigma,
                                 const struct TslKernel *kernel,
                                 size_t nodes,
                                 struct TslProblem1D **out);

/**
 * # Safety
 * `p` must be null or come from `tsl_problem1d_new`.
 */
void tsl_problem1d_free(struct TslProblem1D *p);

/**
 * Run the monotone fixed-point iteration.
 *
 * # Safety
 * `p` must be a live handle; `out` must be writable.
 */
enum TslStatus tsl_problem1d_solve(const struct TslProblem1D *p,
                                   double delta0,
                                   double tol,
                                   size_t max_iter,
                                   struct TslSolution **out);

/**
 * # Safety
 * `s` must be null or come from `tsl_problem1d_solve`.
 */
void tsl_solution_free(struct TslSolution *s);

/**
 * Grid length of the solution, 0 for null.
 *
 * # Safety
 * `s` must be a live handle or null.
 */
size_t tsl_solution_len(const struct TslSolution *s);

/**
 * `b*`, the Euler–Lagrange residual and the minimal value `F[u*]`.
 *
 * # Safety
 * `s` must be a live handle; out pointers must be writable.
 */
enum TslStatus tsl_solution_summary(const struct TslSolution *s,
                                    double *b_star,
                                    double *residual,
                                    double *f_value);

/**
 * Copy grid `x`, `u* = T*'` and `T*` into caller buffers of capacity `cap` each; any may be null.
 *
 * # Safety
 * `s` must be a live handle; non-null buffers must hold `cap` doubles.
 */
enum TslStatus tsl_solution_copy(const struct TslSolution *s,
                                 double *x,
                                 double *u,
                                 double *t,
                                 size_t cap);

/**
 * Run a TOML experiment config and write its artifacts to `out_dir`.
 *
 * # Safety
 * Both arguments must be NUL-terminated strings.
 */
enum TslStatus tsl_run_config(const char *config_toml, const char *out_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TSNE_LIMITS_FFI_H */
