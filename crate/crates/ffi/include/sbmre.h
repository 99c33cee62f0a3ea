#ifndef SBMRE_H
#define SBMRE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SbmreStatus {
  SBMRE_STATUS_OK = 0,
  SBMRE_STATUS_NULL_POINTER = 1,
  SBMRE_STATUS_INVALID_ARGUMENT = 2,
  SBMRE_STATUS_BUFFER_TOO_SMALL = 3,
  SBMRE_STATUS_SIMULATION = 4,
  SBMRE_STATUS_NUMERICAL = 5,
  SBMRE_STATUS_PANIC = 6,
} SbmreStatus;

typedef enum SbmreBoundary {
  SBMRE_BOUNDARY_NEUMANN = 0,
  SBMRE_BOUNDARY_DIRICHLET0 = 1,
} SbmreBoundary;

/*
 Environment field handle.
 */
typedef struct SbmreEnv SbmreEnv;

/*
 Particle configuration with its own movement stream.
 */
typedef struct SbmreField SbmreField;

/*
 SPDE grid with its coefficients and noise stream.
 */
typedef struct SbmreSpdeGrid SbmreSpdeGrid;

/*
 Exact environment moments of the example law.
 */
typedef struct SbmreAuditRow {
  double beta;
  uint64_t n;
  double mean_m1;
  double gamma_row;
  double mean_m4;
  double beta2_row;
  double fourth_row;
} SbmreAuditRow;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Copies the calling thread's last error message into `buf` (NUL
 terminated, truncated to `cap - 1` bytes) and returns its full length.

 # Safety
 `buf` must be null or valid for `cap` bytes of writes.
 */
size_t sbmre_last_error(char *buf, size_t cap);

/*
 NUL-terminated library version; static storage.
 */
const char *sbmre_version(void);

/*
 Creates the example-law environment; requires `beta <= n^(1/4)`.

 # Safety
 `out` must be valid for writes.
 */
enum SbmreStatus sbmre_env_new(uint64_t n, double beta, uint64_t seed, struct SbmreEnv **out);

/*
 # Safety
 `env` must be null or a handle from [`sbmre_env_new`] not yet freed.
 */
void sbmre_env_free(struct SbmreEnv *env);

/*
 Environment sign at lattice time `n` and site `x`; 0 for a null handle.

 # Safety
 `env` must be null or a live handle.
 */
int8_t sbmre_env_sample_xi(const struct SbmreEnv *env, uint64_t n, int64_t x);

/*
 Probability of two offspring under sign `xi` (must be +1 or -1).

 # Safety
 `env` must be a live handle and `out` valid for writes.
 */
enum SbmreStatus sbmre_env_branch_probability(const struct SbmreEnv *env, int8_t xi, double *out);

/*
 Exact environment moments of the example law at `(beta, n)`.

 # Safety
 `out` must be valid for writes.
 */
enum SbmreStatus sbmre_audit_example(double beta, uint64_t n, struct SbmreAuditRow *out);

/*
 Creates a field with `counts[i]` particles at `sites[i]`. Its movement
 stream is derived from `seed`.

 # Safety
 `sites` and `counts` must be valid for `len` reads (either may be null
 when `len == 0`); `out` must be valid for writes.
 */
enum SbmreStatus sbmre_field_new(const int64_t *sites,
                                 const uint64_t *counts,
                                 size_t len,
                                 uint64_t seed,
                                 struct SbmreField **out);

/*
 # Safety
 `field` must be null or a handle from [`sbmre_field_new`] not yet freed.
 */
void sbmre_field_free(struct SbmreField *field);

/*
 Advances the field one lattice step in `env`.

 # Safety
 Both handles must be live; `field` must not be used concurrently.
 */
enum SbmreStatus sbmre_field_step(struct SbmreField *field, const struct SbmreEnv *env);

/*
 Total particle count; 0 for a null handle.

 # Safety
 `field` must be null or a live handle.
 */
uint64_t sbmre_field_total_mass(const struct SbmreField *field);

/*
 Lattice time of the field; 0 for a null handle.

 # Safety
 `field` must be null or a live handle.
 */
uint64_t sbmre_field_step_index(const struct SbmreField *field);

/*
 Number of occupied sites; 0 for a null handle.

 # Safety
 `field` must be null or a live handle.
 */
size_t sbmre_field_occupied(const struct SbmreField *field);

/*
 Copies occupied sites and counts in increasing site order. `written`
 receives the number of entries, or the required capacity on
 `SBMRE_STATUS_BUFFER_TOO_SMALL`.

 # Safety
 `sites` and `counts` must be valid for `cap` writes; `written` valid for
 writes.
 */
enum SbmreStatus sbmre_field_copy_counts(const struct SbmreField *field,
                                         int64_t *sites,
                                         uint64_t *counts,
                                         size_t cap,
                                         size_t *written);

/*
 `X(phi) = (1/N) sum_x B_x phi(x / sqrt N)` with a caller-supplied `phi`.

 # Safety
 `field` must be live, `phi` callable with `user`, `out` valid for writes.
 */
enum SbmreStatus sbmre_field_measure_apply(const struct SbmreField *field,
                                           uint64_t n_scale,
                                           double (*phi)(double, void*),
                                           void *user,
                                           double *out);

/*
 `P(Y_n = x)` for a simple random walk from the origin.
 */
double sbmre_srw_pmf(uint64_t n, int64_t x);

/*
 `E[(1 + lambda)^{#collisions at times 1..n}]` for two independent walks.

 # Safety
 `out` must be valid for writes.
 */
enum SbmreStatus sbmre_collision_pair(uint64_t n, double lambda, double *out);

/*
 Exact `E[B1_n B2_n]` for two particles started at the origin.

 # Safety
 `out` must be valid for writes.
 */
enum SbmreStatus sbmre_pair_moment_exact(uint64_t n, double lambda, double *out);

/*
 Heat kernel `psi^x_t(y)`; `t` must be positive.

 # Safety
 `out` must be valid for writes.
 */
enum SbmreStatus sbmre_gaussian_kernel(double x, double t, double y, double *out);

/*
 Creates a zero grid on `[x_min, x_max]` with step `h` and time step
 `tau <= h^2 / 2`.

 # Safety
 `out` must be valid for writes.
 */
enum SbmreStatus sbmre_spde_grid_new(double x_min,
                                     double x_max,
                                     double h,
                                     double tau,
                                     enum SbmreBoundary boundary,
                                     double gamma,
                                     double beta,
                                     uint64_t noise_seed,
                                     struct SbmreSpdeGrid **out);

/*
 # Safety
 `grid` must be null or a handle from [`sbmre_spde_grid_new`] not yet freed.
 */
void sbmre_spde_grid_free(struct SbmreSpdeGrid *grid);

/*
 Number of cells; 0 for a null handle.

 # Safety
 `grid` must be null or a live handle.
 */
size_t sbmre_spde_grid_len(const struct SbmreSpdeGrid *grid);

/*
 Overwrites the cell values (`len` must equal the cell count).

 # Safety
 `grid` must be live and `values` valid for `len` reads.
 */
enum SbmreStatus sbmre_spde_grid_set_values(struct SbmreSpdeGrid *grid,
                                            const double *values,
                                            size_t len);

/*
 Copies the cell values into `out` (capacity `cap`).

 # Safety
 `grid` must be live and `out` valid for `cap` writes.
 */
enum SbmreStatus sbmre_spde_grid_values(const struct SbmreSpdeGrid *grid, double *out, size_t cap);

/*
 Advances the forward equation `steps` times.

 # Safety
 `grid` must be live and not used concurrently.
 */
enum SbmreStatus sbmre_spde_grid_step_forward(struct SbmreSpdeGrid *grid, uint64_t steps);

/*
 Advances the dual equation `steps` times.

 # Safety
 `grid` must be live and not used concurrently.
 */
enum SbmreStatus sbmre_spde_grid_step_dual(struct SbmreSpdeGrid *grid, uint64_t steps);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SBMRE_H */
