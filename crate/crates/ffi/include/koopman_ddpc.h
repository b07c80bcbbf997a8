#ifndef KOOPMAN_DDPC_H
#define KOOPMAN_DDPC_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum KdStatus {
  KD_STATUS_OK = 0,
  KD_STATUS_NULL_POINTER = 1,
  KD_STATUS_INVALID_ARGUMENT = 2,
  KD_STATUS_NUMERICAL = 3,
  KD_STATUS_UNSUPPORTED = 4,
  KD_STATUS_PANIC = 5,
} KdStatus;

/**
 * A finished closed-loop run with its regret figures, when available.
 */
typedef struct KdRun KdRun;

/**
 * A built-in system.
 */
typedef struct KdSystem KdSystem;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer stays
 * valid until the next call into this library on the same thread.
 */
const char *kd_last_error(void);

/**
 * Create `slow_manifold`, `quartic_manifold` or `unicycle`.
 *
 * # Safety
 * `id` must be a NUL-terminated string and `out` a valid pointer.
 */
enum KdStatus kd_system_new(const char *id, struct KdSystem **out);

/**
 * # Safety
 * `sys` must come from [`kd_system_new`] and not be freed yet; null is a no-op.
 */
void kd_system_free(struct KdSystem *sys);

/**
 * State, input and lifted dimensions. `n_x` is 0 when the system has no
 * embedding.
 *
 * # Safety
 * All pointers must be valid.
 */
enum KdStatus kd_system_dims(const struct KdSystem *sys, size_t *n_z, size_t *n_u, size_t *n_x);

/**
 * One step `z_next = f(z, u)`.
 *
 * # Safety
 * `z` and `z_next` must hold `n_z` doubles, `u` must hold `n_u`.
 */
enum KdStatus kd_system_step(const struct KdSystem *sys,
                             const double *z,
                             size_t n_z,
                             const double *u,
                             size_t n_u,
                             double *z_next);

/**
 * Largest embedding residuals over `samples` seeded draws in `[-2, 2]`.
 *
 * # Safety
 * Output pointers must be valid.
 */
enum KdStatus kd_verify_embedding(const struct KdSystem *sys,
                                  size_t samples,
                                  uint64_t seed,
                                  double *dynamics_residual,
                                  double *recovery_residual);

/**
 * Run one closed loop from a JSON experiment config at window `window`.
 * Relative paths in the config are resolved against the working directory.
 *
 * # Safety
 * `config_json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum KdStatus kd_run_from_config(const char *config_json, size_t window, struct KdRun **out);

/**
 * # Safety
 * `run` must come from [`kd_run_from_config`] and not be freed yet; null is a
 * no-op.
 */
void kd_run_free(struct KdRun *run);

/**
 * Scored horizon `T`, state and input dimensions.
 *
 * # Safety
 * All pointers must be valid.
 */
enum KdStatus kd_run_shape(const struct KdRun *run, size_t *horizon, size_t *n_z, size_t *n_u);

/**
 * Copy `z_1..z_T` row-major into `buf` (`T * n_z` doubles).
 *
 * # Safety
 * `buf` must hold `len` doubles.
 */
enum KdStatus kd_run_states(const struct KdRun *run, double *buf, size_t len);

/**
 * Copy `u_1..u_T` row-major into `buf` (`T * n_u` doubles).
 *
 * # Safety
 * `buf` must hold `len` doubles.
 */
enum KdStatus kd_run_controls(const struct KdRun *run, double *buf, size_t len);

/**
 * Closed-loop cost `J_T`.
 *
 * # Safety
 * Pointers must be valid.
 */
enum KdStatus kd_run_total_cost(const struct KdRun *run, double *cost);

/**
 * Dynamic regret and the offline optimum; unsupported without an embedding.
 *
 * # Safety
 * Pointers must be valid.
 */
enum KdStatus kd_run_regret(const struct KdRun *run, double *regret, double *optimal_cost);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KOOPMAN_DDPC_H */
