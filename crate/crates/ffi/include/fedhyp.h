#ifndef FEDHYP_H
#define FEDHYP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes. Zero is success.
 */
typedef enum FhStatus {
  FH_STATUS_OK = 0,
  FH_STATUS_NULL_POINTER = 1,
  FH_STATUS_INVALID_ARGUMENT = 2,
  FH_STATUS_CONFIG = 3,
  FH_STATUS_NUMERICAL = 4,
  FH_STATUS_TRAINING = 5,
  FH_STATUS_IO = 6,
  FH_STATUS_FORMAT = 7,
  FH_STATUS_PANIC = 8,
} FhStatus;

/**
 * Exponential map used to embed tangent vectors.
 */
typedef enum FhExpMap {
  FH_EXP_MAP_PRINTED = 0,
  FH_EXP_MAP_STANDARD = 1,
} FhExpMap;

/**
 * Opaque simulator handle.
 */
typedef struct FhSimulator FhSimulator;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string. Do not free.
 */
const char *fh_version(void);

/**
 * Message of the last failed call on this thread, or null. The caller owns
 * the returned string.
 */
char *fh_last_error_message(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and must not be used afterwards.
 */
void fh_string_free(char *s);

/**
 * Creates a simulator from a TOML configuration (null for defaults).
 * Generates the data and pretrains, so this can take a while.
 *
 * # Safety
 * `config_toml` is null or a NUL-terminated string; `out` is writable.
 */
enum FhStatus fh_simulator_new(const char *config_toml, struct FhSimulator **out);

/**
 * Creates a simulator that resumes from a checkpoint file.
 *
 * # Safety
 * `config_toml` is null or a NUL-terminated string; `path` is a
 * NUL-terminated string; `out` is writable.
 */
enum FhStatus fh_simulator_from_checkpoint(const char *config_toml,
                                           const char *path,
                                           struct FhSimulator **out);

/**
 * Destroys a simulator. Null is ignored.
 *
 * # Safety
 * `sim` must come from a constructor of this library and not be used afterwards.
 */
void fh_simulator_free(struct FhSimulator *sim);

/**
 * Runs one round and writes its number to `round` (may be null).
 * Fails with `FH_STATUS_INVALID_ARGUMENT` once every round has run.
 *
 * # Safety
 * `sim` is a live handle; `round` is null or writable.
 */
enum FhStatus fh_simulator_step(struct FhSimulator *sim, size_t *round);

/**
 * Runs every remaining round.
 *
 * # Safety
 * `sim` is a live handle.
 */
enum FhStatus fh_simulator_run(struct FhSimulator *sim);

/**
 * Rounds completed so far.
 *
 * # Safety
 * `sim` is a live handle; `out` is writable.
 */
enum FhStatus fh_simulator_round(const struct FhSimulator *sim, size_t *out);

/**
 * Current global curvature.
 *
 * # Safety
 * `sim` is a live handle; `out` is writable.
 */
enum FhStatus fh_simulator_gamma(const struct FhSimulator *sim, double *out);

/**
 * Combined score of the current global model on the held-out test set, in `[0, 1]`.
 *
 * # Safety
 * `sim` is a live handle; `out` is writable.
 */
enum FhStatus fh_simulator_combined_score(const struct FhSimulator *sim, double *out);

/**
 * The round records so far as JSON lines. The caller owns `*out`.
 *
 * # Safety
 * `sim` is a live handle; `out` is writable.
 */
enum FhStatus fh_simulator_records_json(const struct FhSimulator *sim, char **out);

/**
 * Writes a checkpoint of the global state.
 *
 * # Safety
 * `sim` is a live handle; `path` is a NUL-terminated string.
 */
enum FhStatus fh_simulator_save_checkpoint(const struct FhSimulator *sim, const char *path);

/**
 * Möbius addition `x ⊕ y` on the ball of curvature `-gamma`.
 *
 * # Safety
 * `x`, `y` and `out` hold `dim` values each; `out` may alias neither input.
 */
enum FhStatus fh_mobius_add(const double *x,
                            const double *y,
                            size_t dim,
                            double gamma,
                            double *out);

/**
 * Geodesic distance between two ball points.
 *
 * # Safety
 * `x` and `y` hold `dim` values each; `out` is writable.
 */
enum FhStatus fh_distance(const double *x, const double *y, size_t dim, double gamma, double *out);

/**
 * Exponential map at `x` applied to the tangent vector `v`.
 *
 * # Safety
 * `x`, `v` and `out` hold `dim` values each.
 */
enum FhStatus fh_exp_map(const double *x,
                         const double *v,
                         size_t dim,
                         double gamma,
                         enum FhExpMap variant,
                         double *out);

/**
 * Gyro-midpoint of `n` points stored row-major in `points` (`n * dim`
 * values). `weights` is null for equal weights or holds `n` values.
 *
 * # Safety
 * Buffers hold the stated number of values; `out` holds `dim`.
 */
enum FhStatus fh_midpoint(const double *points,
                          size_t n,
                          size_t dim,
                          const double *weights,
                          double gamma,
                          double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FEDHYP_H */
