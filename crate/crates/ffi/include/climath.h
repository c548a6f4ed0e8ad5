#ifndef CLIMATH_H
#define CLIMATH_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Ground-truth problem selector, passed as `int32_t` to the functions taking a case.
 */
typedef enum ClimathCase {
  CLIMATH_CASE_CONSTANT2D = 0,
  CLIMATH_CASE_VARIABLE2D = 1,
  CLIMATH_CASE_HEIGHT3D = 2,
} ClimathCase;

/**
 * Result codes shared by every function.
 */
typedef enum ClimathStatus {
  CLIMATH_STATUS_OK = 0,
  CLIMATH_STATUS_NULL_POINTER = 1,
  CLIMATH_STATUS_CONFIG = 2,
  CLIMATH_STATUS_NUMERIC = 3,
  CLIMATH_STATUS_STRUCTURAL = 4,
  CLIMATH_STATUS_IO = 5,
  CLIMATH_STATUS_PARSE = 6,
  CLIMATH_STATUS_DEGENERATE_KERNEL = 7,
  CLIMATH_STATUS_MISSING_ARTIFACTS = 8,
  CLIMATH_STATUS_OUT_OF_RANGE = 9,
  CLIMATH_STATUS_PANIC = 10,
} ClimathStatus;

/**
 * Parsed observation file.
 */
typedef struct ClimathObservations ClimathObservations;

/**
 * Configured experiment.
 */
typedef struct ClimathRun ClimathRun;

/**
 * Finite-difference solution of a ground-truth problem.
 */
typedef struct ClimathSeries ClimathSeries;

/**
 * One reading; `kind` is 0 for pointwise (`t0 = t1 = t`) and 1 for a window mean.
 */
typedef struct ClimathObservation {
  uint32_t kind;
  uint32_t dims;
  double x[3];
  double t0;
  double t1;
  uint32_t intervals;
  double clean;
  double noisy;
  double sigma;
} ClimathObservation;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the next call.
 */
const char *climath_last_error(void);

/**
 * Library version as a static string.
 */
const char *climath_version(void);

/**
 * Settling velocity derived from the particle constants.
 */
double climath_settling_velocity(void);

/**
 * True source at `point = (x, y[, z], t)`.
 */
enum ClimathStatus climath_truth_source(int32_t case_,
                                        const double *point,
                                        size_t len,
                                        double *out);

/**
 * True velocity component `axis` at `point`.
 */
enum ClimathStatus climath_truth_velocity(int32_t case_,
                                          size_t axis,
                                          const double *point,
                                          size_t len,
                                          double *out);

/**
 * True diffusion along `axis` at `point`.
 */
enum ClimathStatus climath_truth_diffusion(int32_t case_,
                                           size_t axis,
                                           const double *point,
                                           size_t len,
                                           double *out);

/**
 * Adaptive loss weights `lambda = Tr(K) / Tr(K_aa)` over `(r, b, z, v)`.
 * Pass `with_velocity = 0` to ignore the fourth entry.
 */
enum ClimathStatus climath_adaptive_weights(const double *traces,
                                            const double *previous,
                                            int32_t with_velocity,
                                            double *out);

/**
 * Creates a run from a scenario preset (`"A1"`, `"A2"`, `"B"` or `"C"`).
 */
enum ClimathStatus climath_run_new(const char *scenario,
                                   int32_t paper_scale,
                                   struct ClimathRun **out);

/**
 * Applies one `dotted.key=value` override.
 */
enum ClimathStatus climath_run_set(struct ClimathRun *run, const char *key_value);

/**
 * Generates data, trains and writes every artifact into `out_dir`.
 */
enum ClimathStatus climath_run_execute(struct ClimathRun *run, const char *out_dir);

/**
 * Looks up a metric of an executed run, e.g. `("V_x", "rel_error")` or `("u_t1", "rel_l2")`.
 */
enum ClimathStatus climath_run_metric(const struct ClimathRun *run,
                                      const char *name,
                                      const char *quantity,
                                      double *out);

/**
 * Effective configuration as TOML; release with [`climath_string_free`].
 */
char *climath_run_config(const struct ClimathRun *run);

void climath_string_free(char *s);

void climath_run_free(struct ClimathRun *run);

enum ClimathStatus climath_obs_read(const char *path, struct ClimathObservations **out);

/**
 * Number of readings, 0 for a null handle.
 */
size_t climath_obs_len(const struct ClimathObservations *obs);

enum ClimathStatus climath_obs_get(const struct ClimathObservations *obs,
                                   size_t index,
                                   struct ClimathObservation *out);

void climath_obs_free(struct ClimathObservations *obs);

/**
 * Solves `case` on an `n`-cell grid per axis with `n_steps` time steps on `[0, 1]`.
 */
enum ClimathStatus climath_forward_solve(int32_t case_,
                                         size_t n,
                                         size_t n_steps,
                                         struct ClimathSeries **out);

/**
 * Number of stored snapshots (`n_steps + 1`), 0 for a null handle.
 */
size_t climath_series_snapshots(const struct ClimathSeries *series);

/**
 * Multilinear interpolation of snapshot `step` at spatial point `x`.
 */
enum ClimathStatus climath_series_sample(const struct ClimathSeries *series,
                                         size_t step,
                                         const double *x,
                                         size_t dims,
                                         double *out);

void climath_series_free(struct ClimathSeries *series);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CLIMATH_H */
