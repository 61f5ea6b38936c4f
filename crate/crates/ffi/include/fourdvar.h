#ifndef FOURDVAR_H
#define FOURDVAR_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result codes.
 */
typedef enum FdvStatus {
  FDV_STATUS_OK = 0,
  FDV_STATUS_NULL_POINTER = 1,
  FDV_STATUS_INVALID_UTF8 = 2,
  FDV_STATUS_CONFIG_PARSE = 3,
  FDV_STATUS_CONFIG_INVALID = 4,
  FDV_STATUS_DIMENSION_MISMATCH = 5,
  FDV_STATUS_ELLIPTICITY_VIOLATION = 6,
  FDV_STATUS_SOLVER_FAILURE = 7,
  FDV_STATUS_NUMERICAL = 8,
  FDV_STATUS_IO = 9,
  FDV_STATUS_PANIC = 10,
} FdvStatus;

/*
 Opaque problem handle.
 */
typedef struct FdvProblem FdvProblem;

/*
 First-order optimality report.
 */
typedef struct FdvKktReport {
  double grad_residual;
  double grad_norm;
  double feasibility;
  double complementarity;
  double lambda;
  double cost;
  /*
   1 if the constraint is active
   */
  int32_t active;
  /*
   1 if the control is feasible
   */
  int32_t feasible;
} FdvKktReport;

typedef struct FdvOptimizeSummary {
  uintptr_t iterations;
  int32_t converged;
  double cost;
} FdvOptimizeSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Builds a problem from the text of a TOML experiment file.

 # Safety
 `config_toml` must be a NUL-terminated string; `out` must be writable.
 */
enum FdvStatus fdv_problem_from_config(const char *config_toml, struct FdvProblem **out);

/*
 Releases a handle; null is ignored.

 # Safety
 `problem` must come from [`fdv_problem_from_config`] and not be used afterwards.
 */
void fdv_problem_free(struct FdvProblem *problem);

/*
 Number of grid nodes, or 0 for a null handle.

 # Safety
 `problem` must be null or a live handle.
 */
uintptr_t fdv_problem_node_count(const struct FdvProblem *problem);

/*
 Copies the true initial condition of the twin into `out`.

 # Safety
 `out` must hold `len` doubles.
 */
enum FdvStatus fdv_truth(const struct FdvProblem *problem, double *out, uintptr_t len);

/*
 Reduced cost `f(u)`.

 # Safety
 `u` must hold `len` doubles; `cost` must be writable.
 */
enum FdvStatus fdv_evaluate_cost(const struct FdvProblem *problem,
                                 const double *u,
                                 uintptr_t len,
                                 double *cost);

/*
 Cost and L2 gradient representer; `cost` may be null.

 # Safety
 `u` and `grad` must hold `len` doubles.
 */
enum FdvStatus fdv_evaluate_gradient(const struct FdvProblem *problem,
                                     const double *u,
                                     uintptr_t len,
                                     double *grad,
                                     double *cost);

/*
 # Safety
 `u` must hold `len` doubles; `report` must be writable.
 */
enum FdvStatus fdv_kkt_check(const struct FdvProblem *problem,
                             const double *u,
                             uintptr_t len,
                             struct FdvKktReport *report);

/*
 Runs the configured optimizer from `u_init` (or from the configured start
 when `u_init` is null) and writes the result to `u_out`. `summary` may be
 null.

 # Safety
 `u_init` (if not null) and `u_out` must hold `len` doubles.
 */
enum FdvStatus fdv_optimize(const struct FdvProblem *problem,
                            const double *u_init,
                            double *u_out,
                            uintptr_t len,
                            struct FdvOptimizeSummary *summary);

/*
 Message of the last failed call on this thread, or null. The pointer is
 valid until the next failing call on the same thread.
 */
const char *fdv_last_error_message(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FOURDVAR_H */
