#ifndef LLGFEM_H
#define LLGFEM_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

#define LLG_SCHEME_BDF2 0

#define LLG_SCHEME_TPS 1

#define LLG_SCHEME_MIDPOINT 2

/**
 * `2^l x 2^l` squares, each cut along one diagonal.
 */
#define LLG_MESH_HALVED 0

/**
 * Every square cut by both diagonals.
 */
#define LLG_MESH_CRISS_CROSS 1

/**
 * Written to `failed_step` when a run did not stop in a time step.
 */
#define LLG_NO_STEP -1

typedef enum LlgStatus {
  LLG_STATUS_OK = 0,
  LLG_STATUS_NULL_POINTER = 1,
  LLG_STATUS_INVALID_ARGUMENT = 2,
  LLG_STATUS_INVALID_CONFIG = 3,
  /**
   * A time step failed: degenerate anchor, linear solver or fixed-point
   * iteration did not converge.
   */
  LLG_STATUS_NUMERICAL = 4,
  LLG_STATUS_IO = 5,
  LLG_STATUS_PANIC = 6,
} LlgStatus;

/**
 * Benchmark problem discretised on a mesh. Opaque to C.
 */
typedef struct LlgProblem LlgProblem;

/**
 * Result of a successful run. Opaque to C.
 */
typedef struct LlgTrajectory LlgTrajectory;

/**
 * Parameters of one run. Start from [`llg_run_options_default`].
 */
typedef struct LlgRunOptions {
  /**
   * One of the `LLG_SCHEME_*` constants.
   */
  uint32_t scheme;
  double alpha;
  double lambda_sq;
  double tau;
  size_t steps;
  /**
   * Relative residual of the linear solves.
   */
  double solver_tolerance;
  /**
   * Stopping tolerance of the midpoint fixed-point iteration.
   */
  double fp_tolerance;
  size_t fp_max_iterations;
} LlgRunOptions;

/**
 * Observables of the state `m^j`. Quantities that do not exist for a
 * given step or scheme are NaN.
 */
typedef struct LlgStepRecord {
  size_t j;
  double t;
  double energy;
  double h1_semi;
  double w1inf_semi;
  double linf_nodal;
  double nodal_l1_dev;
  double quad_l1_dev;
  double v_norm_sq;
  double energy_identity_residual;
  size_t linear_iterations;
  size_t fixed_point_sweeps;
} LlgStepRecord;

/**
 * Run-level diagnostics. Residuals that the scheme does not define are NaN.
 */
typedef struct LlgDiagnostics {
  double v0_norm_sq;
  double d2_sum;
  double eta0;
  double eta_n;
  double cfl_c;
  double max_energy_identity_residual;
  double max_constraint_law_residual;
  double max_velocity_identity_residual;
  double min_nodal_modulus;
  bool modulus_nondecreasing;
  size_t max_fixed_point_sweeps;
  size_t total_linear_iterations;
} LlgDiagnostics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null if none failed.
 * The string stays valid until the next failing call on the same thread.
 */
const char *llg_last_error_message(void);

/**
 * Static, NUL-terminated version string.
 */
const char *llg_version(void);

/**
 * Builds benchmark problem `name` ("radial", "manufactured" or "blowup")
 * on a structured mesh of the given kind and level. A positive
 * `lambda_sq` replaces the problem's exchange constant.
 *
 * # Safety
 * `name` must be a NUL-terminated string and `out` a valid pointer.
 */
enum LlgStatus llg_problem_new(const char *name,
                               uint32_t mesh_kind,
                               uint32_t level,
                               double lambda_sq,
                               struct LlgProblem **out);

/**
 * # Safety
 * `problem` must come from [`llg_problem_new`] and not be freed yet, or be null.
 */
void llg_problem_free(struct LlgProblem *problem);

/**
 * Number of mesh vertices, 0 for a null handle.
 *
 * # Safety
 * `problem` must be a live handle or null.
 */
size_t llg_problem_num_nodes(const struct LlgProblem *problem);

/**
 * Number of triangles, 0 for a null handle.
 *
 * # Safety
 * `problem` must be a live handle or null.
 */
size_t llg_problem_num_triangles(const struct LlgProblem *problem);

/**
 * Largest element diameter, NaN for a null handle.
 *
 * # Safety
 * `problem` must be a live handle or null.
 */
double llg_problem_mesh_size(const struct LlgProblem *problem);

/**
 * Copies the vertex coordinates, `x0 y0 x1 y1 ...`, into `buf`, which
 * must hold `2 * num_nodes` doubles.
 *
 * # Safety
 * `buf` must be valid for `len` writes.
 */
enum LlgStatus llg_problem_vertices(const struct LlgProblem *problem, double *buf, size_t len);

/**
 * Options for `steps` steps of `scheme` over the problem's final time,
 * with its damping and exchange constants and the default tolerances.
 *
 * # Safety
 * `problem` must be a live handle and `out` a valid pointer.
 */
enum LlgStatus llg_run_options_default(const struct LlgProblem *problem,
                                       uint32_t scheme,
                                       size_t steps,
                                       struct LlgRunOptions *out);

/**
 * Runs the integrator. On success `*out` receives a trajectory holding
 * every state; on a failed time step the status is
 * [`LlgStatus::Numerical`] and `*failed_step` (if not null) the index of
 * that step, otherwise [`LLG_NO_STEP`].
 *
 * # Safety
 * `problem` must be a live handle; `options` and `out` valid pointers;
 * `failed_step` valid or null.
 */
enum LlgStatus llg_run(const struct LlgProblem *problem,
                       const struct LlgRunOptions *options,
                       struct LlgTrajectory **out,
                       int64_t *failed_step);

/**
 * # Safety
 * `traj` must come from [`llg_run`] and not be freed yet, or be null.
 */
void llg_trajectory_free(struct LlgTrajectory *traj);

/**
 * Number of time steps `N`; states are indexed `0..=N`.
 *
 * # Safety
 * `traj` must be a live handle or null.
 */
size_t llg_trajectory_steps(const struct LlgTrajectory *traj);

/**
 * Copies `m^j` into `buf` as `x y z` per node (`3 * num_nodes` doubles).
 *
 * # Safety
 * `traj` must be a live handle and `buf` valid for `len` writes.
 */
enum LlgStatus llg_trajectory_state(const struct LlgTrajectory *traj,
                                    size_t j,
                                    double *buf,
                                    size_t len);

/**
 * Observables of `m^j`.
 *
 * # Safety
 * `traj` must be a live handle and `out` a valid pointer.
 */
enum LlgStatus llg_trajectory_record(const struct LlgTrajectory *traj,
                                     size_t j,
                                     struct LlgStepRecord *out);

/**
 * # Safety
 * `traj` must be a live handle and `out` a valid pointer.
 */
enum LlgStatus llg_trajectory_diagnostics(const struct LlgTrajectory *traj,
                                          struct LlgDiagnostics *out);

/**
 * Per-step CSV table of the run, released with [`llg_string_free`].
 * Null on failure.
 *
 * # Safety
 * `traj` must be a live handle or null.
 */
char *llg_trajectory_csv(const struct LlgTrajectory *traj);

/**
 * # Safety
 * `s` must come from this library and not be freed yet, or be null.
 */
void llg_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LLGFEM_H */
