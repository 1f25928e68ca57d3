//! C interface to the llgfem integrators.
//!
//! A caller builds an [`LlgProblem`] from one of the benchmark problems on a
//! structured mesh, runs it with [`llg_run`] and reads states and observables
//! off the returned [`LlgTrajectory`]. Every fallible call returns an
//! [`LlgStatus`]; the message of the last failure on the calling thread is
//! available from [`llg_last_error_message`]. Panics never cross the
//! boundary, they are reported as [`LlgStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use llgfem::experiments::{build_mesh, MeshKind};
use llgfem::problems::{BenchmarkProblem, ProblemKind};
use llgfem::{run_simulation, Error, Problem, Scheme, SolverConfig, Trajectory};

pub const LLG_SCHEME_BDF2: u32 = 0;
pub const LLG_SCHEME_TPS: u32 = 1;
pub const LLG_SCHEME_MIDPOINT: u32 = 2;

/// `2^l x 2^l` squares, each cut along one diagonal.
pub const LLG_MESH_HALVED: u32 = 0;
/// Every square cut by both diagonals.
pub const LLG_MESH_CRISS_CROSS: u32 = 1;

/// Written to `failed_step` when a run did not stop in a time step.
pub const LLG_NO_STEP: i64 = -1;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LlgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidConfig = 3,
    /// A time step failed: degenerate anchor, linear solver or fixed-point
    /// iteration did not converge.
    Numerical = 4,
    Io = 5,
    Panic = 6,
}

/// Benchmark problem discretised on a mesh. Opaque to C.
pub struct LlgProblem {
    problem: Problem,
    alpha: f64,
    lambda_sq: f64,
    final_time: f64,
}

/// Result of a successful run. Opaque to C.
pub struct LlgTrajectory {
    inner: Trajectory,
}

/// Parameters of one run. Start from [`llg_run_options_default`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LlgRunOptions {
    /// One of the `LLG_SCHEME_*` constants.
    pub scheme: u32,
    pub alpha: f64,
    pub lambda_sq: f64,
    pub tau: f64,
    pub steps: usize,
    /// Relative residual of the linear solves.
    pub solver_tolerance: f64,
    /// Stopping tolerance of the midpoint fixed-point iteration.
    pub fp_tolerance: f64,
    pub fp_max_iterations: usize,
}

/// Observables of the state `m^j`. Quantities that do not exist for a
/// given step or scheme are NaN.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LlgStepRecord {
    pub j: usize,
    pub t: f64,
    pub energy: f64,
    pub h1_semi: f64,
    pub w1inf_semi: f64,
    pub linf_nodal: f64,
    pub nodal_l1_dev: f64,
    pub quad_l1_dev: f64,
    pub v_norm_sq: f64,
    pub energy_identity_residual: f64,
    pub linear_iterations: usize,
    pub fixed_point_sweeps: usize,
}

/// Run-level diagnostics. Residuals that the scheme does not define are NaN.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LlgDiagnostics {
    pub v0_norm_sq: f64,
    pub d2_sum: f64,
    pub eta0: f64,
    pub eta_n: f64,
    pub cfl_c: f64,
    pub max_energy_identity_residual: f64,
    pub max_constraint_law_residual: f64,
    pub max_velocity_identity_residual: f64,
    pub min_nodal_modulus: f64,
    pub modulus_nondecreasing: bool,
    pub max_fixed_point_sweeps: usize,
    pub total_linear_iterations: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> LlgStatus {
    match e {
        Error::InvalidConfig(_) => LlgStatus::InvalidConfig,
        Error::Io(_) => LlgStatus::Io,
        e if e.is_numerical() => LlgStatus::Numerical,
        _ => LlgStatus::InvalidArgument,
    }
}

fn fail(status: LlgStatus, msg: impl Into<String>) -> LlgStatus {
    set_last_error(msg.into());
    status
}

/// Runs `f`, records its error and keeps panics on this side.
fn guard(f: impl FnOnce() -> Result<(), LlgStatus>) -> LlgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LlgStatus::Ok,
        Ok(Err(status)) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            fail(LlgStatus::Panic, format!("panic: {msg}"))
        }
    }
}

fn lift<T>(r: llgfem::Result<T>) -> Result<T, LlgStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), LlgStatus> {
    if p.is_null() {
        Err(fail(LlgStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

unsafe fn problem_kind(name: *const c_char) -> Result<ProblemKind, LlgStatus> {
    non_null(name, "problem name")?;
    let s = CStr::from_ptr(name)
        .to_str()
        .map_err(|_| fail(LlgStatus::InvalidArgument, "problem name is not UTF-8"))?;
    lift(s.parse())
}

fn scheme_of(code: u32) -> Result<Scheme, LlgStatus> {
    match code {
        LLG_SCHEME_BDF2 => Ok(Scheme::Bdf2),
        LLG_SCHEME_TPS => Ok(Scheme::Tps),
        LLG_SCHEME_MIDPOINT => Ok(Scheme::Mid),
        _ => Err(fail(LlgStatus::InvalidArgument, format!("unknown scheme code {code}"))),
    }
}

fn nan_or(x: Option<f64>) -> f64 {
    x.unwrap_or(f64::NAN)
}

/// Message of the last failed call on this thread, or null if none failed.
/// The string stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn llg_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Static, NUL-terminated version string.
#[no_mangle]
pub extern "C" fn llg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds benchmark problem `name` ("radial", "manufactured" or "blowup")
/// on a structured mesh of the given kind and level. A positive
/// `lambda_sq` replaces the problem's exchange constant.
///
/// # Safety
/// `name` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn llg_problem_new(
    name: *const c_char,
    mesh_kind: u32,
    level: u32,
    lambda_sq: f64,
    out: *mut *mut LlgProblem,
) -> LlgStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let kind = problem_kind(name)?;
        let mesh_kind = match mesh_kind {
            LLG_MESH_HALVED => MeshKind::Halved,
            LLG_MESH_CRISS_CROSS => MeshKind::CrissCross,
            k => return Err(fail(LlgStatus::InvalidArgument, format!("unknown mesh kind {k}"))),
        };
        if level > 10 {
            return Err(fail(LlgStatus::InvalidArgument, format!("mesh level {level} exceeds 10")));
        }
        let bench = lift(BenchmarkProblem::by_kind(kind, (lambda_sq > 0.0).then_some(lambda_sq)))?;
        let mesh = lift(build_mesh(&bench.domain, level, mesh_kind))?;
        let problem = lift(Problem::on_mesh(&bench, mesh))?;
        let handle = LlgProblem {
            problem,
            alpha: bench.alpha,
            lambda_sq: bench.lambda_sq,
            final_time: bench.final_time,
        };
        *out = Box::into_raw(Box::new(handle));
        Ok(())
    })
}

/// # Safety
/// `problem` must come from [`llg_problem_new`] and not be freed yet, or be null.
#[no_mangle]
pub unsafe extern "C" fn llg_problem_free(problem: *mut LlgProblem) {
    if !problem.is_null() {
        drop(Box::from_raw(problem));
    }
}

/// Number of mesh vertices, 0 for a null handle.
///
/// # Safety
/// `problem` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn llg_problem_num_nodes(problem: *const LlgProblem) -> usize {
    problem.as_ref().map_or(0, |p| p.problem.mesh().n_vertices())
}

/// Number of triangles, 0 for a null handle.
///
/// # Safety
/// `problem` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn llg_problem_num_triangles(problem: *const LlgProblem) -> usize {
    problem.as_ref().map_or(0, |p| p.problem.mesh().n_triangles())
}

/// Largest element diameter, NaN for a null handle.
///
/// # Safety
/// `problem` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn llg_problem_mesh_size(problem: *const LlgProblem) -> f64 {
    problem.as_ref().map_or(f64::NAN, |p| p.problem.mesh().h())
}

/// Copies the vertex coordinates, `x0 y0 x1 y1 ...`, into `buf`, which
/// must hold `2 * num_nodes` doubles.
///
/// # Safety
/// `buf` must be valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn llg_problem_vertices(problem: *const LlgProblem, buf: *mut f64, len: usize) -> LlgStatus {
    guard(|| {
        non_null(problem, "problem")?;
        non_null(buf, "buf")?;
        let verts = (*problem).problem.mesh().vertices();
        if len < 2 * verts.len() {
            return Err(fail(
                LlgStatus::InvalidArgument,
                format!("buffer holds {len} doubles, {} needed", 2 * verts.len()),
            ));
        }
        let out = std::slice::from_raw_parts_mut(buf, 2 * verts.len());
        for (dst, v) in out.chunks_exact_mut(2).zip(verts) {
            dst.copy_from_slice(v);
        }
        Ok(())
    })
}

/// Options for `steps` steps of `scheme` over the problem's final time,
/// with its damping and exchange constants and the default tolerances.
///
/// # Safety
/// `problem` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn llg_run_options_default(
    problem: *const LlgProblem,
    scheme: u32,
    steps: usize,
    out: *mut LlgRunOptions,
) -> LlgStatus {
    guard(|| {
        non_null(problem, "problem")?;
        non_null(out, "out")?;
        let p = &*problem;
        let cfg = SolverConfig::new(scheme_of(scheme)?, p.alpha, p.lambda_sq, p.final_time, steps);
        *out = LlgRunOptions {
            scheme,
            alpha: cfg.alpha,
            lambda_sq: cfg.lambda_sq,
            tau: cfg.tau,
            steps,
            solver_tolerance: cfg.linear.rel_tolerance,
            fp_tolerance: cfg.midpoint.fp_tolerance,
            fp_max_iterations: cfg.midpoint.fp_max_iterations,
        };
        Ok(())
    })
}

/// Runs the integrator. On success `*out` receives a trajectory holding
/// every state; on a failed time step the status is
/// [`LlgStatus::Numerical`] and `*failed_step` (if not null) the index of
/// that step, otherwise [`LLG_NO_STEP`].
///
/// # Safety
/// `problem` must be a live handle; `options` and `out` valid pointers;
/// `failed_step` valid or null.
#[no_mangle]
pub unsafe extern "C" fn llg_run(
    problem: *const LlgProblem,
    options: *const LlgRunOptions,
    out: *mut *mut LlgTrajectory,
    failed_step: *mut i64,
) -> LlgStatus {
    guard(|| {
        if !failed_step.is_null() {
            *failed_step = LLG_NO_STEP;
        }
        non_null(out, "out")?;
        *out = ptr::null_mut();
        non_null(problem, "problem")?;
        non_null(options, "options")?;
        let o = *options;
        let mut cfg = SolverConfig::with_tau(scheme_of(o.scheme)?, o.alpha, o.lambda_sq, o.tau, o.steps);
        cfg.linear.rel_tolerance = o.solver_tolerance;
        cfg.midpoint.fp_tolerance = o.fp_tolerance;
        cfg.midpoint.fp_max_iterations = o.fp_max_iterations;
        match run_simulation(&(*problem).problem, &cfg) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(LlgTrajectory { inner }));
                Ok(())
            }
            Err(e) => {
                if let (Some(step), false) = (e.step_index(), failed_step.is_null()) {
                    *failed_step = step as i64;
                }
                Err(fail(status_of(&e), e.to_string()))
            }
        }
    })
}

/// # Safety
/// `traj` must come from [`llg_run`] and not be freed yet, or be null.
#[no_mangle]
pub unsafe extern "C" fn llg_trajectory_free(traj: *mut LlgTrajectory) {
    if !traj.is_null() {
        drop(Box::from_raw(traj));
    }
}

/// Number of time steps `N`; states are indexed `0..=N`.
///
/// # Safety
/// `traj` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn llg_trajectory_steps(traj: *const LlgTrajectory) -> usize {
    traj.as_ref().map_or(0, |t| t.inner.steps())
}

/// Copies `m^j` into `buf` as `x y z` per node (`3 * num_nodes` doubles).
///
/// # Safety
/// `traj` must be a live handle and `buf` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn llg_trajectory_state(
    traj: *const LlgTrajectory,
    j: usize,
    buf: *mut f64,
    len: usize,
) -> LlgStatus {
    guard(|| {
        non_null(traj, "trajectory")?;
        non_null(buf, "buf")?;
        let t = &(*traj).inner;
        let state = t
            .state(j)
            .ok_or_else(|| fail(LlgStatus::InvalidArgument, format!("no state at step {j} (N = {})", t.steps())))?;
        let flat = state.to_flat();
        if len < flat.len() {
            return Err(fail(
                LlgStatus::InvalidArgument,
                format!("buffer holds {len} doubles, {} needed", flat.len()),
            ));
        }
        std::slice::from_raw_parts_mut(buf, flat.len()).copy_from_slice(&flat);
        Ok(())
    })
}

/// Observables of `m^j`.
///
/// # Safety
/// `traj` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn llg_trajectory_record(
    traj: *const LlgTrajectory,
    j: usize,
    out: *mut LlgStepRecord,
) -> LlgStatus {
    guard(|| {
        non_null(traj, "trajectory")?;
        non_null(out, "out")?;
        let records = (*traj).inner.records();
        let r = records
            .get(j)
            .ok_or_else(|| fail(LlgStatus::InvalidArgument, format!("no record at step {j}")))?;
        *out = LlgStepRecord {
            j: r.j,
            t: r.t,
            energy: r.energy,
            h1_semi: r.h1_semi,
            w1inf_semi: r.w1inf_semi,
            linf_nodal: r.linf_nodal,
            nodal_l1_dev: r.nodal_l1_dev,
            quad_l1_dev: r.quad_l1_dev,
            v_norm_sq: nan_or(r.v_norm_sq),
            energy_identity_residual: nan_or(r.energy_identity_residual),
            linear_iterations: r.linear_iterations,
            fixed_point_sweeps: r.fixed_point_sweeps,
        };
        Ok(())
    })
}

/// # Safety
/// `traj` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn llg_trajectory_diagnostics(traj: *const LlgTrajectory, out: *mut LlgDiagnostics) -> LlgStatus {
    guard(|| {
        non_null(traj, "trajectory")?;
        non_null(out, "out")?;
        let d = (*traj).inner.diagnostics();
        *out = LlgDiagnostics {
            v0_norm_sq: d.v0_norm_sq,
            d2_sum: d.d2_sum,
            eta0: d.eta0,
            eta_n: d.eta_n,
            cfl_c: d.cfl_c,
            max_energy_identity_residual: nan_or(d.max_energy_identity_residual),
            max_constraint_law_residual: nan_or(d.max_constraint_law_residual),
            max_velocity_identity_residual: d.max_velocity_identity_residual,
            min_nodal_modulus: d.min_nodal_modulus,
            modulus_nondecreasing: d.modulus_nondecreasing,
            max_fixed_point_sweeps: d.max_fixed_point_sweeps,
            total_linear_iterations: d.total_linear_iterations,
        };
        Ok(())
    })
}

/// Per-step CSV table of the run, released with [`llg_string_free`].
/// Null on failure.
///
/// # Safety
/// `traj` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn llg_trajectory_csv(traj: *const LlgTrajectory) -> *mut c_char {
    let mut result = ptr::null_mut();
    guard(|| {
        non_null(traj, "trajectory")?;
        let csv = CString::new((*traj).inner.to_csv()).map_err(|e| fail(LlgStatus::InvalidArgument, e.to_string()))?;
        result = csv.into_raw();
        Ok(())
    });
    result
}

/// # Safety
/// `s` must come from this library and not be freed yet, or be null.
#[no_mangle]
pub unsafe extern "C" fn llg_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn panics_become_status() {
        let status = guard(|| panic!("boom"));
        assert_eq!(status, LlgStatus::Panic);
        let msg = unsafe { CStr::from_ptr(llg_last_error_message()) };
        assert!(msg.to_str().unwrap().contains("boom"));
    }

    #[test]
    fn error_kinds_map_to_codes() {
        assert_eq!(status_of(&Error::InvalidConfig("x".into())), LlgStatus::InvalidConfig);
        assert_eq!(status_of(&Error::SolverDiverged { iterations: 1, residual: 1.0 }), LlgStatus::Numerical);
        assert_eq!(status_of(&Error::InvalidArgument("x".into())), LlgStatus::InvalidArgument);
    }

    #[test]
    fn scheme_codes_round_trip() {
        assert_eq!(scheme_of(LLG_SCHEME_BDF2), Ok(Scheme::Bdf2));
        assert_eq!(scheme_of(LLG_SCHEME_MIDPOINT), Ok(Scheme::Mid));
        assert_eq!(scheme_of(7), Err(LlgStatus::InvalidArgument));
    }
}
