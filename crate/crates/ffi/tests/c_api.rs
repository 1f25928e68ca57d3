use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use llgfem_ffi::*;

fn last_error() -> String {
    let p = llg_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn problem(name: &str, mesh: u32, level: u32) -> *mut LlgProblem {
    let name = CString::new(name).unwrap();
    let mut p = ptr::null_mut();
    let status = unsafe { llg_problem_new(name.as_ptr(), mesh, level, 0.0, &mut p) };
    assert_eq!(status, LlgStatus::Ok, "{}", last_error());
    p
}

#[test]
fn radial_run_round_trip() {
    let p = problem("radial", LLG_MESH_HALVED, 2);
    let nodes = unsafe { llg_problem_num_nodes(p) };
    assert_eq!(nodes, 25);
    assert_eq!(unsafe { llg_problem_num_triangles(p) }, 32);

    let mut verts = vec![0.0; 2 * nodes];
    assert_eq!(unsafe { llg_problem_vertices(p, verts.as_mut_ptr(), verts.len()) }, LlgStatus::Ok);
    assert!(verts.iter().all(|&x| (0.0..=1.0).contains(&x)));

    let mut opts = LlgRunOptions {
        scheme: 0,
        alpha: 0.0,
        lambda_sq: 0.0,
        tau: 0.0,
        steps: 0,
        solver_tolerance: 0.0,
        fp_tolerance: 0.0,
        fp_max_iterations: 0,
    };
    assert_eq!(unsafe { llg_run_options_default(p, LLG_SCHEME_BDF2, 10, &mut opts) }, LlgStatus::Ok);
    assert_eq!(opts.steps, 10);
    assert!(opts.tau > 0.0 && opts.alpha > 0.0);

    let mut traj = ptr::null_mut();
    let mut failed = 0i64;
    let status = unsafe { llg_run(p, &opts, &mut traj, &mut failed) };
    assert_eq!(status, LlgStatus::Ok, "{}", last_error());
    assert_eq!(failed, LLG_NO_STEP);
    assert_eq!(unsafe { llg_trajectory_steps(traj) }, 10);

    // the BDF2 update never shrinks nodal moduli
    let mut state = vec![0.0; 3 * nodes];
    assert_eq!(unsafe { llg_trajectory_state(traj, 10, state.as_mut_ptr(), state.len()) }, LlgStatus::Ok);
    for v in state.chunks_exact(3) {
        let modulus = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        assert!(modulus >= 1.0 - 1e-12);
    }

    let mut first = LlgStepRecord::default();
    let mut last = LlgStepRecord::default();
    unsafe {
        assert_eq!(llg_trajectory_record(traj, 0, &mut first), LlgStatus::Ok);
        assert_eq!(llg_trajectory_record(traj, 10, &mut last), LlgStatus::Ok);
    }
    assert!(first.v_norm_sq.is_nan());
    assert!(last.v_norm_sq >= 0.0);
    assert!((last.t - 10.0 * opts.tau).abs() < 1e-14);

    let mut diag = LlgDiagnostics::default();
    assert_eq!(unsafe { llg_trajectory_diagnostics(traj, &mut diag) }, LlgStatus::Ok);
    assert!(diag.modulus_nondecreasing);
    assert!(diag.max_energy_identity_residual < 1e-10);

    let csv = unsafe { llg_trajectory_csv(traj) };
    assert!(!csv.is_null());
    let lines = unsafe { CStr::from_ptr(csv) }.to_str().unwrap().lines().count();
    assert_eq!(lines, 1 + 11);
    unsafe {
        llg_string_free(csv);
        llg_trajectory_free(traj);
        llg_problem_free(p);
    }
}

#[test]
fn bad_input_is_reported() {
    let mut p = ptr::null_mut();
    let name = CString::new("vortex").unwrap();
    let status = unsafe { llg_problem_new(name.as_ptr(), LLG_MESH_HALVED, 2, 0.0, &mut p) };
    assert_eq!(status, LlgStatus::InvalidConfig);
    assert!(p.is_null());
    assert!(last_error().contains("vortex"));

    let status = unsafe { llg_problem_new(ptr::null(), LLG_MESH_HALVED, 2, 0.0, &mut p) };
    assert_eq!(status, LlgStatus::NullPointer);

    let p = problem("manufactured", LLG_MESH_CRISS_CROSS, 1);
    let mut opts = LlgRunOptions {
        scheme: 0,
        alpha: 0.0,
        lambda_sq: 0.0,
        tau: 0.0,
        steps: 0,
        solver_tolerance: 0.0,
        fp_tolerance: 0.0,
        fp_max_iterations: 0,
    };
    assert_eq!(unsafe { llg_run_options_default(p, 9, 4, &mut opts) }, LlgStatus::InvalidArgument);
    assert_eq!(unsafe { llg_run_options_default(p, LLG_SCHEME_TPS, 4, &mut opts) }, LlgStatus::Ok);

    opts.steps = 0;
    let mut traj = ptr::null_mut();
    let mut failed = 0i64;
    assert_eq!(unsafe { llg_run(p, &opts, &mut traj, &mut failed) }, LlgStatus::InvalidConfig);
    assert!(traj.is_null());
    assert_eq!(failed, LLG_NO_STEP);

    opts.steps = 4;
    assert_eq!(unsafe { llg_run(p, &opts, &mut traj, ptr::null_mut()) }, LlgStatus::Ok);
    let mut small = [0.0; 3];
    assert_eq!(
        unsafe { llg_trajectory_state(traj, 0, small.as_mut_ptr(), small.len()) },
        LlgStatus::InvalidArgument
    );
    assert_eq!(
        unsafe { llg_trajectory_state(traj, 5, small.as_mut_ptr(), small.len()) },
        LlgStatus::InvalidArgument
    );
    unsafe {
        llg_trajectory_free(traj);
        llg_problem_free(p);
        llg_problem_free(ptr::null_mut());
    }
}

#[test]
fn diverging_midpoint_reports_the_step() {
    // tau = h on the blow-up datum: the fixed-point map is not a contraction
    let p = problem("blowup", LLG_MESH_HALVED, 3);
    let h = unsafe { llg_problem_mesh_size(p) };
    let mut opts = LlgRunOptions {
        scheme: 0,
        alpha: 0.0,
        lambda_sq: 0.0,
        tau: 0.0,
        steps: 0,
        solver_tolerance: 0.0,
        fp_tolerance: 0.0,
        fp_max_iterations: 0,
    };
    assert_eq!(unsafe { llg_run_options_default(p, LLG_SCHEME_MIDPOINT, 4, &mut opts) }, LlgStatus::Ok);
    opts.tau = h;
    let mut traj = ptr::null_mut();
    let mut failed = LLG_NO_STEP;
    let status = unsafe { llg_run(p, &opts, &mut traj, &mut failed) };
    assert_eq!(status, LlgStatus::Numerical, "{}", last_error());
    assert!(traj.is_null());
    assert!(failed >= 1, "failed step {failed}");
    unsafe { llg_problem_free(p) };
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(llg_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

const C_PROGRAM: &str = r#"
#include <math.h>
#include <stdio.h>
#include <stdlib.h>
#include "llgfem.h"

int main(void) {
    LlgProblem *p = NULL;
    if (llg_problem_new("radial", LLG_MESH_HALVED, 2, 0.0, &p) != LLG_STATUS_OK) return 10;
    LlgRunOptions opts;
    if (llg_run_options_default(p, LLG_SCHEME_TPS, 5, &opts) != LLG_STATUS_OK) return 11;
    LlgTrajectory *t = NULL;
    int64_t failed = 0;
    if (llg_run(p, &opts, &t, &failed) != LLG_STATUS_OK || failed != LLG_NO_STEP) return 12;
    LlgStepRecord r;
    if (llg_trajectory_record(t, 5, &r) != LLG_STATUS_OK) return 13;
    if (!isfinite(r.energy) || fabs(r.t - 5 * opts.tau) > 1e-14) return 14;
    if (llg_problem_new("nope", 0, 2, 0.0, &p) != LLG_STATUS_INVALID_CONFIG) return 15;
    if (llg_last_error_message() == NULL) return 16;
    printf("%zu %.6f\n", llg_trajectory_steps(t), r.energy);
    llg_trajectory_free(t);
    return 0;
}
"#;

/// Compiles a C client against the generated header and the static
/// library. Skipped when no C compiler or no static archive is around.
#[test]
fn c_client_links_against_header() {
    let crate_dir = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let header = crate_dir.join("include").join("llgfem.h");
    assert!(header.exists(), "header not generated");

    // target/<profile>/deps/<test exe>
    let profile_dir = std::env::current_exe().unwrap().parent().unwrap().parent().unwrap().to_path_buf();
    let archive = profile_dir.join("libllgfem_ffi.a");
    if !archive.exists() {
        eprintln!("skipping: {} not built", archive.display());
        return;
    }
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    if Command::new(&cc).arg("--version").output().is_err() {
        eprintln!("skipping: no C compiler");
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("client.c");
    let exe = dir.path().join("client");
    std::fs::write(&src, C_PROGRAM).unwrap();
    let out = Command::new(&cc)
        .args(["-std=c11", "-Wall", "-Werror", "-o"])
        .arg(&exe)
        .arg(&src)
        .arg("-I")
        .arg(crate_dir.join("include"))
        .arg(&archive)
        .args(["-lpthread", "-ldl", "-lm"])
        .output()
        .unwrap();
    assert!(out.status.success(), "compile failed:\n{}", String::from_utf8_lossy(&out.stderr));
    let run = Command::new(&exe).output().unwrap();
    assert!(run.status.success(), "client exited with {:?}", run.status.code());
    assert!(String::from_utf8_lossy(&run.stdout).starts_with("5 "));
}
