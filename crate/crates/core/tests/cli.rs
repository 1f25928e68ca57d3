use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn llgfem(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_llgfem"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn run_writes_one_row_per_time_node() {
    let dir = tempfile::tempdir().unwrap();
    let o = llgfem(&["run", "--problem", "radial", "--level", "2", "--tau", "4e-3", "--steps", "30"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("trajectory_bdf2.csv")).unwrap();
    let mut lines = csv.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("j,t,"));
    assert_eq!(lines.count(), 31);

    let summary = fs::read_to_string(dir.path().join("summary_bdf2.csv")).unwrap();
    let value = |key: &str| -> f64 {
        let line = summary.lines().find(|l| l.starts_with(&format!("{key},"))).unwrap();
        line.split(',').nth(1).unwrap().parse().unwrap()
    };
    assert_eq!(value("steps"), 30.0);
    assert!(value("max_energy_identity_residual") < 1e-8);
    assert!(value("max_constraint_law_residual") < 1e-10);
}

#[test]
fn floats_carry_seventeen_significant_digits() {
    let dir = tempfile::tempdir().unwrap();
    let o = llgfem(&["run", "--problem", "radial", "--level", "1", "--steps", "4", "--tau", "0.01"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("trajectory_bdf2.csv")).unwrap();
    let row = csv.lines().nth(2).unwrap();
    let t = row.split(',').nth(1).unwrap();
    assert_eq!(t, "1.0000000000000000e-2");
}

#[test]
fn identical_configs_give_identical_bytes() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let args = ["cfl", "--problem", "blowup", "--level", "2", "--tau-rule", "h/2,h/5", "--jobs", "2"];
    let (oa, ob) = (llgfem(&args, a.path()), llgfem(&args, b.path()));
    assert!(oa.status.success() && ob.status.success(), "{}", stderr(&oa));
    let name = fs::read_dir(a.path()).unwrap().next().unwrap().unwrap().file_name();
    assert_eq!(fs::read(a.path().join(&name)).unwrap(), fs::read(b.path().join(&name)).unwrap());
}

#[test]
fn zero_steps_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = llgfem(&["run", "--problem", "radial", "--steps", "0"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("steps"));
}

#[test]
fn bad_values_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["run", "--problem", "vortex"][..],
        &["run", "--scheme", "rk4"],
        &["run", "--alpha", "-1"],
        &["run", "--solver-tol", "2"],
        &["run", "--jobs", "0"],
        &["run", "--mesh", "hexagonal"],
        &["conv-time", "--taus", "0.1,-0.1"],
        &["cfl", "--tau-rule", "h^"],
        &["run", "--no-such-flag"],
    ] {
        let o = llgfem(args, dir.path());
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn failed_step_exits_with_three_and_names_the_step() {
    let dir = tempfile::tempdir().unwrap();
    // two fixed-point sweeps cannot reach the tolerance
    let cfg = dir.path().join("mid.toml");
    fs::write(&cfg, "problem = 'radial'\nschemes = ['mid']\nlevel = 1\nsteps = 3\n\n[midpoint]\nmax_iterations = 2\n").unwrap();
    let o = llgfem(&["run", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("failed step: 1"), "{}", stderr(&o));
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("study.toml");
    fs::write(&cfg, "problem = 'radial'\nschemes = ['tps']\nlevel = 1\nsteps = 7\ntau = 0.01\n").unwrap();
    let o = llgfem(&["run", "--config", cfg.to_str().unwrap(), "--steps", "5"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("trajectory_tps.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6);

    fs::write(&cfg, "problem = 'radial'\nstep = 3\n").unwrap();
    let o = llgfem(&["run", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn single_step_ladder_has_no_orders() {
    let dir = tempfile::tempdir().unwrap();
    let o = llgfem(&["conv-time", "--problem", "radial", "--level", "1", "--taus", "0.02"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("conv_time_bdf2.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[1].ends_with(",,"), "{}", rows[1]);
}

#[test]
fn orders_are_recomputable_from_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = llgfem(
        &["constraint", "--problem", "radial", "--level", "2", "--tau", "0.02", "--bisections", "2", "--scheme", "bdf2"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("constraint_bdf2.csv")).unwrap();
    let rows: Vec<Vec<f64>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|x| x.parse().unwrap_or(f64::NAN)).collect())
        .collect();
    assert_eq!(rows.len(), 3);
    for w in rows.windows(2) {
        let expected = (w[1][2] / w[0][2]).ln() / (w[1][0] / w[0][0]).ln();
        assert!((w[1][4] - expected).abs() < 1e-12, "{} vs {expected}", w[1][4]);
    }
    assert!(dir.path().join("bounds.csv").exists());
}
