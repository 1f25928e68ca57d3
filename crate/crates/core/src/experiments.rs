//! Study drivers: single runs, time and space convergence sweeps, the
//! constraint-deviation study and the CFL indicator ladder, with their
//! CSV tables.
//!
//! Sweep points are independent and run on a pool of `jobs` threads;
//! results are always merged in ladder order, so output does not depend
//! on scheduling.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::fem::FemSpace;
use crate::integrators::{run_simulation, MidpointConfig, Problem, Retention, Scheme, SolverConfig, Trajectory};
use crate::mesh::{bisect_uniform, build_structured_mesh, refine_uniform_with_parents, Mesh, SquareDomain};
use crate::observables::{eoc, error_vs_exact, error_vs_prolonged, error_vs_reference, stagnation_onset, ErrorNorm};
use crate::problems::{BenchmarkProblem, ProblemKind};
use crate::solver::{LinearSolveConfig, SolverMethod};

/// Floats in every table are written with 17 significant digits.
fn num(x: f64) -> String {
    format!("{x:.16e}")
}

fn opt_num(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}

/// How a structured square mesh is triangulated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MeshKind {
    /// `2^l x 2^l` squares halved along one diagonal.
    #[default]
    Halved,
    /// The halved mesh after one longest-edge bisection sweep: every
    /// square is cut by both diagonals (`4^(l+1)` triangles, `h = side 2^-l`).
    CrissCross,
}

impl FromStr for MeshKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "halved" => Ok(Self::Halved),
            "criss-cross" | "crisscross" | "bisected" => Ok(Self::CrissCross),
            _ => Err(config_err(format!("unknown mesh kind '{s}' (expected halved or criss-cross)"))),
        }
    }
}

impl fmt::Display for MeshKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Halved => "halved",
            Self::CrissCross => "criss-cross",
        })
    }
}

pub fn build_mesh(domain: &SquareDomain, level: u32, kind: MeshKind) -> Result<Mesh> {
    let halved = build_structured_mesh(domain, level);
    match kind {
        MeshKind::Halved => Ok(halved),
        MeshKind::CrissCross => Ok(bisect_uniform(&halved)?.mesh),
    }
}

/// Number of steps of size `tau` that fit into `final_time`. An integer
/// ratio (up to roundoff) is used as is; otherwise the ratio is rounded
/// down, keeping `tau` and stopping at `N tau < final_time`.
pub fn steps_for(final_time: f64, tau: f64) -> Result<usize> {
    if !(tau > 0.0 && tau.is_finite() && final_time > 0.0 && final_time.is_finite()) {
        return Err(config_err(format!("time step {tau} and final time {final_time} must be positive")));
    }
    let ratio = final_time / tau;
    let nearest = ratio.round();
    let n = if (ratio - nearest).abs() <= 1e-9 * ratio { nearest } else { ratio.floor() };
    if n < 1.0 {
        return Err(config_err(format!("time step {tau} exceeds the final time {final_time}")));
    }
    Ok(n as usize)
}

/// `tau = coefficient * h^exponent`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TauRule {
    pub coefficient: f64,
    pub exponent: f64,
}

impl TauRule {
    pub fn eval(&self, h: f64) -> f64 {
        self.coefficient * h.powf(self.exponent)
    }

    /// `h, h/2, h/5, h/10, h/50, h/100`
    pub fn fractions() -> Vec<TauRule> {
        [1.0, 2.0, 5.0, 10.0, 50.0, 100.0]
            .iter()
            .map(|d| TauRule { coefficient: 1.0 / d, exponent: 1.0 })
            .collect()
    }

    /// `h^(1/2), h, h^(3/2), h^2, h^(5/2)`
    pub fn powers() -> Vec<TauRule> {
        [0.5, 1.0, 1.5, 2.0, 2.5]
            .iter()
            .map(|&a| TauRule { coefficient: 1.0, exponent: a })
            .collect()
    }

    /// A named ladder (`fractions`, `powers`) or a comma-separated list.
    pub fn parse_ladder(s: &str) -> Result<Vec<TauRule>> {
        match s.trim() {
            "fractions" => Ok(Self::fractions()),
            "powers" => Ok(Self::powers()),
            list => list.split(',').map(str::parse).collect(),
        }
    }
}

/// Accepts `[c*]h[^a][/d]`, e.g. `h/10`, `h^2/10`, `0.5*h^1.5`.
impl FromStr for TauRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || config_err(format!("cannot parse time-step rule '{s}' (expected e.g. h/10 or 0.1*h^2)"));
        let number = |t: &str| t.trim().parse::<f64>().ok().filter(|x| x.is_finite() && *x > 0.0);
        let compact: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        let (head, divisor) = match compact.split_once('/') {
            Some((a, d)) => (a, number(d).ok_or_else(bad)?),
            None => (compact.as_str(), 1.0),
        };
        let (coefficient, power) = match head.split_once('*') {
            Some((c, p)) => (number(c).ok_or_else(bad)?, p),
            None => (1.0, head),
        };
        let exponent = match power.strip_prefix('h').ok_or_else(bad)? {
            "" => 1.0,
            rest => {
                let a = rest.strip_prefix('^').ok_or_else(bad)?.trim().parse::<f64>().map_err(|_| bad())?;
                if !a.is_finite() {
                    return Err(bad());
                }
                a
            }
        };
        Ok(TauRule { coefficient: coefficient / divisor, exponent })
    }
}

impl fmt::Display for TauRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.coefficient != 1.0 {
            write!(f, "{}*", self.coefficient)?;
        }
        f.write_str("h")?;
        if self.exponent != 1.0 {
            write!(f, "^{}", self.exponent)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub method: Option<String>,
    pub tolerance: Option<f64>,
    pub max_iterations: Option<usize>,
    pub dense_threshold: Option<usize>,
    pub restart: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MidpointSection {
    pub tolerance: Option<f64>,
    pub max_iterations: Option<usize>,
}

/// Everything a study can be told. Unset fields fall back to defaults
/// that depend on the command and the problem. The file form is TOML with
/// the same keys plus `[solver]` and `[midpoint]` sections.
#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub problem: Option<String>,
    pub schemes: Option<Vec<String>>,
    pub mesh: Option<String>,
    pub level: Option<u32>,
    pub levels: Option<Vec<u32>>,
    pub tau: Option<f64>,
    pub taus: Option<Vec<f64>>,
    pub tau_rule: Option<String>,
    pub bisections: Option<u32>,
    pub steps: Option<usize>,
    pub alpha: Option<f64>,
    pub lambda_sq: Option<f64>,
    pub final_time: Option<f64>,
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub full: Option<bool>,
    /// Unused by the deterministic core; kept so configs can carry one.
    pub seed: Option<u64>,
    pub solver: SolverSection,
    pub midpoint: MidpointSection,
}

macro_rules! overlay {
    ($base:ident, $top:ident; $($field:ident),*) => {
        $( if $top.$field.is_some() { $base.$field = $top.$field; } )*
    };
}

impl StudyConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| config_err(format!("config file: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Fields set in `top` replace those of `self`.
    pub fn overlaid(mut self, top: StudyConfig) -> Self {
        overlay!(self, top; problem, schemes, mesh, level, levels, tau, taus, tau_rule, bisections, steps,
            alpha, lambda_sq, final_time, out, jobs, full, seed);
        let (s, t) = (&mut self.solver, top.solver);
        overlay!(s, t; method, tolerance, max_iterations, dense_threshold, restart);
        let (m, t) = (&mut self.midpoint, top.midpoint);
        overlay!(m, t; tolerance, max_iterations);
        self
    }

    pub fn problem_kind(&self) -> Result<ProblemKind> {
        self.problem.as_deref().unwrap_or("radial").parse()
    }

    pub fn scheme_list(&self, default: &[Scheme]) -> Result<Vec<Scheme>> {
        match &self.schemes {
            None => Ok(default.to_vec()),
            Some(list) if list.is_empty() => Err(config_err("empty scheme list")),
            Some(list) => list.iter().map(|s| s.parse()).collect(),
        }
    }

    pub fn mesh_kind(&self, default: MeshKind) -> Result<MeshKind> {
        self.mesh.as_deref().map_or(Ok(default), str::parse)
    }

    pub fn is_full(&self) -> bool {
        self.full.unwrap_or(false)
    }

    pub fn jobs(&self) -> Result<usize> {
        match self.jobs {
            Some(0) => Err(config_err("--jobs must be at least 1")),
            Some(j) => Ok(j),
            None => Ok(1),
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("results"))
    }

    /// The benchmark with `alpha`, `lambda_sq` and `final_time` overrides.
    pub fn benchmark(&self) -> Result<BenchmarkProblem> {
        let mut bench = BenchmarkProblem::by_kind(self.problem_kind()?, self.lambda_sq)?;
        if let Some(a) = self.alpha {
            bench.alpha = a;
        }
        if let Some(t) = self.final_time {
            if !(t > 0.0 && t.is_finite()) {
                return Err(config_err(format!("final time {t} must be positive")));
            }
            bench.final_time = t;
        }
        Ok(bench)
    }

    pub fn linear(&self) -> Result<LinearSolveConfig> {
        let mut cfg = LinearSolveConfig::default();
        if let Some(m) = &self.solver.method {
            cfg.method = m.parse::<SolverMethod>()?;
        }
        if let Some(t) = self.solver.tolerance {
            cfg.rel_tolerance = t;
        }
        if self.solver.max_iterations.is_some() {
            cfg.max_iterations = self.solver.max_iterations;
        }
        if let Some(d) = self.solver.dense_threshold {
            cfg.dense_threshold = d;
        }
        if let Some(r) = self.solver.restart {
            cfg.restart = r;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn midpoint_config(&self) -> MidpointConfig {
        let mut cfg = MidpointConfig::default();
        if let Some(t) = self.midpoint.tolerance {
            cfg.fp_tolerance = t;
        }
        if let Some(n) = self.midpoint.max_iterations {
            cfg.fp_max_iterations = n;
        }
        cfg
    }

    fn solver_config(&self, bench: &BenchmarkProblem, scheme: Scheme, tau: f64, steps: usize) -> Result<SolverConfig> {
        let mut cfg = SolverConfig::with_tau(scheme, bench.alpha, bench.lambda_sq, tau, steps);
        cfg.linear = self.linear()?;
        cfg.midpoint = self.midpoint_config();
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Maps `f` over `items` on `jobs` threads and returns the results in
/// input order; the first error in that order wins.
fn par_map<T, R, F>(jobs: usize, items: &[T], f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync + Send,
{
    let results: Vec<Result<R>> = if jobs <= 1 {
        items.iter().map(&f).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| config_err(format!("cannot start {jobs} worker threads: {e}")))?;
        pool.install(|| items.par_iter().map(&f).collect())
    };
    results.into_iter().collect()
}

fn problem_on(bench: &BenchmarkProblem, mesh: Mesh) -> Result<Problem> {
    Problem::from_benchmark(bench, Arc::new(FemSpace::new(Arc::new(mesh))))
}

/// Time step of a single run: `tau`, else a rule in `h`, else
/// `final_time / steps`, else the problem's default.
fn run_tau(cfg: &StudyConfig, bench: &BenchmarkProblem, h: f64) -> Result<f64> {
    if let Some(t) = cfg.tau {
        return Ok(t);
    }
    if let Some(rule) = &cfg.tau_rule {
        let rules = TauRule::parse_ladder(rule)?;
        return match rules.as_slice() {
            [r] => Ok(r.eval(h)),
            _ => Err(config_err("a single run takes exactly one time-step rule")),
        };
    }
    if let Some(n) = cfg.steps {
        if n == 0 {
            return Err(config_err("the number of steps must be at least 1"));
        }
        return Ok(bench.final_time / n as f64);
    }
    Ok(match bench.kind {
        ProblemKind::Radial => 4e-3,
        ProblemKind::Manufactured => 5e-4,
        ProblemKind::Blowup => h / 10.0,
    })
}

/// One simulation per requested scheme (default BDF2) on a single mesh.
pub fn cmd_run(cfg: &StudyConfig) -> Result<Vec<Trajectory>> {
    let bench = cfg.benchmark()?;
    let schemes = cfg.scheme_list(&[Scheme::Bdf2])?;
    let level = cfg.level.unwrap_or(3);
    let mesh = build_mesh(&bench.domain, level, cfg.mesh_kind(MeshKind::Halved)?)?;
    let tau = run_tau(cfg, &bench, mesh.h())?;
    let steps = match cfg.steps {
        Some(n) => n,
        None => steps_for(bench.final_time, tau)?,
    };
    let problem = problem_on(&bench, mesh)?;
    let configs = schemes
        .iter()
        .map(|&s| cfg.solver_config(&bench, s, tau, steps))
        .collect::<Result<Vec<_>>>()?;
    par_map(cfg.jobs()?, &configs, |c| run_simulation(&problem, c))
}

/// Key/value summary of a run: parameters, final observables and the
/// online diagnostics.
pub fn run_summary_csv(traj: &Trajectory) -> String {
    let d = traj.diagnostics();
    let last = traj.records().last().expect("a trajectory has at least one record");
    let mut rows: Vec<(&str, String)> = vec![
        ("scheme", traj.scheme().to_string()),
        ("nodes", traj.space().n_nodes().to_string()),
        ("h", num(traj.mesh().h())),
        ("tau", num(traj.tau())),
        ("steps", traj.steps().to_string()),
        ("final_time", num(traj.final_time())),
        ("final_energy", num(last.energy)),
        ("final_h1_semi", num(last.h1_semi)),
        ("final_nodal_l1_dev", num(last.nodal_l1_dev)),
        ("v0_norm_sq", num(d.v0_norm_sq)),
        ("d2_sum", num(d.d2_sum)),
        ("eta0", num(d.eta0)),
        ("eta_n", num(d.eta_n)),
        ("cfl_c", num(d.cfl_c)),
        ("max_energy_identity_residual", opt_num(d.max_energy_identity_residual)),
        ("max_constraint_law_residual", opt_num(d.max_constraint_law_residual)),
        ("max_constraint_recursion_residual", opt_num(d.max_constraint_recursion_residual)),
        ("max_velocity_identity_residual", num(d.max_velocity_identity_residual)),
        ("norm_equivalence_lower", num(d.norm_equivalence_lower)),
        ("norm_equivalence_upper", num(d.norm_equivalence_upper)),
        ("norm_equivalence_grad_lower", num(d.norm_equivalence_grad_lower)),
        ("norm_equivalence_grad_upper", num(d.norm_equivalence_grad_upper)),
        ("inverse_estimate", num(d.inverse_estimate)),
        ("inverse_estimate_grad", num(d.inverse_estimate_grad)),
        ("first_step_bound", num(d.first_step_bound)),
        ("energy_estimate", opt_num(d.energy_estimate)),
        ("gradient_bound_max", num(d.gradient_bound_max)),
        ("min_nodal_modulus", num(d.min_nodal_modulus)),
        ("modulus_nondecreasing", d.modulus_nondecreasing.to_string()),
        ("max_fixed_point_sweeps", d.max_fixed_point_sweeps.to_string()),
        ("total_linear_iterations", d.total_linear_iterations.to_string()),
    ];
    rows.retain(|(_, v)| !v.is_empty());
    let mut s = String::from("key,value\n");
    for (k, v) in rows {
        let _ = writeln!(s, "{k},{v}");
    }
    s
}

/// One refinement of a convergence study; `eoc_*` compares with the
/// previous row.
#[derive(Clone, Debug, PartialEq)]
pub struct StudyRow {
    pub resolution: f64,
    pub error_l2: f64,
    pub error_h1: f64,
    pub eoc_l2: Option<f64>,
    pub eoc_h1: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceTable {
    pub scheme: Scheme,
    pub rows: Vec<StudyRow>,
    /// Row index of the first order below half of the expected one.
    pub stagnation_l2: Option<usize>,
    pub stagnation_h1: Option<usize>,
}

impl ConvergenceTable {
    fn new(scheme: Scheme, errors: &[(f64, f64, f64)], target_l2: f64, target_h1: f64) -> Result<Self> {
        let orders = |pick: fn(&(f64, f64, f64)) -> f64| -> Result<Vec<Option<f64>>> {
            if errors.len() < 2 {
                return Ok(Vec::new());
            }
            eoc(&errors.iter().map(|e| (e.0, pick(e))).collect::<Vec<_>>())
        };
        let o2 = orders(|e| e.1)?;
        let o1 = orders(|e| e.2)?;
        let rows = errors
            .iter()
            .enumerate()
            .map(|(k, &(resolution, error_l2, error_h1))| StudyRow {
                resolution,
                error_l2,
                error_h1,
                eoc_l2: if k == 0 { None } else { o2[k - 1] },
                eoc_h1: if k == 0 { None } else { o1[k - 1] },
            })
            .collect();
        Ok(Self {
            scheme,
            rows,
            stagnation_l2: stagnation_onset(&o2, target_l2).map(|k| k + 1),
            stagnation_h1: stagnation_onset(&o1, target_h1).map(|k| k + 1),
        })
    }

    pub fn eoc_l2(&self) -> Vec<Option<f64>> {
        self.rows.iter().skip(1).map(|r| r.eoc_l2).collect()
    }

    pub fn eoc_h1(&self) -> Vec<Option<f64>> {
        self.rows.iter().skip(1).map(|r| r.eoc_h1).collect()
    }

    /// Columns `resolution,error_l2,error_h1,eoc_l2,eoc_h1`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("resolution,error_l2,error_h1,eoc_l2,eoc_h1\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                num(r.resolution),
                num(r.error_l2),
                num(r.error_h1),
                opt_num(r.eoc_l2),
                opt_num(r.eoc_h1)
            );
        }
        s
    }
}

fn expected_time_order(scheme: Scheme) -> f64 {
    match scheme {
        Scheme::Tps => 1.0,
        Scheme::Bdf2 | Scheme::Mid => 2.0,
    }
}

/// `tau0 2^-k` for `k = 0..=bisections`.
fn halving_ladder(tau0: f64, bisections: u32) -> Vec<f64> {
    (0..=bisections).map(|k| tau0 * 0.5f64.powi(k as i32)).collect()
}

fn time_ladder(cfg: &StudyConfig, tau0: f64, bisections: u32) -> Result<Vec<f64>> {
    let taus = match &cfg.taus {
        Some(t) => t.clone(),
        None => halving_ladder(cfg.tau.unwrap_or(tau0), cfg.bisections.unwrap_or(bisections)),
    };
    if taus.is_empty() || taus.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
        return Err(config_err("the time-step ladder must be nonempty and positive"));
    }
    Ok(taus)
}

/// Errors at the time steps of the ladder on a fixed mesh. With an exact
/// solution the errors are `max_j` over the time nodes; otherwise the
/// final-time distance to a run with a quarter of the smallest step.
pub fn cmd_conv_time(cfg: &StudyConfig) -> Result<Vec<ConvergenceTable>> {
    let bench = cfg.benchmark()?;
    let schemes = cfg.scheme_list(&[Scheme::Bdf2])?;
    let full = cfg.is_full();
    let (kind, level, tau0, bisections) = match bench.kind {
        ProblemKind::Radial => (MeshKind::CrissCross, 2, 4e-3, if full { 6 } else { 4 }),
        ProblemKind::Manufactured => (MeshKind::Halved, 4, 0.064, if full { 9 } else { 4 }),
        ProblemKind::Blowup => (MeshKind::Halved, 4, 4e-3, if full { 6 } else { 4 }),
    };
    let mesh = build_mesh(&bench.domain, cfg.level.unwrap_or(level), cfg.mesh_kind(kind)?)?;
    let taus = time_ladder(cfg, tau0, bisections)?;
    let problem = problem_on(&bench, mesh)?;
    let exact = bench.exact.clone();
    let tau_ref = taus.iter().cloned().fold(f64::INFINITY, f64::min) / 4.0;

    // every (scheme, tau) point, plus one reference per scheme when needed
    let mut jobs: Vec<(Scheme, f64)> = Vec::new();
    for &s in &schemes {
        jobs.extend(taus.iter().map(|&t| (s, t)));
        if exact.is_none() {
            jobs.push((s, tau_ref));
        }
    }
    let retention = if exact.is_some() { Retention::All } else { Retention::Ends };
    let trajectories = par_map(cfg.jobs()?, &jobs, |&(s, tau)| {
        let mut c = cfg.solver_config(&bench, s, tau, steps_for(bench.final_time, tau)?)?;
        c.retention = retention;
        run_simulation(&problem, &c)
    })?;

    let per_scheme = taus.len() + usize::from(exact.is_none());
    schemes
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let block = &trajectories[i * per_scheme..(i + 1) * per_scheme];
            let errors = block[..taus.len()]
                .iter()
                .map(|tr| {
                    let (l2, h1) = match &exact {
                        Some(m) => (error_vs_exact(tr, m, ErrorNorm::L2Max)?, error_vs_exact(tr, m, ErrorNorm::H1Max)?),
                        None => {
                            let r = &block[taus.len()];
                            (error_vs_reference(tr, r, ErrorNorm::L2Final)?, error_vs_reference(tr, r, ErrorNorm::H1Final)?)
                        }
                    };
                    Ok((tr.tau(), l2, h1))
                })
                .collect::<Result<Vec<_>>>()?;
            let p = expected_time_order(s);
            ConvergenceTable::new(s, &errors, p, p)
        })
        .collect()
}

/// Errors on a ladder of nested meshes at a fixed time step: against the
/// exact solution when there is one (`max_j` norms), otherwise against a
/// run on the mesh refined twice beyond the finest level (final time).
pub fn cmd_conv_space(cfg: &StudyConfig) -> Result<Vec<ConvergenceTable>> {
    let bench = cfg.benchmark()?;
    let schemes = cfg.scheme_list(&[Scheme::Bdf2])?;
    let full = cfg.is_full();
    // the smooth problem starts from h = 1/2, i.e. the criss-cross mesh
    let (kind, default_levels, tau0): (MeshKind, Vec<u32>, f64) = match bench.kind {
        ProblemKind::Radial => (MeshKind::Halved, (2..=5).collect(), 4e-3),
        ProblemKind::Manufactured => {
            (MeshKind::CrissCross, if full { (1..=6).collect() } else { (1..=4).collect() }, 5e-4)
        }
        ProblemKind::Blowup => (MeshKind::Halved, (2..=5).collect(), 1e-3),
    };
    let levels = cfg.levels.clone().unwrap_or(default_levels);
    if levels.is_empty() || levels.windows(2).any(|w| w[1] != w[0] + 1) {
        return Err(config_err("mesh levels must be consecutive and increasing"));
    }
    let tau = cfg.tau.unwrap_or(tau0);
    let steps = steps_for(bench.final_time, tau)?;
    let exact = bench.exact.clone();

    // nested ladder by red refinement, two extra levels for the reference
    let extra = if exact.is_some() { 0 } else { 2 };
    let mut meshes = vec![build_mesh(&bench.domain, levels[0], cfg.mesh_kind(kind)?)?];
    let mut parents: Vec<Vec<[usize; 2]>> = Vec::new();
    for _ in 1..levels.len() + extra {
        let r = refine_uniform_with_parents(meshes.last().expect("nonempty"));
        meshes.push(r.mesh);
        parents.push(r.parents);
    }
    let problems = meshes
        .into_iter()
        .map(|m| problem_on(&bench, m))
        .collect::<Result<Vec<_>>>()?;
    let fine = problems.len() - 1;

    let mut jobs: Vec<(Scheme, usize)> = Vec::new();
    for &s in &schemes {
        jobs.extend((0..levels.len()).map(|k| (s, k)));
        if exact.is_none() {
            jobs.push((s, fine));
        }
    }
    let retention = if exact.is_some() { Retention::All } else { Retention::Ends };
    let trajectories = par_map(cfg.jobs()?, &jobs, |&(s, k)| {
        let mut c = cfg.solver_config(&bench, s, tau, steps)?;
        c.retention = retention;
        run_simulation(&problems[k], &c)
    })?;

    let per_scheme = levels.len() + usize::from(exact.is_none());
    schemes
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let block = &trajectories[i * per_scheme..(i + 1) * per_scheme];
            let errors = block[..levels.len()]
                .iter()
                .enumerate()
                .map(|(k, tr)| {
                    let (l2, h1) = match &exact {
                        Some(m) => (error_vs_exact(tr, m, ErrorNorm::L2Max)?, error_vs_exact(tr, m, ErrorNorm::H1Max)?),
                        None => {
                            let reference = &block[levels.len()];
                            let chain: Vec<&[[usize; 2]]> = parents[k..].iter().map(Vec::as_slice).collect();
                            let fine_space = reference.space();
                            let e = |norm| {
                                error_vs_prolonged(tr.final_state(), &chain, reference.final_state(), fine_space, norm)
                            };
                            (e(ErrorNorm::L2Final)?, e(ErrorNorm::H1Final)?)
                        }
                    };
                    Ok((tr.mesh().h(), l2, h1))
                })
                .collect::<Result<Vec<_>>>()?;
            ConvergenceTable::new(s, &errors, 2.0, 1.0)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeviationRow {
    pub tau: f64,
    pub steps: usize,
    /// `‖ |m^N|² - 1 ‖_{L¹}` of the nodal interpolant at the final time.
    pub nodal_l1: f64,
    /// The same with `|m|²` evaluated at quadrature points.
    pub quadrature_l1: f64,
    pub eoc: Option<f64>,
    pub v0_norm_sq: f64,
    pub d2_sum: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeviationTable {
    pub scheme: Scheme,
    pub rows: Vec<DeviationRow>,
}

impl DeviationTable {
    pub fn eocs(&self) -> Vec<Option<f64>> {
        self.rows.iter().skip(1).map(|r| r.eoc).collect()
    }

    /// Columns `tau,steps,nodal_l1_dev,quad_l1_dev,eoc,v0_norm_sq,d2_sum`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("tau,steps,nodal_l1_dev,quad_l1_dev,eoc,v0_norm_sq,d2_sum\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                num(r.tau),
                r.steps,
                num(r.nodal_l1),
                num(r.quadrature_l1),
                opt_num(r.eoc),
                num(r.v0_norm_sq),
                num(r.d2_sum)
            );
        }
        s
    }
}

/// `tau,v0_norm_sq,d2_sum_<scheme>...` across all schemes of a study.
pub fn bounds_csv(tables: &[DeviationTable]) -> String {
    let mut s = String::from("tau,v0_norm_sq");
    for t in tables {
        let _ = write!(s, ",d2_sum_{}", t.scheme);
    }
    s.push('\n');
    let Some(first) = tables.first() else { return s };
    for (k, r) in first.rows.iter().enumerate() {
        let _ = write!(s, "{},{}", num(r.tau), num(r.v0_norm_sq));
        for t in tables {
            let _ = write!(s, ",{}", num(t.rows[k].d2_sum));
        }
        s.push('\n');
    }
    s
}

/// Final-time deviation from the unit-length constraint along a halving
/// time-step ladder on a fixed mesh, with the regularity quantities
/// `‖v^0‖²` and `tau² sum ‖d_t² m^j‖²`.
pub fn cmd_constraint(cfg: &StudyConfig) -> Result<Vec<DeviationTable>> {
    let mut bench = cfg.benchmark()?;
    let schemes = cfg.scheme_list(&[Scheme::Tps, Scheme::Bdf2])?;
    let full = cfg.is_full();
    let (tau0, bisections) = match bench.kind {
        ProblemKind::Radial => (4e-3, 4),
        ProblemKind::Manufactured => (0.064, if full { 9 } else { 4 }),
        ProblemKind::Blowup => (0.5, if full { 15 } else { 4 }),
    };
    if bench.kind == ProblemKind::Blowup && cfg.final_time.is_none() {
        bench.final_time = 1.0;
    }
    let mesh = build_mesh(&bench.domain, cfg.level.unwrap_or(4), cfg.mesh_kind(MeshKind::Halved)?)?;
    let taus = time_ladder(cfg, tau0, bisections)?;
    let problem = problem_on(&bench, mesh)?;
    let jobs: Vec<(Scheme, f64)> = schemes.iter().flat_map(|&s| taus.iter().map(move |&t| (s, t))).collect();
    let trajectories = par_map(cfg.jobs()?, &jobs, |&(s, tau)| {
        let mut c = cfg.solver_config(&bench, s, tau, steps_for(bench.final_time, tau)?)?;
        c.retention = Retention::Ends;
        run_simulation(&problem, &c)
    })?;
    let tables = schemes
        .iter()
        .zip(trajectories.chunks(taus.len()))
        .map(|(&scheme, block)| {
            let pairs: Vec<(f64, f64)> = block
                .iter()
                .map(|tr| (tr.tau(), tr.records().last().expect("records").nodal_l1_dev))
                .collect();
            let orders = if pairs.len() >= 2 { eoc(&pairs)? } else { Vec::new() };
            let rows = block
                .iter()
                .enumerate()
                .map(|(k, tr)| {
                    let last = tr.records().last().expect("records");
                    DeviationRow {
                        tau: tr.tau(),
                        steps: tr.steps(),
                        nodal_l1: last.nodal_l1_dev,
                        quadrature_l1: last.quad_l1_dev,
                        eoc: if k == 0 { None } else { orders[k - 1] },
                        v0_norm_sq: tr.diagnostics().v0_norm_sq,
                        d2_sum: tr.diagnostics().d2_sum,
                    }
                })
                .collect();
            Ok(DeviationTable { scheme, rows })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(tables)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CflRow {
    pub h: f64,
    pub rule: TauRule,
    pub tau: f64,
    pub steps: usize,
    pub eta0: f64,
    pub eta_n: f64,
    pub c: f64,
    /// `C` dropped below the previous row's value (none on the first row).
    pub decaying: Option<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CflTable {
    pub scheme: Scheme,
    pub h: f64,
    pub rows: Vec<CflRow>,
}

impl CflTable {
    pub fn strictly_decaying(&self) -> bool {
        self.rows.iter().skip(1).all(|r| r.decaying == Some(true))
    }

    /// Columns `h,rule,tau,steps,eta0,eta_n,c,decaying`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("h,rule,tau,steps,eta0,eta_n,c,decaying\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                num(r.h),
                r.rule,
                num(r.tau),
                r.steps,
                num(r.eta0),
                num(r.eta_n),
                num(r.c),
                r.decaying.map(|d| d.to_string()).unwrap_or_default()
            );
        }
        s
    }
}

/// `C(tau) = sqrt(eta0² + eta_N²)` along a ladder of time-step rules on
/// one or more fixed meshes.
pub fn cmd_cfl(cfg: &StudyConfig) -> Result<Vec<CflTable>> {
    let bench = cfg.benchmark()?;
    let schemes = cfg.scheme_list(&[Scheme::Bdf2])?;
    let levels = match (&cfg.levels, cfg.level) {
        (Some(l), _) => l.clone(),
        (None, Some(l)) => vec![l],
        (None, None) if cfg.is_full() => vec![3, 5],
        (None, None) => vec![3],
    };
    let kind = cfg.mesh_kind(MeshKind::CrissCross)?;
    let rules = TauRule::parse_ladder(cfg.tau_rule.as_deref().unwrap_or("fractions"))?;
    let problems = levels
        .iter()
        .map(|&l| problem_on(&bench, build_mesh(&bench.domain, l, kind)?))
        .collect::<Result<Vec<_>>>()?;
    let mut jobs = Vec::new();
    for &s in &schemes {
        for k in 0..problems.len() {
            jobs.extend(rules.iter().map(|&r| (s, k, r)));
        }
    }
    let rows = par_map(cfg.jobs()?, &jobs, |&(s, k, rule)| {
        let h = problems[k].mesh().h();
        let tau = rule.eval(h);
        let steps = steps_for(bench.final_time, tau)?;
        let mut c = cfg.solver_config(&bench, s, tau, steps)?;
        c.retention = Retention::Ends;
        let d = run_simulation(&problems[k], &c)?.diagnostics().clone();
        Ok(CflRow { h, rule, tau, steps, eta0: d.eta0, eta_n: d.eta_n, c: d.cfl_c, decaying: None })
    })?;
    Ok(jobs
        .chunks(rules.len())
        .zip(rows.chunks(rules.len()))
        .map(|(j, r)| {
            let mut rows = r.to_vec();
            for k in 1..rows.len() {
                rows[k].decaying = Some(rows[k].c < rows[k - 1].c);
            }
            CflTable { scheme: j[0].0, h: rows[0].h, rows }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tau_rules_parse() {
        let r: TauRule = "h^2/10".parse().unwrap();
        assert_eq!(r, TauRule { coefficient: 0.1, exponent: 2.0 });
        let r: TauRule = "0.5 * h^1.5".parse().unwrap();
        assert_eq!(r, TauRule { coefficient: 0.5, exponent: 1.5 });
        assert_eq!("h".parse::<TauRule>().unwrap(), TauRule { coefficient: 1.0, exponent: 1.0 });
        for bad in ["", "x/10", "h/0", "h^", "2*", "h/-1"] {
            assert!(bad.parse::<TauRule>().is_err(), "{bad}");
        }
        assert_eq!(TauRule::parse_ladder("fractions").unwrap().len(), 6);
        assert_eq!(TauRule::parse_ladder("h, h/2").unwrap().len(), 2);
        assert_eq!(TauRule::powers()[3].eval(0.5), 0.25);
    }

    #[test]
    fn steps_round_down_only_off_integers() {
        assert_eq!(steps_for(1.0, 4e-3).unwrap(), 250);
        assert_eq!(steps_for(0.2, 0.064).unwrap(), 3);
        assert_eq!(steps_for(0.3, 0.1).unwrap(), 3);
        assert!(steps_for(0.1, 0.2).is_err());
        assert!(steps_for(1.0, 0.0).is_err());
    }

    #[test]
    fn criss_cross_counts() {
        let m = build_mesh(&SquareDomain::unit(), 2, MeshKind::CrissCross).unwrap();
        assert_eq!(m.n_triangles(), 64);
        assert_eq!(m.h(), 0.25);
        assert_eq!("bisected".parse::<MeshKind>().unwrap(), MeshKind::CrissCross);
    }

    #[test]
    fn config_overlay_prefers_top() {
        let base = StudyConfig::from_toml_str("problem = \"blowup\"\nlevel = 4\n[solver]\ntolerance = 1e-8\n").unwrap();
        let top = StudyConfig { level: Some(5), ..Default::default() };
        let c = base.overlaid(top);
        assert_eq!(c.level, Some(5));
        assert_eq!(c.problem.as_deref(), Some("blowup"));
        assert_eq!(c.linear().unwrap().rel_tolerance, 1e-8);
        assert!(StudyConfig::from_toml_str("levle = 3").is_err());
    }

    #[test]
    fn single_point_table_has_no_orders() {
        let t = ConvergenceTable::new(Scheme::Bdf2, &[(0.1, 1.0, 2.0)], 2.0, 2.0).unwrap();
        assert_eq!(t.rows.len(), 1);
        assert_eq!(t.rows[0].eoc_l2, None);
        assert_eq!(t.stagnation_l2, None);
        let csv = t.to_csv();
        assert_eq!(csv.lines().nth(1).unwrap().matches(',').count(), 4);
    }
}
