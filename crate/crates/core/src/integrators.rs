//! Time stepping: the BDF2-type tangent-plane scheme, the first-order
//! tangent-plane scheme (TPS) and the implicit midpoint rule (MID), plus the
//! outer loop that records per-step observables.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::fem::{interpolate_nodal, FemSpace, NodalField, Vec3};
use crate::mesh::Mesh;
use crate::problems::{BenchmarkProblem, SpaceTimeField};
use crate::solver::{solve_linear, LinearSolveConfig};
use crate::tangent::{build_tangent_frame_with, solve_blocks_in_tangent_space, DEFAULT_ANCHOR_EPSILON};

/// Constants of the norm equivalence and inverse estimate between `v^j`
/// and the difference quotients of `m^j`.
pub const C1: f64 = 0.447_213_595_499_957_9; // sqrt(1/5)
pub const C2: f64 = 1.133_893_419_027_681_9; // sqrt(9/7)
pub const C3: f64 = 1.603_567_451_474_546_9; // sqrt(18/7)

/// Eigenvalues `(3 ± 2 sqrt 2) / 4` of the two-step stability matrix.
pub fn gamma_pm() -> (f64, f64) {
    let s = 2.0 * 2f64.sqrt();
    ((3.0 - s) / 4.0, (3.0 + s) / 4.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Scheme {
    Bdf2,
    Tps,
    Mid,
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bdf2" => Ok(Self::Bdf2),
            "tps" => Ok(Self::Tps),
            "mid" | "midpoint" => Ok(Self::Mid),
            _ => Err(Error::InvalidConfig(format!("unknown scheme '{s}' (expected bdf2, tps or mid)"))),
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Bdf2 => "bdf2",
            Self::Tps => "tps",
            Self::Mid => "mid",
        })
    }
}

/// Time level at which TPS samples the applied field.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FieldSampling {
    /// `f(t_{j+1})`, as in the first step of the BDF2 scheme.
    #[default]
    EndOfStep,
    /// `f(t_j)`
    StartOfStep,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MidpointConfig {
    pub fp_tolerance: f64,
    pub fp_max_iterations: usize,
}

impl Default for MidpointConfig {
    fn default() -> Self {
        Self { fp_tolerance: 1e-10, fp_max_iterations: 200 }
    }
}

/// Which states a trajectory keeps in memory.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Retention {
    #[default]
    All,
    /// Only `m^0`, `m^N` and the first and last velocities.
    Ends,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig {
    pub scheme: Scheme,
    pub alpha: f64,
    pub lambda_sq: f64,
    pub tau: f64,
    pub steps: usize,
    pub linear: LinearSolveConfig,
    pub midpoint: MidpointConfig,
    pub tps_field: FieldSampling,
    pub retention: Retention,
    pub anchor_epsilon: f64,
}

impl SolverConfig {
    /// `tau = final_time / steps`
    pub fn new(scheme: Scheme, alpha: f64, lambda_sq: f64, final_time: f64, steps: usize) -> Self {
        Self::with_tau(scheme, alpha, lambda_sq, final_time / steps.max(1) as f64, steps)
    }

    pub fn with_tau(scheme: Scheme, alpha: f64, lambda_sq: f64, tau: f64, steps: usize) -> Self {
        Self {
            scheme,
            alpha,
            lambda_sq,
            tau,
            steps,
            linear: LinearSolveConfig::default(),
            midpoint: MidpointConfig::default(),
            tps_field: FieldSampling::default(),
            retention: Retention::default(),
            anchor_epsilon: DEFAULT_ANCHOR_EPSILON,
        }
    }

    /// Parameters of a benchmark problem with `N = steps`.
    pub fn for_problem(problem: &BenchmarkProblem, scheme: Scheme, steps: usize) -> Self {
        Self::new(scheme, problem.alpha, problem.lambda_sq, problem.final_time, steps)
    }

    pub fn final_time(&self) -> f64 {
        self.tau * self.steps as f64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha = {} must be positive", self.alpha));
        }
        if !(self.lambda_sq > 0.0 && self.lambda_sq.is_finite()) {
            return bad(format!("lambda_sq = {} must be positive", self.lambda_sq));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("time step {} must be positive", self.tau));
        }
        if self.steps == 0 {
            return bad("the number of steps must be at least 1".into());
        }
        if self.scheme == Scheme::Bdf2 && self.steps < 2 {
            return bad("bdf2 needs at least 2 steps".into());
        }
        if !(self.midpoint.fp_tolerance > 0.0) || self.midpoint.fp_max_iterations == 0 {
            return bad("fixed-point tolerance and iteration limit must be positive".into());
        }
        self.linear.validate()
    }
}

/// Mesh, discrete initial datum and applied field of one simulation.
#[derive(Clone)]
pub struct Problem {
    space: Arc<FemSpace>,
    m0: NodalField,
    field: SpaceTimeField,
    static_field: bool,
    cached_field: Option<NodalField>,
}

impl fmt::Debug for Problem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Problem")
            .field("nodes", &self.space.n_nodes())
            .field("static_field", &self.static_field)
            .finish_non_exhaustive()
    }
}

impl Problem {
    /// The initial datum is renormalized to unit length at every node.
    pub fn new(space: Arc<FemSpace>, m0: NodalField, field: SpaceTimeField, static_field: bool) -> Result<Self> {
        m0.ensure_len(space.n_nodes())?;
        let m0 = m0.normalized()?;
        let cached_field = if static_field {
            Some(interpolate_nodal(space.mesh(), 0.0, |x, t| field(x, t))?)
        } else {
            None
        };
        Ok(Self { space, m0, field, static_field, cached_field })
    }

    pub fn from_benchmark(bench: &BenchmarkProblem, space: Arc<FemSpace>) -> Result<Self> {
        let init = bench.initial.clone();
        let m0 = interpolate_nodal(space.mesh(), 0.0, |x, _| init(x))?;
        Self::new(space, m0, bench.field.clone(), bench.static_field)
    }

    pub fn on_mesh(bench: &BenchmarkProblem, mesh: Mesh) -> Result<Self> {
        Self::from_benchmark(bench, Arc::new(FemSpace::new(Arc::new(mesh))))
    }

    pub fn space(&self) -> &Arc<FemSpace> {
        &self.space
    }

    pub fn mesh(&self) -> &Mesh {
        self.space.mesh()
    }

    pub fn initial_state(&self) -> &NodalField {
        &self.m0
    }

    /// Nodal interpolant of `f(., t)`.
    pub fn field_at(&self, t: f64) -> Result<NodalField> {
        match &self.cached_field {
            Some(f) => Ok(f.clone()),
            None => interpolate_nodal(self.space.mesh(), t, |x, t| (self.field)(x, t)),
        }
    }
}

/// Output of one tangent-plane step.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub v: NodalField,
    pub m_next: NodalField,
    pub linear_iterations: usize,
}

/// Solves `alpha <v, phi> + <a x v, phi> + c_stiff <grad v, grad phi>
/// = <f, phi> - c_src <grad src, grad phi>` over `T_h(a)`.
fn tangent_solve(
    space: &FemSpace,
    anchor: &NodalField,
    c_stiff: f64,
    f: &NodalField,
    c_src: f64,
    src: &NodalField,
    cfg: &SolverConfig,
) -> Result<(NodalField, usize)> {
    let frame = build_tangent_frame_with(anchor, cfg.anchor_epsilon)?;
    let mut op = space.scalar_operator(cfg.alpha, c_stiff);
    op.add_scaled(1.0, &space.cross_operator(anchor)?);
    let rhs = NodalField::combination(&[(1.0, &space.apply_mass(f)), (-c_src, &space.apply_stiffness(src))]);
    let sol = solve_blocks_in_tangent_space(&frame, &op, &rhs, &cfg.linear)?;
    Ok((sol.v, sol.iterations))
}

/// TPS step anchored at `m`: `v ∈ T_h(m)`, `m_next = m + tau v`. This is
/// also the first step of the BDF2 scheme.
pub fn tps_step(space: &FemSpace, m: &NodalField, f: &NodalField, cfg: &SolverConfig) -> Result<StepOutput> {
    m.ensure_len(space.n_nodes())?;
    f.ensure_len(space.n_nodes())?;
    let lam = cfg.lambda_sq;
    let (v, linear_iterations) = tangent_solve(space, m, lam * cfg.tau, f, lam, m, cfg)?;
    let m_next = NodalField::combination(&[(1.0, m), (cfg.tau, &v)]);
    Ok(StepOutput { v, m_next, linear_iterations })
}

/// First step from the problem's initial datum with `f(t_1)`.
pub fn initial_step(problem: &Problem, cfg: &SolverConfig) -> Result<StepOutput> {
    cfg.validate()?;
    let f1 = problem.field_at(cfg.tau)?;
    tps_step(problem.space(), problem.initial_state(), &f1, cfg)
}

/// BDF2 step from `(m^{j-1}, m^j)` with predictor `2 m^j - m^{j-1}`.
pub fn bdf2_step(
    space: &FemSpace,
    m_prev: &NodalField,
    m_cur: &NodalField,
    f_next: &NodalField,
    cfg: &SolverConfig,
) -> Result<StepOutput> {
    for x in [m_prev, m_cur, f_next] {
        x.ensure_len(space.n_nodes())?;
    }
    let lam = cfg.lambda_sq;
    let predictor = NodalField::combination(&[(2.0, m_cur), (-1.0, m_prev)]);
    let src = NodalField::combination(&[(4.0, m_cur), (-1.0, m_prev)]);
    let (v, linear_iterations) =
        tangent_solve(space, &predictor, 2.0 / 3.0 * lam * cfg.tau, f_next, lam / 3.0, &src, cfg)?;
    let m_next = NodalField::combination(&[(4.0 / 3.0, m_cur), (-1.0 / 3.0, m_prev), (2.0 / 3.0 * cfg.tau, &v)]);
    Ok(StepOutput { v, m_next, linear_iterations })
}

#[derive(Clone, Debug)]
pub struct MidpointOutput {
    pub m_next: NodalField,
    pub sweeps: usize,
    pub linear_iterations: usize,
}

/// Implicit midpoint step solved by fixed-point iteration: each sweep
/// freezes `w = (m^j + m^{j+1}) / 2` in both cross products and solves
/// the resulting linear system for `m^{j+1}`.
pub fn midpoint_step(space: &FemSpace, m: &NodalField, f_half: &NodalField, cfg: &SolverConfig) -> Result<MidpointOutput> {
    m.ensure_len(space.n_nodes())?;
    f_half.ensure_len(space.n_nodes())?;
    let tau = cfg.tau;
    let half_lam = 0.5 * cfg.lambda_sq;
    let mass_part = space.scalar_operator(1.0 / tau, 0.0);
    let mut iterate = m.clone();
    let mut linear_iterations = 0;
    let mut update = f64::INFINITY;
    for sweep in 1..=cfg.midpoint.fp_max_iterations {
        let w = NodalField::combination(&[(0.5, m), (0.5, &iterate)]);
        let b = space.cross_operator(&w)?;
        let g = space.gradient_cross_operator(&w)?;
        let mut lhs = mass_part.clone();
        lhs.add_scaled(-cfg.alpha / tau, &b);
        lhs.add_scaled(-half_lam, &g);
        let mut rhs_op = mass_part.clone();
        rhs_op.add_scaled(-cfg.alpha / tau, &b);
        rhs_op.add_scaled(half_lam, &g);
        let rhs = NodalField::combination(&[(1.0, &rhs_op.apply(m)), (-1.0, &b.apply(f_half))]);
        let sol = solve_linear(&lhs.to_sparse(), &rhs.to_flat(), &cfg.linear)?;
        linear_iterations += sol.iterations;
        let next = NodalField::from_flat(&sol.x)?;
        update = next.max_nodal_distance(&iterate);
        iterate = next;
        if update < cfg.midpoint.fp_tolerance {
            return Ok(MidpointOutput { m_next: iterate, sweeps: sweep, linear_iterations });
        }
        // a runaway iteration will not come back
        if !update.is_finite() || update > 1e8 {
            return Err(Error::FixedPointDiverged { iterations: sweep, update });
        }
    }
    Err(Error::FixedPointDiverged { iterations: cfg.midpoint.fp_max_iterations, update })
}

/// Observables recorded for the state `m^j`.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub j: usize,
    pub t: f64,
    /// `E(m^j, f(t_j))`
    pub energy: f64,
    pub h1_semi: f64,
    pub w1inf_semi: f64,
    pub linf_nodal: f64,
    pub nodal_l1_dev: f64,
    pub quad_l1_dev: f64,
    /// `‖v^{j-1}‖²`, the velocity that produced `m^j` (none for `j = 0`).
    pub v_norm_sq: Option<f64>,
    /// Relative residual of the discrete energy identity at `n = j`
    /// (BDF2 and TPS only).
    pub energy_identity_residual: Option<f64>,
    pub linear_iterations: usize,
    pub fixed_point_sweeps: usize,
}

/// Run-level quantities accumulated online. Ratios compare computed
/// quantities with the bounds the scheme guarantees; a bound holds when
/// the ratio is at most one (at least one for `*_lower`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Diagnostics {
    pub v0_norm_sq: f64,
    /// `tau^2 sum_{j=2}^N ‖d_t^2 m^j‖²`
    pub d2_sum: f64,
    pub eta0: f64,
    pub eta_n: f64,
    pub cfl_c: f64,
    /// Largest relative residual of the energy identity over all `n`.
    pub max_energy_identity_residual: Option<f64>,
    /// Largest nodal residual of the closed-form modulus law (BDF2) or of
    /// `|m^{j+1}|² = |m^j|² + tau²|v^j|²` (TPS).
    pub max_constraint_law_residual: Option<f64>,
    /// Largest nodal residual of the per-step modulus recursion (BDF2).
    pub max_constraint_recursion_residual: Option<f64>,
    /// Largest scaled residual of the algebraic velocity identities.
    pub max_velocity_identity_residual: f64,
    pub norm_equivalence_lower: f64,
    pub norm_equivalence_upper: f64,
    pub norm_equivalence_grad_lower: f64,
    pub norm_equivalence_grad_upper: f64,
    pub inverse_estimate: f64,
    pub inverse_estimate_grad: f64,
    /// LHS / RHS of the first-step bound.
    pub first_step_bound: f64,
    /// Largest LHS / RHS of the weighted energy estimate over `n >= 2`
    /// (BDF2 only).
    pub energy_estimate: Option<f64>,
    /// Largest `‖∇m^n‖² + tau sum ‖v‖² + tau^4 sum ‖∇d_t^2 m‖²`.
    pub gradient_bound_max: f64,
    pub min_nodal_modulus: f64,
    /// `|m^{j+1}(z)| >= |m^j(z)|` at every node and step (up to roundoff).
    pub modulus_nondecreasing: bool,
    pub max_fixed_point_sweeps: usize,
    pub total_linear_iterations: usize,
}

impl Diagnostics {
    /// Whether the norm equivalence and inverse estimate hold, both for
    /// the plain and the gradient versions, up to relative slack `tol`.
    pub fn estimates_hold(&self, tol: f64) -> bool {
        self.norm_equivalence_lower >= 1.0 - tol
            && self.norm_equivalence_grad_lower >= 1.0 - tol
            && self.norm_equivalence_upper <= 1.0 + tol
            && self.norm_equivalence_grad_upper <= 1.0 + tol
            && self.inverse_estimate <= 1.0 + tol
            && self.inverse_estimate_grad <= 1.0 + tol
    }
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    scheme: Scheme,
    tau: f64,
    steps: usize,
    space: Arc<FemSpace>,
    states: Vec<Option<NodalField>>,
    velocities: Vec<Option<NodalField>>,
    records: Vec<StepRecord>,
    diagnostics: Diagnostics,
}

impl Trajectory {
    pub fn scheme(&self) -> Scheme {
        self.scheme
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn final_time(&self) -> f64 {
        self.tau * self.steps as f64
    }

    pub fn time(&self, j: usize) -> f64 {
        j as f64 * self.tau
    }

    pub fn space(&self) -> &Arc<FemSpace> {
        &self.space
    }

    pub fn mesh(&self) -> &Mesh {
        self.space.mesh()
    }

    pub fn state(&self, j: usize) -> Option<&NodalField> {
        self.states.get(j).and_then(Option::as_ref)
    }

    pub fn velocity(&self, j: usize) -> Option<&NodalField> {
        self.velocities.get(j).and_then(Option::as_ref)
    }

    pub fn final_state(&self) -> &NodalField {
        self.state(self.steps).expect("final state is always kept")
    }

    pub fn has_all_states(&self) -> bool {
        self.states.iter().all(Option::is_some)
    }

    pub fn records(&self) -> &[StepRecord] {
        &self.records
    }

    pub fn diagnostics(&self) -> &Diagnostics {
        &self.diagnostics
    }

    pub(crate) fn require_state(&self, j: usize) -> Result<&NodalField> {
        self.state(j)
            .ok_or_else(|| Error::InvalidArgument(format!("state {j} was not retained")))
    }

    pub(crate) fn require_velocity(&self, j: usize) -> Result<&NodalField> {
        self.velocity(j)
            .ok_or_else(|| Error::InvalidArgument(format!("velocity {j} was not retained")))
    }

    /// Per-step CSV with the columns `j,t,energy,h1_semi,w1inf_semi,
    /// linf_nodal,nodal_l1_dev,quad_l1_dev,v_norm_sq,energy_identity_residual`.
    pub fn to_csv(&self) -> String {
        use std::fmt::Write as _;
        let mut s = String::from(
            "j,t,energy,h1_semi,w1inf_semi,linf_nodal,nodal_l1_dev,quad_l1_dev,v_norm_sq,energy_identity_residual\n",
        );
        let opt = |x: Option<f64>| x.map(|v| format!("{v:.16e}")).unwrap_or_default();
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{},{}",
                r.j,
                r.t,
                r.energy,
                r.h1_semi,
                r.w1inf_semi,
                r.linf_nodal,
                r.nodal_l1_dev,
                r.quad_l1_dev,
                opt(r.v_norm_sq),
                opt(r.energy_identity_residual)
            );
        }
        s
    }
}

/// Running sums behind [`Diagnostics`].
struct Accumulator {
    tau: f64,
    alpha: f64,
    lambda_sq: f64,
    energy_scale: f64,
    grad_sq: Vec<f64>,
    sum_v: f64,
    sum_grad_v: f64,
    sum_dt: f64,
    sum_grad_dt: f64,
    sum_d2: f64,
    sum_grad_d2: f64,
    sum_fv: f64,
    /// `sum_{j=1}^{n-1} ‖f^{j+1}‖²`
    sum_f_tail: f64,
    law_p: Vec<f64>,
    law_q: Vec<f64>,
    diag: Diagnostics,
}

fn bound_ratio(lhs: f64, rhs: f64) -> f64 {
    if rhs > 0.0 {
        lhs / rhs
    } else if lhs <= 1e-14 {
        0.0
    } else {
        f64::INFINITY
    }
}

impl Accumulator {
    fn new(cfg: &SolverConfig, grad0: f64, energy0: f64) -> Self {
        Self {
            tau: cfg.tau,
            alpha: cfg.alpha,
            lambda_sq: cfg.lambda_sq,
            energy_scale: energy0.abs().max(1.0),
            grad_sq: vec![grad0],
            sum_v: 0.0,
            sum_grad_v: 0.0,
            sum_dt: 0.0,
            sum_grad_dt: 0.0,
            sum_d2: 0.0,
            sum_grad_d2: 0.0,
            sum_fv: 0.0,
            sum_f_tail: 0.0,
            law_p: Vec::new(),
            law_q: Vec::new(),
            diag: Diagnostics {
                norm_equivalence_lower: f64::INFINITY,
                norm_equivalence_grad_lower: f64::INFINITY,
                min_nodal_modulus: f64::INFINITY,
                modulus_nondecreasing: true,
                ..Default::default()
            },
        }
    }

    /// Updates all sums after `m^{n}` has been computed from step `n - 1`
    /// with velocity `v = v^{n-1}` and field `f` (the one used in the step).
    /// Returns the energy-identity residual at `n` where defined.
    #[allow(clippy::too_many_arguments)]
    fn advance(
        &mut self,
        space: &FemSpace,
        scheme: Scheme,
        n: usize,
        m: [&NodalField; 3],
        v: &NodalField,
        f: &NodalField,
    ) -> Option<f64> {
        let [m_new, m_cur, m_old] = m;
        let tau = self.tau;
        let lam = self.lambda_sq;
        let (gamma_minus, gamma_plus) = gamma_pm();

        let grad_new = space.h1_semi_sq(m_new);
        self.grad_sq.push(grad_new);
        let v_sq = space.l2_sq(v);
        let grad_v_sq = space.h1_semi_sq(v);
        let diff = NodalField::combination(&[(1.0, m_new), (-1.0, m_cur)]);
        let dt_sq = space.l2_sq(&diff) / (tau * tau);
        let grad_dt_sq = space.h1_semi_sq(&diff) / (tau * tau);
        self.sum_v += tau * v_sq;
        self.sum_grad_v += tau * grad_v_sq;
        self.sum_dt += tau * dt_sq;
        self.sum_grad_dt += tau * grad_dt_sq;
        self.sum_fv += tau * space.mass_inner(f, v);
        let f_sq = space.l2_sq(f);
        if n == 1 {
            self.diag.v0_norm_sq = v_sq;
            let lhs = lam * grad_new + tau * self.alpha * v_sq + tau * tau * lam * grad_v_sq;
            let rhs = lam * self.grad_sq[0] + tau / self.alpha * f_sq;
            self.diag.first_step_bound = bound_ratio(lhs, rhs);
        } else {
            self.sum_f_tail += f_sq;
        }

        // second differences m^n - 2 m^{n-1} + m^{n-2}
        let mut second = None;
        if n >= 2 {
            let d2 = NodalField::combination(&[(1.0, m_new), (-2.0, m_cur), (1.0, m_old)]);
            let l2 = space.l2_sq(&d2);
            let gr = space.h1_semi_sq(&d2);
            self.diag.d2_sum += l2 / (tau * tau);
            self.sum_d2 += l2 / (tau * tau * tau);
            self.sum_grad_d2 += gr;
            second = Some(d2);
        }

        // norm equivalence and inverse estimate
        if self.sum_v > 0.0 {
            let r = (self.sum_dt / self.sum_v).sqrt();
            self.diag.norm_equivalence_lower = self.diag.norm_equivalence_lower.min(r / C1);
            self.diag.norm_equivalence_upper = self.diag.norm_equivalence_upper.max(r / C2);
            let inv = tau * (self.sum_d2 / self.sum_v).sqrt() / C3;
            self.diag.inverse_estimate = self.diag.inverse_estimate.max(inv);
        }
        if self.sum_grad_v > 0.0 {
            let r = (self.sum_grad_dt / self.sum_grad_v).sqrt();
            self.diag.norm_equivalence_grad_lower = self.diag.norm_equivalence_grad_lower.min(r / C1);
            self.diag.norm_equivalence_grad_upper = self.diag.norm_equivalence_grad_upper.max(r / C2);
            // tau^4 ‖∇d_t² m‖² summed, divided by tau^3 for the tau-weighted sum
            let inv = tau * (self.sum_grad_d2 / (tau * tau * tau) / self.sum_grad_v).sqrt() / C3;
            self.diag.inverse_estimate_grad = self.diag.inverse_estimate_grad.max(inv);
        }
        self.diag.gradient_bound_max = self
            .diag
            .gradient_bound_max
            .max(grad_new + self.sum_v + self.sum_grad_d2);

        // CFL quantities
        let (g0, g1, gp, gn) = (self.grad_sq[0], self.grad_sq[1], self.grad_sq[n - 1], self.grad_sq[n]);
        self.diag.eta0 = g1 - g0;
        self.diag.eta_n = gp - gn;
        self.diag.cfl_c = self.diag.eta0.hypot(self.diag.eta_n);

        // nodal modulus
        for (a, b) in m_new.values().iter().zip(m_cur.values()) {
            let (na, nb) = (a.norm(), b.norm());
            self.diag.min_nodal_modulus = self.diag.min_nodal_modulus.min(na);
            if na < nb * (1.0 - 1e-14) {
                self.diag.modulus_nondecreasing = false;
            }
        }

        match scheme {
            Scheme::Bdf2 => {
                self.constraint_law(n, m_new, m_cur, m_old, v, second.as_ref());
                if n >= 2 {
                    let lhs = lam * gamma_minus * (gn + gp)
                        + 0.5 * self.alpha * (self.sum_v - tau * self.diag_v0_contrib())
                        + 0.25 * lam * self.sum_grad_d2;
                    let rhs = lam * gamma_plus * (g0 + g1) + tau / (2.0 * self.alpha) * self.sum_f_tail;
                    let ratio = bound_ratio(lhs, rhs);
                    self.diag.energy_estimate = Some(self.diag.energy_estimate.unwrap_or(0.0).max(ratio));
                }
                let lhs = self.alpha * self.sum_v
                    + 0.5 * lam * gn
                    + 0.5 * lam * space.h1_semi_sq(&diff)
                    + 0.25 * lam * self.sum_grad_d2;
                let rhs = 0.5 * lam * g0 + self.sum_fv + 0.25 * lam * (self.diag.eta0 + self.diag.eta_n);
                let res = (lhs - rhs).abs() / self.energy_scale;
                self.record_identity(res);
                Some(res)
            }
            Scheme::Tps => {
                let worst = m_new
                    .values()
                    .iter()
                    .zip(m_cur.values())
                    .zip(v.values())
                    .map(|((a, b), w)| (a.norm_squared() - b.norm_squared() - tau * tau * w.norm_squared()).abs())
                    .fold(0.0, f64::max);
                self.diag.max_constraint_law_residual =
                    Some(self.diag.max_constraint_law_residual.unwrap_or(0.0).max(worst));
                let lhs = 0.5 * lam * gn + self.alpha * self.sum_v + 0.5 * lam * tau * self.sum_grad_v;
                let rhs = 0.5 * lam * g0 + self.sum_fv;
                let res = (lhs - rhs).abs() / self.energy_scale;
                self.record_identity(res);
                Some(res)
            }
            Scheme::Mid => None,
        }
    }

    fn diag_v0_contrib(&self) -> f64 {
        self.diag.v0_norm_sq
    }

    fn record_identity(&mut self, res: f64) {
        self.diag.max_energy_identity_residual = Some(self.diag.max_energy_identity_residual.unwrap_or(0.0).max(res));
    }

    fn constraint_law(
        &mut self,
        n: usize,
        m_new: &NodalField,
        m_cur: &NodalField,
        m_old: &NodalField,
        v: &NodalField,
        second: Option<&NodalField>,
    ) {
        let tau = self.tau;
        // a_1 = tau²|v^0|², a_i = tau^4 |d_t² m^i|² for i >= 2;
        // |m^n|² - 1 = 3/2 sum_i (1 - 3^{-(n+1-i)}) a_i = 3/2 (P_n - Q_n)
        let a: Vec<f64> = match second {
            None => v.values().iter().map(|w| tau * tau * w.norm_squared()).collect(),
            Some(d2) => d2.values().iter().map(|w| w.norm_squared()).collect(),
        };
        if n == 1 {
            self.law_p = vec![0.0; a.len()];
            self.law_q = vec![0.0; a.len()];
        }
        let mut worst: f64 = 0.0;
        for (z, az) in a.iter().enumerate() {
            self.law_p[z] += az;
            self.law_q[z] = (self.law_q[z] + az) / 3.0;
            let predicted = 1.0 + 1.5 * (self.law_p[z] - self.law_q[z]);
            worst = worst.max((m_new.values()[z].norm_squared() - predicted).abs());
        }
        self.diag.max_constraint_law_residual = Some(self.diag.max_constraint_law_residual.unwrap_or(0.0).max(worst));
        if let Some(d2) = second {
            let rec = (0..a.len())
                .map(|z| {
                    let lhs = 1.5 * m_new.values()[z].norm_squared() - 2.0 * m_cur.values()[z].norm_squared()
                        + 0.5 * m_old.values()[z].norm_squared();
                    (lhs - 1.5 * d2.values()[z].norm_squared()).abs()
                })
                .fold(0.0, f64::max);
            self.diag.max_constraint_recursion_residual =
                Some(self.diag.max_constraint_recursion_residual.unwrap_or(0.0).max(rec));
        }
    }

    /// Scaled residuals of `v^0 = d_t m^1` and, for `j >= 1`,
    /// `2 v^j = 3 d_t m^{j+1} - d_t m^j` and
    /// `v^j = tau d_t² m^{j+1} + (d_t m^{j+1} + d_t m^j) / 2`.
    fn velocity_identities(&mut self, j: usize, m_new: &NodalField, m_cur: &NodalField, m_old: &NodalField, v: &NodalField) {
        let tau = self.tau;
        let mut worst: f64 = 0.0;
        for z in 0..v.len() {
            let (c, b, a, w) = (m_new.values()[z], m_cur.values()[z], m_old.values()[z], v.values()[z]);
            let dt_new = (c - b) / tau;
            let (res, scale) = if j == 0 {
                ((w - dt_new).norm(), (c.norm() + b.norm()) / tau + w.norm())
            } else {
                let dt_old = (b - a) / tau;
                let r1 = (2.0 * w - 3.0 * dt_new + dt_old).norm();
                let r3 = (w - (dt_new - dt_old) - 0.5 * (dt_new + dt_old)).norm();
                (r1.max(r3), (c.norm() + b.norm() + a.norm()) / tau + w.norm())
            };
            if scale > 0.0 {
                worst = worst.max(res / scale);
            }
        }
        self.diag.max_velocity_identity_residual = self.diag.max_velocity_identity_residual.max(worst);
    }
}

fn record(space: &FemSpace, j: usize, t: f64, m: &NodalField, f: &NodalField, lam: f64) -> Result<StepRecord> {
    let norms = space.field_norms(m)?;
    let dev = space.constraint_deviation(m)?;
    Ok(StepRecord {
        j,
        t,
        energy: 0.5 * lam * norms.h1_semi * norms.h1_semi - space.mass_inner(f, m),
        h1_semi: norms.h1_semi,
        w1inf_semi: norms.w1inf_semi,
        linf_nodal: norms.linf_nodal,
        nodal_l1_dev: dev.nodal_l1,
        quad_l1_dev: dev.quadrature_l1,
        v_norm_sq: None,
        energy_identity_residual: None,
        linear_iterations: 0,
        fixed_point_sweeps: 0,
    })
}

/// Runs the configured scheme for `cfg.steps` steps. A failing step aborts
/// the run with [`Error::StepFailed`] carrying the index `n` of the state
/// `m^n` that could not be computed.
pub fn run_simulation(problem: &Problem, cfg: &SolverConfig) -> Result<Trajectory> {
    cfg.validate()?;
    let space = problem.space().clone();
    let n_steps = cfg.steps;
    let tau = cfg.tau;
    let lam = cfg.lambda_sq;
    let keep = |j: usize| cfg.retention == Retention::All || j == 0 || j == n_steps;
    let keep_v = |j: usize| cfg.retention == Retention::All || j == 0 || j + 1 == n_steps;

    let m0 = problem.initial_state().clone();
    let f0 = problem.field_at(0.0)?;
    let rec0 = record(&space, 0, 0.0, &m0, &f0, lam)?;
    let mut acc = Accumulator::new(cfg, space.h1_semi_sq(&m0), rec0.energy);
    let mut records = vec![rec0];
    let mut states = vec![None; n_steps + 1];
    let mut velocities = vec![None; n_steps];
    states[0] = Some(m0.clone());

    let mut m_old = m0.clone();
    let mut m_cur = m0;
    for j in 0..n_steps {
        let n = j + 1;
        let t_next = n as f64 * tau;
        let wrap = |e: Error| Error::StepFailed { step: n, source: Box::new(e) };
        let (v, m_new, f_used, lin, sweeps) = match cfg.scheme {
            Scheme::Bdf2 | Scheme::Tps => {
                let f_t = if cfg.scheme == Scheme::Tps && cfg.tps_field == FieldSampling::StartOfStep {
                    j as f64 * tau
                } else {
                    t_next
                };
                let f = problem.field_at(f_t).map_err(wrap)?;
                let out = if cfg.scheme == Scheme::Bdf2 && j >= 1 {
                    bdf2_step(&space, &m_old, &m_cur, &f, cfg)
                } else {
                    tps_step(&space, &m_cur, &f, cfg)
                }
                .map_err(wrap)?;
                (out.v, out.m_next, f, out.linear_iterations, 0)
            }
            Scheme::Mid => {
                let f = problem.field_at((j as f64 + 0.5) * tau).map_err(wrap)?;
                let out = midpoint_step(&space, &m_cur, &f, cfg).map_err(wrap)?;
                let v = NodalField::combination(&[(1.0 / tau, &out.m_next), (-1.0 / tau, &m_cur)]);
                (v, out.m_next, f, out.linear_iterations, out.sweeps)
            }
        };
        if let Some(node) = m_new.values().iter().position(|x| !x.iter().all(|c| c.is_finite())) {
            return Err(wrap(Error::NonFinite { node }));
        }

        let residual = acc.advance(&space, cfg.scheme, n, [&m_new, &m_cur, &m_old], &v, &f_used);
        if cfg.scheme == Scheme::Bdf2 {
            acc.velocity_identities(j, &m_new, &m_cur, &m_old, &v);
        }
        let f_rec = problem.field_at(t_next).map_err(wrap)?;
        let mut rec = record(&space, n, t_next, &m_new, &f_rec, lam)?;
        rec.v_norm_sq = Some(space.l2_sq(&v));
        rec.energy_identity_residual = residual;
        rec.linear_iterations = lin;
        rec.fixed_point_sweeps = sweeps;
        acc.diag.total_linear_iterations += lin;
        acc.diag.max_fixed_point_sweeps = acc.diag.max_fixed_point_sweeps.max(sweeps);
        records.push(rec);

        if keep_v(j) {
            velocities[j] = Some(v);
        }
        if keep(n) {
            states[n] = Some(m_new.clone());
        }
        m_old = std::mem::replace(&mut m_cur, m_new);
    }

    let mut diagnostics = acc.diag;
    if diagnostics.norm_equivalence_lower == f64::INFINITY {
        diagnostics.norm_equivalence_lower = 1.0 / C1;
    }
    if diagnostics.norm_equivalence_grad_lower == f64::INFINITY {
        diagnostics.norm_equivalence_grad_lower = 1.0 / C1;
    }
    Ok(Trajectory {
        scheme: cfg.scheme,
        tau,
        steps: n_steps,
        space,
        states,
        velocities,
        records,
        diagnostics,
    })
}

/// Space-time reconstructions of a trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interpolant {
    /// Piecewise linear in time.
    Linear,
    /// `m^j` on `[t_j, t_{j+1})`.
    Minus,
    /// `m^{j+1}` on `[t_j, t_{j+1})`.
    Plus,
    /// Predictor `2 m^j - m^{j-1}` on `[t_j, t_{j+1})`, `m^0` on the first interval.
    HatPlus,
    /// `v^j` on `[t_j, t_{j+1})`.
    VMinus,
}

/// Evaluates an interpolant at `t ∈ [0, T]`. Intervals are right-open; at
/// `t = T` the last interval is used, so `Linear` and `Plus` return `m^N`.
pub fn evaluate_interpolant(traj: &Trajectory, which: Interpolant, t: f64) -> Result<NodalField> {
    let tau = traj.tau;
    let n = traj.steps;
    let end = traj.final_time();
    if !(t >= 0.0 && t <= end * (1.0 + 1e-14)) {
        return Err(Error::InvalidArgument(format!("time {t} outside [0, {end}]")));
    }
    let s = t / tau;
    let nearest = s.round();
    // snap to a time node when t is one up to roundoff
    let (j, frac) = if (s - nearest).abs() <= 1e-12 * s.max(1.0) {
        let k = nearest as usize;
        if k >= n {
            (n - 1, 1.0)
        } else {
            (k, 0.0)
        }
    } else {
        let k = (s.floor() as usize).min(n - 1);
        (k, (t - traj.time(k)) / tau)
    };
    match which {
        Interpolant::Linear => {
            if frac == 0.0 {
                Ok(traj.require_state(j)?.clone())
            } else if frac == 1.0 {
                Ok(traj.require_state(j + 1)?.clone())
            } else {
                Ok(NodalField::combination(&[
                    (frac, traj.require_state(j + 1)?),
                    (1.0 - frac, traj.require_state(j)?),
                ]))
            }
        }
        Interpolant::Minus => Ok(traj.require_state(j)?.clone()),
        Interpolant::Plus => Ok(traj.require_state(j + 1)?.clone()),
        Interpolant::HatPlus => {
            if j == 0 {
                Ok(traj.require_state(0)?.clone())
            } else {
                Ok(NodalField::combination(&[(2.0, traj.require_state(j)?), (-1.0, traj.require_state(j - 1)?)]))
            }
        }
        Interpolant::VMinus => Ok(traj.require_velocity(j)?.clone()),
    }
}

/// Convenience: the constant vector field `c` at every node of `space`.
pub fn constant_field(space: &FemSpace, c: Vec3) -> NodalField {
    NodalField::constant(space.n_nodes(), c)
}
