//! Derived quantities of trajectories: energies, identity residuals
//! recomputed from stored states, the CFL indicator, regularity sums,
//! error norms and empirical orders of convergence.

use crate::error::{Error, Result};
use crate::fem::{prolongate, FemSpace, NodalField};
use crate::integrators::{gamma_pm, Scheme, Trajectory};
use crate::problems::SpaceTimeField;
use crate::fem::interpolate_nodal;

/// `E(m, f) = lambda²/2 ‖∇m‖² - <f, m>`
pub fn total_energy(space: &FemSpace, m: &NodalField, f: &NodalField, lambda_sq: f64) -> Result<f64> {
    m.ensure_len(space.n_nodes())?;
    f.ensure_len(space.n_nodes())?;
    Ok(0.5 * lambda_sq * space.h1_semi_sq(m) - space.mass_inner(f, m))
}

fn states<'a>(traj: &'a Trajectory, upto: usize) -> Result<Vec<&'a NodalField>> {
    (0..=upto)
        .map(|j| {
            traj.state(j)
                .ok_or_else(|| Error::InvalidArgument(format!("state {j} was not retained")))
        })
        .collect()
}

fn check_step(traj: &Trajectory, n: usize, min: usize) -> Result<()> {
    if n < min || n > traj.steps() {
        return Err(Error::InvalidArgument(format!("step index {n} outside [{min}, {}]", traj.steps())));
    }
    Ok(())
}

/// Residual of the discrete energy identity of the BDF2 scheme at step
/// `n`, relative to `max(1, |E^0|)`. `fields[j]` is the applied field used
/// in step `j` (that is `f_h^{j+1}`). Velocities are taken from the
/// trajectory, so this is an independent recomputation of the online value.
pub fn energy_identity_residual(
    traj: &Trajectory,
    n: usize,
    fields: &[NodalField],
    alpha: f64,
    lambda_sq: f64,
) -> Result<f64> {
    check_step(traj, n, 1)?;
    if fields.len() < n {
        return Err(Error::InvalidArgument(format!("need {n} field samples, got {}", fields.len())));
    }
    let space = traj.space();
    let m = states(traj, n)?;
    let tau = traj.tau();
    let grad = |u: &NodalField| space.h1_semi_sq(u);
    let mut sum_v = 0.0;
    let mut sum_fv = 0.0;
    for j in 0..n {
        let v = traj
            .velocity(j)
            .ok_or_else(|| Error::InvalidArgument(format!("velocity {j} was not retained")))?;
        sum_v += space.l2_sq(v);
        sum_fv += space.mass_inner(&fields[j], v);
    }
    let mut sum_d2 = 0.0;
    for j in 1..n {
        sum_d2 += grad(&NodalField::combination(&[(1.0, m[j + 1]), (-2.0, m[j]), (1.0, m[j - 1])]));
    }
    let eta0 = grad(m[1]) - grad(m[0]);
    let eta_n = grad(m[n - 1]) - grad(m[n]);
    let lam = lambda_sq;
    let lhs = alpha * tau * sum_v
        + 0.5 * lam * grad(m[n])
        + 0.5 * lam * grad(&NodalField::combination(&[(1.0, m[n]), (-1.0, m[n - 1])]))
        + 0.25 * lam * sum_d2;
    let rhs = 0.5 * lam * grad(m[0]) + tau * sum_fv + 0.25 * lam * (eta0 + eta_n);
    let e0 = total_energy(space, m[0], &fields[0], lam)?;
    Ok((lhs - rhs).abs() / e0.abs().max(1.0))
}

/// Left and right sides of the weighted energy estimate at `n >= 2`.
pub fn energy_estimate_sides(
    traj: &Trajectory,
    n: usize,
    fields: &[NodalField],
    alpha: f64,
    lambda_sq: f64,
) -> Result<(f64, f64)> {
    check_step(traj, n, 2)?;
    let space = traj.space();
    let m = states(traj, n)?;
    let tau = traj.tau();
    let (gm, gp) = gamma_pm();
    let grad = |u: &NodalField| space.h1_semi_sq(u);
    let mut sum_v = 0.0;
    let mut sum_f = 0.0;
    let mut sum_d2 = 0.0;
    for j in 1..n {
        let v = traj
            .velocity(j)
            .ok_or_else(|| Error::InvalidArgument(format!("velocity {j} was not retained")))?;
        sum_v += space.l2_sq(v);
        sum_f += space.l2_sq(&fields[j]);
        sum_d2 += grad(&NodalField::combination(&[(1.0, m[j + 1]), (-2.0, m[j]), (1.0, m[j - 1])]));
    }
    let lhs = lambda_sq * gm * (grad(m[n]) + grad(m[n - 1])) + 0.5 * alpha * tau * sum_v + 0.25 * lambda_sq * sum_d2;
    let rhs = lambda_sq * gp * (grad(m[0]) + grad(m[1])) + tau / (2.0 * alpha) * sum_f;
    Ok((lhs, rhs))
}

/// Largest nodal residual of the closed-form modulus law of the BDF2
/// scheme at step `n`, evaluated directly from its defining sum.
pub fn constraint_law_residual(traj: &Trajectory, n: usize) -> Result<f64> {
    check_step(traj, n, 1)?;
    if traj.scheme() != Scheme::Bdf2 {
        return Err(Error::InvalidArgument("the modulus law holds for bdf2 trajectories only".into()));
    }
    let m = states(traj, n)?;
    let v0 = traj
        .velocity(0)
        .ok_or_else(|| Error::InvalidArgument("velocity 0 was not retained".into()))?;
    let tau = traj.tau();
    let mut worst: f64 = 0.0;
    for z in 0..v0.len() {
        let mut s = 1.5 * (1.0 - 3f64.powi(-(n as i32))) * tau * tau * v0.values()[z].norm_squared();
        for i in 2..=n {
            let d2 = m[i].values()[z] - 2.0 * m[i - 1].values()[z] + m[i - 2].values()[z];
            s += 1.5 * (1.0 - 3f64.powi(-((n + 1 - i) as i32))) * d2.norm_squared();
        }
        worst = worst.max((m[n].values()[z].norm_squared() - 1.0 - s).abs());
    }
    Ok(worst)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CflIndicator {
    pub eta0: f64,
    pub eta_n: f64,
    /// `sqrt(eta0² + eta_n²)`
    pub c: f64,
}

/// `eta0 = ‖∇m^1‖² - ‖∇m^0‖²`, `eta_n = ‖∇m^{n-1}‖² - ‖∇m^n‖²`.
pub fn cfl_indicator(traj: &Trajectory, n: usize) -> Result<CflIndicator> {
    check_step(traj, n, 1)?;
    let space = traj.space();
    let get = |j: usize| {
        traj.state(j)
            .map(|m| space.h1_semi_sq(m))
            .ok_or_else(|| Error::InvalidArgument(format!("state {j} was not retained")))
    };
    let eta0 = get(1)? - get(0)?;
    let eta_n = get(n - 1)? - get(n)?;
    Ok(CflIndicator { eta0, eta_n, c: eta0.hypot(eta_n) })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Regularity {
    pub v0_norm_sq: f64,
    /// `tau² sum_{j=2}^n ‖d_t² m^j‖²`
    pub d2_sum: f64,
}

pub fn regularity_diagnostics(traj: &Trajectory, n: usize) -> Result<Regularity> {
    check_step(traj, n, 2)?;
    let space = traj.space();
    let m = states(traj, n)?;
    let v0 = traj
        .velocity(0)
        .ok_or_else(|| Error::InvalidArgument("velocity 0 was not retained".into()))?;
    let tau = traj.tau();
    let d2_sum = (2..=n)
        .map(|j| space.l2_sq(&NodalField::combination(&[(1.0, m[j]), (-2.0, m[j - 1]), (1.0, m[j - 2])])))
        .sum::<f64>()
        / (tau * tau);
    Ok(Regularity { v0_norm_sq: space.l2_sq(v0), d2_sum })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorNorm {
    L2Final,
    H1Final,
    /// `max_{j=1..N}`
    L2Max,
    H1Max,
}

impl ErrorNorm {
    fn is_max(self) -> bool {
        matches!(self, ErrorNorm::L2Max | ErrorNorm::H1Max)
    }

    fn eval(self, space: &FemSpace, e: &NodalField) -> f64 {
        match self {
            ErrorNorm::L2Final | ErrorNorm::L2Max => space.l2_sq(e).max(0.0).sqrt(),
            ErrorNorm::H1Final | ErrorNorm::H1Max => (space.l2_sq(e) + space.h1_semi_sq(e)).max(0.0).sqrt(),
        }
    }
}

fn same_mesh(a: &FemSpace, b: &FemSpace) -> bool {
    std::ptr::eq(a, b) || (a.mesh().vertices() == b.mesh().vertices() && a.mesh().triangles() == b.mesh().triangles())
}

/// Distance to a trajectory on the same mesh whose time step divides ours;
/// the reference is sampled at our time nodes.
pub fn error_vs_reference(traj: &Trajectory, reference: &Trajectory, norm: ErrorNorm) -> Result<f64> {
    if !same_mesh(traj.space(), reference.space()) {
        return Err(Error::InvalidArgument("trajectories live on different meshes".into()));
    }
    let ratio = traj.tau() / reference.tau();
    let stride = ratio.round();
    if stride < 1.0 || (ratio - stride).abs() > 1e-9 * ratio || reference.steps() != traj.steps() * stride as usize {
        return Err(Error::InvalidArgument(format!(
            "reference step {} does not divide {} over the same interval",
            reference.tau(),
            traj.tau()
        )));
    }
    let stride = stride as usize;
    let space = traj.space();
    let diff = |j: usize| -> Result<f64> {
        let a = traj
            .state(j)
            .ok_or_else(|| Error::InvalidArgument(format!("state {j} was not retained")))?;
        let b = reference
            .state(j * stride)
            .ok_or_else(|| Error::InvalidArgument(format!("reference state {} was not retained", j * stride)))?;
        Ok(norm.eval(space, &NodalField::combination(&[(1.0, a), (-1.0, b)])))
    };
    if norm.is_max() {
        (1..=traj.steps()).try_fold(0.0f64, |acc, j| Ok(acc.max(diff(j)?)))
    } else {
        diff(traj.steps())
    }
}

/// Distance to the nodal interpolant of an exact solution.
pub fn error_vs_exact(traj: &Trajectory, exact: &SpaceTimeField, norm: ErrorNorm) -> Result<f64> {
    let space = traj.space();
    let diff = |j: usize| -> Result<f64> {
        let a = traj
            .state(j)
            .ok_or_else(|| Error::InvalidArgument(format!("state {j} was not retained")))?;
        let m = interpolate_nodal(space.mesh(), traj.time(j), |x, t| exact(x, t))?;
        Ok(norm.eval(space, &NodalField::combination(&[(1.0, a), (-1.0, &m)])))
    };
    if norm.is_max() {
        (1..=traj.steps()).try_fold(0.0f64, |acc, j| Ok(acc.max(diff(j)?)))
    } else {
        diff(traj.steps())
    }
}

/// Transfers a coarse P1 field through a chain of nested refinements
/// (parent lists from coarse to fine).
pub fn prolongate_chain(coarse: &NodalField, chain: &[&[[usize; 2]]]) -> NodalField {
    chain.iter().fold(coarse.clone(), |f, parents| prolongate(&f, parents))
}

/// Final-time distance between a coarse field prolonged to `fine_space`
/// and a fine-mesh field.
pub fn error_vs_prolonged(
    coarse: &NodalField,
    chain: &[&[[usize; 2]]],
    fine: &NodalField,
    fine_space: &FemSpace,
    norm: ErrorNorm,
) -> Result<f64> {
    let p = prolongate_chain(coarse, chain);
    p.ensure_len(fine_space.n_nodes())?;
    fine.ensure_len(fine_space.n_nodes())?;
    Ok(norm.eval(fine_space, &NodalField::combination(&[(1.0, &p), (-1.0, fine)])))
}

/// `eoc_k = log(e_k / e_{k+1}) / log(r_k / r_{k+1})` for consecutive
/// `(resolution, error)` pairs; `None` where an error is zero or not
/// finite.
pub fn eoc(errors: &[(f64, f64)]) -> Result<Vec<Option<f64>>> {
    if errors.len() < 2 {
        return Err(Error::InvalidArgument("at least two points are needed for an order".into()));
    }
    Ok(errors
        .windows(2)
        .map(|w| {
            let ((r0, e0), (r1, e1)) = (w[0], w[1]);
            let ok = |x: f64| x > 0.0 && x.is_finite();
            if ok(e0) && ok(e1) && ok(r0) && ok(r1) && r0 != r1 {
                Some((e0 / e1).ln() / (r0 / r1).ln())
            } else {
                None
            }
        })
        .collect())
}

/// Index of the first order below half of `target`.
pub fn stagnation_onset(orders: &[Option<f64>], target: f64) -> Option<usize> {
    orders.iter().position(|o| o.is_none_or(|o| o < 0.5 * target))
}
