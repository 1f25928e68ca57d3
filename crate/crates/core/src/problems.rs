//! Benchmark problems: a radial applied field, a manufactured smooth
//! solution, and an initial datum that develops a gradient singularity.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::fem::Vec3;
use crate::mesh::SquareDomain;

/// `x -> m0(x)`
pub type InitialDatum = Arc<dyn Fn([f64; 2]) -> Vec3 + Send + Sync>;
/// `(x, t) -> f(x, t)`, also used for exact solutions
pub type SpaceTimeField = Arc<dyn Fn([f64; 2], f64) -> Vec3 + Send + Sync>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ProblemKind {
    Radial,
    Manufactured,
    Blowup,
}

impl FromStr for ProblemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "radial" => Ok(Self::Radial),
            "manufactured" => Ok(Self::Manufactured),
            "blowup" => Ok(Self::Blowup),
            _ => Err(Error::InvalidConfig(format!(
                "unknown problem '{s}' (expected radial, manufactured or blowup)"
            ))),
        }
    }
}

impl fmt::Display for ProblemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Radial => "radial",
            Self::Manufactured => "manufactured",
            Self::Blowup => "blowup",
        })
    }
}

#[derive(Clone)]
pub struct BenchmarkProblem {
    pub kind: ProblemKind,
    pub domain: SquareDomain,
    pub initial: InitialDatum,
    pub field: SpaceTimeField,
    /// Whether `field` ignores its time argument.
    pub static_field: bool,
    pub exact: Option<SpaceTimeField>,
    pub alpha: f64,
    pub lambda_sq: f64,
    pub final_time: f64,
}

impl fmt::Debug for BenchmarkProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BenchmarkProblem")
            .field("kind", &self.kind)
            .field("domain", &self.domain)
            .field("alpha", &self.alpha)
            .field("lambda_sq", &self.lambda_sq)
            .field("final_time", &self.final_time)
            .finish_non_exhaustive()
    }
}

impl BenchmarkProblem {
    pub fn by_kind(kind: ProblemKind, lambda_sq: Option<f64>) -> Result<Self> {
        let mut p = match kind {
            ProblemKind::Radial => radial_field_problem(lambda_sq.unwrap_or(0.01))?,
            ProblemKind::Manufactured => manufactured_problem(),
            ProblemKind::Blowup => blowup_problem(),
        };
        if let Some(l) = lambda_sq {
            if !(l > 0.0 && l.is_finite()) {
                return Err(Error::InvalidConfig(format!("lambda_sq = {l} must be positive")));
            }
            if kind == ProblemKind::Manufactured && l != p.lambda_sq {
                // the field is built for lambda_sq = 1
                p = manufactured_problem_with(p.alpha, l);
            }
            p.lambda_sq = l;
        }
        Ok(p)
    }
}

/// Constant `m0 = (0, 1, 0)` under the static field `f = x / |x|` on the
/// unit square. The field is undefined at the origin; `origin_value` is
/// used there.
pub fn radial_field_problem_with_origin(lambda_sq: f64, origin_value: Vec3) -> Result<BenchmarkProblem> {
    if !(lambda_sq > 0.0 && lambda_sq.is_finite()) {
        return Err(Error::InvalidArgument(format!("lambda_sq = {lambda_sq} must be positive")));
    }
    Ok(BenchmarkProblem {
        kind: ProblemKind::Radial,
        domain: SquareDomain::unit(),
        initial: Arc::new(|_| Vec3::new(0.0, 1.0, 0.0)),
        field: Arc::new(move |x, _| {
            let r = x[0].hypot(x[1]);
            if r == 0.0 {
                origin_value
            } else {
                Vec3::new(x[0] / r, x[1] / r, 0.0)
            }
        }),
        static_field: true,
        exact: None,
        alpha: 0.25,
        lambda_sq,
        final_time: 1.0,
    })
}

pub fn radial_field_problem(lambda_sq: f64) -> Result<BenchmarkProblem> {
    radial_field_problem_with_origin(lambda_sq, Vec3::zeros())
}

/// Profile `p(x1) = x1^3 - 3/2 x1^2 + 1/4` and its first two derivatives.
fn profile(x1: f64) -> (f64, f64, f64) {
    (x1 * x1 * x1 - 1.5 * x1 * x1 + 0.25, 3.0 * x1 * x1 - 3.0 * x1, 6.0 * x1 - 3.0)
}

/// Exact solution `m(x, t)` of the manufactured problem.
pub fn manufactured_solution(x: [f64; 2], t: f64, final_time: f64) -> Vec3 {
    let (p, _, _) = profile(x[0]);
    let w = 3.0 * PI / final_time;
    Vec3::new(-p * (w * t).sin(), (1.0 - p * p).sqrt(), -p * (w * t).cos())
}

/// `d/dt m(x, t)`
pub fn manufactured_time_derivative(x: [f64; 2], t: f64, final_time: f64) -> Vec3 {
    let (p, _, _) = profile(x[0]);
    let w = 3.0 * PI / final_time;
    Vec3::new(-p * w * (w * t).cos(), 0.0, p * w * (w * t).sin())
}

/// `Δm(x, t)` (only `x1` enters).
pub fn manufactured_laplacian(x: [f64; 2], t: f64, final_time: f64) -> Vec3 {
    let (p, dp, ddp) = profile(x[0]);
    let w = 3.0 * PI / final_time;
    let q = (1.0 - p * p).sqrt();
    let ddq = -(dp * dp + p * ddp) / q - p * p * dp * dp / (q * q * q);
    Vec3::new(-ddp * (w * t).sin(), ddq, -ddp * (w * t).cos())
}

fn manufactured_problem_with(alpha: f64, lambda_sq: f64) -> BenchmarkProblem {
    let final_time = 0.2;
    BenchmarkProblem {
        kind: ProblemKind::Manufactured,
        domain: SquareDomain::unit(),
        initial: Arc::new(move |x| manufactured_solution(x, 0.0, final_time)),
        field: Arc::new(move |x, t| {
            let m = manufactured_solution(x, t, final_time);
            let mt = manufactured_time_derivative(x, t, final_time);
            alpha * mt + m.cross(&mt) - lambda_sq * manufactured_laplacian(x, t, final_time)
        }),
        static_field: false,
        exact: Some(Arc::new(move |x, t| manufactured_solution(x, t, final_time))),
        alpha,
        lambda_sq,
        final_time,
    }
}

/// Smooth solution depending on `x1` and `t` only, with the applied field
/// chosen so that it solves the equation (`alpha = 0.2`, `lambda^2 = 1`).
pub fn manufactured_problem() -> BenchmarkProblem {
    manufactured_problem_with(0.2, 1.0)
}

/// Initial datum on `(-1/2, 1/2)^2` with `A = (1 - 2|x|)^4`:
/// `(2 x A, A² - |x|²) / (A² + |x|²)` inside the disk of radius 1/2 and
/// the south pole outside. The denominator `A² + |x|²` is the one that
/// makes the datum unit length.
pub fn blowup_initial(x: [f64; 2]) -> Vec3 {
    let r2 = x[0] * x[0] + x[1] * x[1];
    let r = r2.sqrt();
    if r >= 0.5 {
        return Vec3::new(0.0, 0.0, -1.0);
    }
    let a = (1.0 - 2.0 * r).powi(4);
    Vec3::new(2.0 * x[0] * a, 2.0 * x[1] * a, a * a - r2) / (a * a + r2)
}

/// Zero field, `lambda^2 = 1`, `alpha = 0.25`, `T = 0.3`.
pub fn blowup_problem() -> BenchmarkProblem {
    BenchmarkProblem {
        kind: ProblemKind::Blowup,
        domain: SquareDomain::centered_unit(),
        initial: Arc::new(blowup_initial),
        field: Arc::new(|_, _| Vec3::zeros()),
        static_field: true,
        exact: None,
        alpha: 0.25,
        lambda_sq: 1.0,
        final_time: 0.3,
    }
}
