//! Finite element integrators for the Landau-Lifshitz-Gilbert equation on
//! planar domains: a BDF2-type tangent-plane scheme, the first-order
//! tangent-plane scheme and the implicit midpoint rule.

pub mod error;
pub mod experiments;
pub mod fem;
pub mod integrators;
pub mod mesh;
pub mod observables;
pub mod problems;
pub mod solver;
pub mod sparse;
pub mod tangent;

pub use error::{Error, Result};
pub use fem::{FemSpace, NodalField, Vec3};
pub use integrators::{run_simulation, Problem, Scheme, SolverConfig, Trajectory};
pub use mesh::{build_structured_mesh, Mesh, SquareDomain};
