use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    #[error("field has {found} nodes but the mesh has {expected}")]
    MeshMismatch { expected: usize, found: usize },

    #[error("non-finite value at node {node}")]
    NonFinite { node: usize },

    #[error("degenerate tangent anchor at node {node} (|a| = {modulus:e})")]
    DegenerateAnchor { node: usize, modulus: f64 },

    #[error("linear solver did not converge after {iterations} iterations (relative residual {residual:e})")]
    SolverDiverged { iterations: usize, residual: f64 },

    #[error("fixed-point iteration did not converge after {iterations} sweeps (last update {update:e})")]
    FixedPointDiverged { iterations: usize, update: f64 },

    #[error("time step {step} failed: {source}")]
    StepFailed {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Whether the error comes from the numerics (as opposed to bad input).
    /// Anything that stops a time step counts.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::DegenerateAnchor { .. }
                | Error::SolverDiverged { .. }
                | Error::FixedPointDiverged { .. }
                | Error::StepFailed { .. }
        )
    }

    /// Index of the time step that failed, if the error carries one.
    pub fn step_index(&self) -> Option<usize> {
        match self {
            Error::StepFailed { step, .. } => Some(*step),
            _ => None,
        }
    }
}
