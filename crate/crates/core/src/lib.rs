//! Polynomial surrogate models for PDE learning.
//!
//! Solutions are represented as tensor polynomials on Legendre grids and
//! fitted by minimising Sobolev-cubature losses, either in closed form for
//! linear problems or by gradient flows and Newton-type iterations.

pub mod basis;
pub mod grid;
pub mod kron;
pub mod loss;
pub mod operators;
pub mod problems;
pub mod runner;
pub mod sobolev;
pub mod solvers;

pub use basis::{Basis, BasisTransform, Surrogate};
pub use grid::{BoxDomain, Face, GridLimits, LegendreRule1D, MultiIndexSet, Side, TensorGrid};
pub use loss::{AssembledLoss, LossSpec, MetricSpec, Mode, PdeSystem};
pub use operators::{OperatorCache, SobolevWeight, Variant};
pub use sobolev::SobolevMetric;
pub use solvers::{FlowTrace, Objective, SolveReport, SolverKind};

/// Errors reported by the library.
#[derive(Debug, thiserror::Error)]
pub enum PsmError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("resource limit exceeded: {0}")]
    ResourceLimit(String),

    #[error("{what}: expected length {expected}, found {found}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        found: usize,
    },

    #[error("problem is nonlinear: {0}")]
    Nonlinear(String),

    #[error("solver failed: {0}")]
    SolverFailure(String),

    #[error("internal error: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, PsmError>;
