//! Sparse primal-dual interior-point solver for linear and second-order cone
//! programs.

pub mod cones;
pub mod ipm;
pub mod ldl;
pub mod sparse;

pub use cones::Cone;
pub use ipm::{
    ConeProblem, ConeSolution, ConicBackend, InteriorPoint, IterationLog, Settings, SolverError,
    Status,
};
pub use sparse::{CscMatrix, Triplets};
