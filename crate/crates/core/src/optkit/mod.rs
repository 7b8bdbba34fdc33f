//! Numerical kernels: a dense simplex LP solver and a transportation solver,
//! plus brute-force reference oracles used by the test suites.

mod lp;
pub mod oracle;
mod transport;

pub use lp::{solve_lp, LinearProgram, LpSolution};
pub use transport::{objective as transport_objective, solve_transportation, TransportSolution, TransportationProblem};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptError {
    #[error("linear program is infeasible (phase-one residual {residual:e})")]
    Infeasible { residual: f64 },
    #[error("linear program is unbounded in the objective direction")]
    Unbounded,
    #[error("malformed problem: {0}")]
    Malformed(String),
    #[error("transportation problem is unbalanced: supply {supply} vs demand {demand}")]
    Unbalanced { supply: u64, demand: u64 },
    #[error("demand of column {column} cannot be routed from any source")]
    IsolatedDemand { column: usize },
}
