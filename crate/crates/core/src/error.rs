use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("covariance matrix is not positive semidefinite (pivot {pivot:.3e} at row {row})")]
    NotPsd { row: usize, pivot: f64 },

    #[error("{what} did not converge after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    /// The simplex iteration budget ran out; `basis` lists the basic columns.
    #[error("simplex stalled after {iterations} pivots (basis {basis:?})")]
    SimplexStalled {
        iterations: usize,
        basis: Vec<usize>,
    },

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("unbounded: {0}")]
    Unbounded(String),

    #[error("data error: {0}")]
    Data(String),

    /// Every schema violation found in a config, not only the first.
    #[error("invalid config: {}", .0.join("; "))]
    Config(Vec<String>),
}

impl Error {
    /// True for numerical failures of a solver, as opposed to bad input.
    pub fn is_solver_failure(&self) -> bool {
        matches!(
            self,
            Error::NonConvergence { .. }
                | Error::SimplexStalled { .. }
                | Error::Infeasible(_)
                | Error::Unbounded(_)
        )
    }
}
