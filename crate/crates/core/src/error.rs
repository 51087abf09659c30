use thiserror::Error;

/// Errors raised across the estimation pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum MdpdeError {
    /// A parameter point, observation or configuration lies outside the
    /// domain where the requested quantity is defined.
    #[error("domain error: {0}")]
    Domain(String),

    /// The parameter sits on the edge of the feasible region where score and
    /// information are not defined.
    #[error("parameter on the feasible boundary: {0}")]
    Boundary(String),

    /// Quadrature or a linear solve failed to reach the requested accuracy.
    #[error("numerical failure: {message} (error estimate {error_estimate:e})")]
    Numerical { message: String, error_estimate: f64 },

    /// A matrix needed for the sandwich covariance is singular or too badly
    /// conditioned to invert.
    #[error("ill-conditioned matrix (condition number {condition_number:e}): {message}")]
    IllConditioned { message: String, condition_number: f64 },

    #[error("insufficient data: need at least {needed} observations, got {got}")]
    InsufficientData { needed: usize, got: usize },

    /// No optimizer start satisfied the convergence criterion.
    #[error("no start converged: {}", .traces.join("; "))]
    NonConvergence { traces: Vec<String> },

    #[error("invalid configuration: {0}")]
    Config(String),

    /// A Monte Carlo cell failed as a whole.
    #[error("study failed in cell {cell}: {message}")]
    Study { cell: usize, message: String },
}

pub type Result<T> = std::result::Result<T, MdpdeError>;

impl MdpdeError {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        MdpdeError::Domain(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>, error_estimate: f64) -> Self {
        MdpdeError::Numerical {
            message: msg.into(),
            error_estimate,
        }
    }
}
