use thiserror::Error;

/// Errors raised by the numerical layers of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid input: {0}")]
    Validation(String),

    #[error(
        "matrix is not positive semidefinite: eigenvalue {min_eigenvalue:e} below -{tolerance:e}"
    )]
    NotPsd { min_eigenvalue: f64, tolerance: f64 },

    #[error(
        "matrix is singular or not positive definite (smallest eigenvalue {min_eigenvalue:e})"
    )]
    Singular { min_eigenvalue: f64 },

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("integration failed at t = {t}: {reason}")]
    IntegrationFailure { t: f64, reason: String },

    #[error("no Gaussian equilibrium for sigma = 0 (the flow concentrates to a Dirac at u0)")]
    NoGaussianEquilibrium,

    #[error("source covariance is singular; the optimal map is undefined")]
    DegenerateSource,

    #[error("resource limit exceeded: {0}")]
    Resource(String),

    #[error("invalid configuration: {0}")]
    Configuration(String),

    #[error("step size {h} exceeds stability guard {limit}")]
    StepTooLarge { h: f64, limit: f64 },

    #[error("invariant violated: {0}")]
    InvariantViolation(String),
}

pub type Result<T> = std::result::Result<T, Error>;
