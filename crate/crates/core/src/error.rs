use thiserror::Error;

/// Errors shared across the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: String, reason: String },

    #[error("reference singular: tension {tension} reaches or exceeds EA = {ea}")]
    SingularReference { tension: f64, ea: f64 },

    #[error("non-finite evaluation of {function} at timestep {timestep}, sample {sample}")]
    NonFiniteEvaluation {
        function: &'static str,
        timestep: usize,
        sample: usize,
    },

    #[error("subproblem solver failed: {status}")]
    SolverFailure { status: String },

    #[error("baseline unavailable: {0}")]
    BaselineUnavailable(String),

    #[error("config validation failed at {path}: {message}")]
    ConfigValidation { path: String, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(name: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name: name.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
