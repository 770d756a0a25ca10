//! Error type shared by all modules.

use thiserror::Error;

/// Errors reported by the laboratory.
#[derive(Debug, Error)]
pub enum LabError {
    /// An input value is outside the domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A return-time law failed validation.
    #[error("invalid tail law: {0}")]
    InvalidTail(String),

    /// An iterative scheme failed to converge.
    #[error("numerical error: {what} (residual {residual:.3e})")]
    Numerical { what: String, residual: f64 },

    /// A guard against runaway enumeration or recursion fired.
    #[error("resource limit exceeded: {0}")]
    Resource(String),

    /// The requested computation is not defined for the given parameters.
    #[error("unsupported: {0}")]
    Unsupported(String),

    /// A spec string or file could not be parsed.
    #[error("parse error: {0}")]
    Parse(String),
}

impl LabError {
    pub fn domain(msg: impl Into<String>) -> Self {
        LabError::Domain(msg.into())
    }

    pub fn numerical(what: impl Into<String>, residual: f64) -> Self {
        LabError::Numerical {
            what: what.into(),
            residual,
        }
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
