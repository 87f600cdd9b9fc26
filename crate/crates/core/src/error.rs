use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument lies outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A caller broke a documented precondition (mismatched shapes, bounds, indices).
    #[error("contract violation: {0}")]
    Contract(String),

    /// An intermediate quantity became non-finite.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Adaptive quadrature ran out of subdivisions.
    #[error("quadrature did not converge (best estimate {best}, error estimate {error})")]
    Convergence { best: f64, error: f64 },

    /// Malformed binary input (IDX files, checkpoints).
    #[error("parse error at byte offset {offset}: {message}")]
    Parse { offset: usize, message: String },

    /// Invalid experiment configuration.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
