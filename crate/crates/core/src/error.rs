use thiserror::Error;

/// Unified error type for the runtime.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid model, twig, pruning, or decoding configuration.
    #[error("configuration error: {0}")]
    Config(String),
    /// Caller-supplied data violates a precondition (ids, positions, layouts).
    #[error("input error: {0}")]
    Input(String),
    /// Shape or bookkeeping violation inside the runtime.
    #[error("internal error: {0}")]
    Internal(String),
    /// Arithmetic request with no feasible answer.
    #[error("domain error: {0}")]
    Domain(String),
    /// Training diverged or was asked to do something unsupportable.
    #[error("training error: {0}")]
    Training(String),
    /// Timing measurement could not be taken.
    #[error("measurement error: {0}")]
    Measurement(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    /// Weight container is malformed.
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
