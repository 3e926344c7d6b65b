use thiserror::Error;

/// Errors raised by the laboratory.
///
/// The variants map onto the exit statuses of the command-line runner:
/// configuration problems exit with 2, numerical budget problems with 3.
#[derive(Debug, Error)]
pub enum LabError {
    /// Inputs outside the domain of an operation (mismatched manifolds,
    /// lengths, non-positive samples, ...).
    #[error("domain error: {0}")]
    Domain(String),
    /// A numerical budget was exceeded or a run saturated its resolution.
    #[error("budget error: {0}")]
    Budget(String),
    /// Invalid run configuration.
    #[error("config error: {0}")]
    Config(String),
    /// An internal consistency check failed; this signals a bug.
    #[error("internal error: {0}")]
    Internal(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, LabError>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(LabError::Domain(msg.into()))
}
