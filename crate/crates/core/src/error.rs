use thiserror::Error;

/// Failure classes surfaced by the library. The CLI maps each class to an exit code.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or inconsistent input (dimensions, non-finite values, bad covariances).
    #[error("invalid input: {0}")]
    Input(String),
    /// Parameters outside their admissible ranges.
    #[error("invalid configuration: {0}")]
    Config(String),
    /// Observability, controllability or eigenspace conditions do not hold.
    #[error("structural condition violated: {0}")]
    Structural(String),
    /// The system is valid but outside what this implementation handles.
    #[error("unsupported: {0}")]
    Unsupported(String),
    /// Numerical breakdown: divergence, overflow, ill-conditioning.
    #[error("numeric failure: {0}")]
    Numeric(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Short machine-readable tag.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Input(_) => "input",
            Error::Config(_) => "config",
            Error::Structural(_) => "structural",
            Error::Unsupported(_) => "unsupported",
            Error::Numeric(_) => "numeric",
        }
    }
}
