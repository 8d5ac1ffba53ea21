use thiserror::Error;

/// Errors raised by parameter validation, simulation and the CLI.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid parameters or run configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Inputs that do not match the grid or window contract.
    #[error("input error: {0}")]
    Input(String),

    /// Arguments outside the domain of a closed-form evaluator.
    #[error("domain error: {0}")]
    Domain(String),

    /// An iterative routine failed to converge or produced a non-finite value.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Input(_) | Error::Domain(_) => 1,
            Error::Io(_) | Error::Json(_) => 2,
            Error::Numeric(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
