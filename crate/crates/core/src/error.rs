use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid experiment or detector configuration.
    #[error("configuration error: {0}")]
    Config(String),
    /// NaN or infinite input where a finite value is required.
    #[error("numeric input error: {0}")]
    NumericInput(String),
    /// A matrix factorization failed (matrix not Hermitian PD / PSD).
    #[error("decomposition error: {0}")]
    Decomposition(String),
    /// A documented precondition was violated by the caller.
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("CSV error on {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    /// Configuration problems are the caller's fault; everything else is a
    /// runtime failure.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
