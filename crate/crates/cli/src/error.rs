use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("usage error: {0}")]
    Usage(String),
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },
    #[error("{}: row {row}: {message}", file.display())]
    Ingestion { file: PathBuf, row: usize, message: String },
    #[error("estimation failed: {0}")]
    Estimation(#[from] robust_filter::Error),
}

impl CliError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Io { .. } => 1,
            CliError::Usage(_) => 2,
            CliError::Config { .. } => 3,
            CliError::Ingestion { .. } => 4,
            CliError::Estimation(_) => 5,
        }
    }
}
