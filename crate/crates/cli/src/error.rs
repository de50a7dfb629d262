use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{} already exists; pass --force to overwrite", .0.display())]
    Exists(PathBuf),

    #[error("refusing to mix artifacts: {0}")]
    Mismatch(String),

    #[error("acceptance criteria failed: {0}")]
    Acceptance(String),

    #[error("{context}: {source}")]
    File {
        context: String,
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] pmri_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_ACCEPTANCE: i32 = 3;
pub const EXIT_IO: i32 = 4;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Acceptance(_) => EXIT_ACCEPTANCE,
            CliError::Io(_) | CliError::File { .. } => EXIT_IO,
            CliError::Core(pmri_core::Error::Io(_) | pmri_core::Error::BadFile(_)) => EXIT_IO,
            _ => EXIT_VALIDATION,
        }
    }
}

/// Attaches the offending path to an I/O error.
pub fn at<T>(path: &std::path::Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|source| CliError::File {
        context: path.display().to_string(),
        source,
    })
}
