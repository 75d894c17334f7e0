//! Error type of the experiment runner and its mapping to exit codes.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] alp_core::Error),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("toml parse error: {0}")]
    TomlParse(#[from] toml::de::Error),
    #[error("toml write error: {0}")]
    TomlWrite(#[from] toml::ser::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),
    #[error("missing metric columns in {path}: {columns:?}")]
    MissingColumns { path: PathBuf, columns: Vec<String> },
}

pub type Result<T> = std::result::Result<T, LabError>;

/// Process exit code for success.
pub const EXIT_OK: i32 = 0;
/// Process exit code for an unexpected failure.
pub const EXIT_CRASH: i32 = 1;
/// Process exit code for an invalid configuration.
pub const EXIT_CONFIG: i32 = 2;
/// Process exit code for a run aborted on divergence.
pub const EXIT_DIVERGENCE: i32 = 3;

impl LabError {
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Config(_) | LabError::TomlParse(_) => EXIT_CONFIG,
            LabError::Core(alp_core::Error::Config(_)) => EXIT_CONFIG,
            LabError::Core(alp_core::Error::Divergence { .. }) => EXIT_DIVERGENCE,
            _ => EXIT_CRASH,
        }
    }
}

/// Attaches a path to an i/o error.
pub(crate) fn io_at(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> LabError {
    let path = path.into();
    move |source| LabError::Io { path, source }
}
