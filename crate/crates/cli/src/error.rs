use std::path::PathBuf;

use unlearn_core::UnlearnError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Unreadable, malformed or invalid configuration.
    #[error("config error: {0}")]
    Config(String),
    #[error("runtime error: {0}")]
    Runtime(#[from] UnlearnError),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing artifacts in {dir}: {what}")]
    MissingArtifacts { dir: PathBuf, what: String },
    #[error("malformed artifact {path}: {message}")]
    BadArtifact { path: PathBuf, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            _ => 3,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
