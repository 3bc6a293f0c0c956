use std::path::PathBuf;

use prompt_adapt_core::checkpoint::CheckpointError;
use prompt_adapt_core::Error as CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("refusing to overwrite {0} (pass --force)")]
    Exists(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(CoreError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Exists(_) => 2,
            CliError::MissingArtifact(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Io { .. } | CliError::Core(_) => 1,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            CoreError::Config(_)
            | CoreError::OutOfRange(_)
            | CoreError::UnknownFamily(_)
            | CoreError::Placement(_)
            | CoreError::EmptySchedule
            | CoreError::EmptyDataset
            | CoreError::LabelOutOfRange { .. } => CliError::Config(e.to_string()),
            CoreError::Checkpoint(ref c) => match c {
                CheckpointError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
                    CliError::MissingArtifact(e.to_string())
                }
                CheckpointError::Io { .. } => CliError::Core(e),
                _ => CliError::MissingArtifact(format!("unreadable artifact: {e}")),
            },
            other => CliError::Core(other),
        }
    }
}
