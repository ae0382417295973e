use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("missing artifact {path}: {reason}")]
    Missing { path: PathBuf, reason: String },

    #[error(transparent)]
    Core(#[from] cald_core::Error),
}

impl CliError {
    /// Process exit code: 2 config, 3 missing artifact, 4 numeric fault, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Missing { .. } => 3,
            CliError::Core(e) if e.is_numeric_fault() => 4,
            CliError::Core(cald_core::Error::Io { source, .. })
                if source.kind() == std::io::ErrorKind::NotFound =>
            {
                3
            }
            CliError::Core(cald_core::Error::Waypoints { .. }) => 3,
            CliError::Core(_) => 1,
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}
