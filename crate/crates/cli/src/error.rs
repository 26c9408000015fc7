use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("stage `{stage}` has not been run: missing {path}; run `stace {stage}` first")]
    MissingStage { stage: &'static str, path: String },
    #[error("{0}")]
    Precondition(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: String, source: serde_json::Error },
    #[error(transparent)]
    Core(#[from] stace_core::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.display().to_string(), source }
    }

    pub fn json(path: &Path, source: serde_json::Error) -> Self {
        CliError::Json { path: path.display().to_string(), source }
    }

    /// 1 for unmet preconditions, 2 for I/O and parse failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::MissingStage { .. } | CliError::Precondition(_) => 1,
            CliError::Config(_) | CliError::Io { .. } | CliError::Json { .. } => 2,
            CliError::Core(e) => match e {
                stace_core::Error::Io(_) | stace_core::Error::Parse(_) => 2,
                _ => 1,
            },
        }
    }
}
