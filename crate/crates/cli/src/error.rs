use std::process::ExitCode;

use survbench_core::{CoreError, ErrorClass};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: CoreError,
    },

    #[error("cannot write {path}: {message}")]
    Output { path: String, message: String },
}

impl CliError {
    pub fn stage(stage: impl Into<String>, source: CoreError) -> Self {
        Self::Stage { stage: stage.into(), source }
    }

    pub fn output(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        Self::Output { path: path.display().to_string(), message: e.to_string() }
    }

    /// 2 configuration, 3 data, 4 numeric failure.
    pub fn exit_code(&self) -> ExitCode {
        let class = match self {
            Self::Config(_) => ErrorClass::Config,
            Self::Stage { source, .. } => source.class(),
            Self::Output { .. } => ErrorClass::Data,
        };
        ExitCode::from(match class {
            ErrorClass::Config => 2,
            ErrorClass::Data => 3,
            ErrorClass::Numeric => 4,
        })
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
