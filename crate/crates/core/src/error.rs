use thiserror::Error;

use survbench_autodiff::AutodiffError;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("{0}")]
    Data(String),

    #[error("monotone likelihood: coefficient of covariate `{covariate}` diverges (bound {bound})")]
    Divergence { covariate: String, bound: f64 },

    #[error("singular Hessian even after adding a ridge of {ridge:e}; consider removing collinear covariates or adding a ridge penalty")]
    Singular { ridge: f64 },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Autodiff(#[from] AutodiffError),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Broad failure class, used by the command line for exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
}

impl CoreError {
    pub fn class(&self) -> ErrorClass {
        match self {
            CoreError::Config(_) => ErrorClass::Config,
            CoreError::Parse { .. }
            | CoreError::Schema(_)
            | CoreError::Validation(_)
            | CoreError::Data(_)
            | CoreError::Io(_) => ErrorClass::Data,
            CoreError::Divergence { .. } | CoreError::Singular { .. } | CoreError::Numeric(_) => ErrorClass::Numeric,
            CoreError::Autodiff(e) => match e {
                AutodiffError::Layer(_) => ErrorClass::Config,
                AutodiffError::Checkpoint(_) => ErrorClass::Data,
                _ => ErrorClass::Numeric,
            },
        }
    }
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
