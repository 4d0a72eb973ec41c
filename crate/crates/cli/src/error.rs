//! CLI error type with the stable exit-code contract:
//! 0 success, 2 config error, 3 numerical failure, 4 verification failure,
//! 5 I/O.

use latentflow::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("verification failed: {0}")]
    Verification(String),

    #[error("i/o failure: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Verification(_) => 4,
            CliError::Io(_) => 5,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match &e {
            CoreError::NotPositiveDefinite { .. }
            | CoreError::DivergedTraining { .. }
            | CoreError::NonFiniteUpdate { .. } => CliError::Numeric(e.to_string()),
            CoreError::DegenerateFit(_) => CliError::Verification(e.to_string()),
            CoreError::Io(_) | CoreError::InvalidModelFile(_) => CliError::Io(e.to_string()),
            CoreError::ShapeMismatch(_)
            | CoreError::NotSymmetric { .. }
            | CoreError::TooFewSamples { .. }
            | CoreError::InvalidConfig(_) => CliError::Config(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
