use std::process::ExitCode;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] mmseq::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Usage(String),
    /// The command ran but a checked property failed.
    #[error("verification failed: {0}")]
    Verification(String),
}

impl CliError {
    /// 1 for verification failures, 2 for everything that stopped the
    /// command from running.
    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Verification(_) => ExitCode::from(1),
            _ => ExitCode::from(2),
        }
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;
