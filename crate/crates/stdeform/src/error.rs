use std::process::ExitCode;

/// Everything a command can fail with.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] stdeform_core::Error),
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot read config {path}: {source}")]
    ConfigRead {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    /// `2` for anything caused by the invocation or its inputs, `1` otherwise.
    pub fn exit_code(&self) -> u8 {
        use stdeform_core::Error as E;
        match self {
            CliError::Config(_) | CliError::ConfigRead { .. } | CliError::Io { .. } => EXIT_CONFIG,
            CliError::Core(E::Parameter(_) | E::Dimension { .. } | E::Index { .. }) => EXIT_CONFIG,
            _ => EXIT_FAILURE,
        }
    }
}

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;

/// Exit status for a finished verification.
pub fn verdict(passed: bool) -> ExitCode {
    ExitCode::from(if passed { EXIT_OK } else { EXIT_FAILURE })
}
