use std::path::PathBuf;

use dgm_core::DgmError;

/// Process exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFICATION: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed input at byte {offset}: {reason}")]
    Format { path: PathBuf, offset: u64, reason: String },
    #[error("verification failed: {0}")]
    Verification(String),
    #[error(transparent)]
    Core(#[from] DgmError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => EXIT_USAGE,
            Self::Io { .. } | Self::Format { .. } => EXIT_IO,
            Self::Verification(_) => EXIT_VERIFICATION,
            Self::Core(e) => match e {
                DgmError::NonFinite(_) | DgmError::UndefinedLoss(_) | DgmError::UndefinedMetric(_) => EXIT_VERIFICATION,
                _ => EXIT_USAGE,
            },
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, offset: u64, reason: impl Into<String>) -> Self {
        Self::Format { path: path.into(), offset, reason: reason.into() }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
