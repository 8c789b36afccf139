use std::path::PathBuf;

use hiercvae_core::Error as CoreError;

/// Process exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum AppError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {detail}")]
    Parse { path: PathBuf, line: usize, detail: String },
    #[error("data: {0}")]
    Data(String),
    #[error("checkpoint {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },
    #[error(transparent)]
    Core(#[from] CoreError),
}

pub type AppResult<T> = Result<T, AppError>;

impl AppError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AppError::Io { path: path.into(), source }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Usage(_) => EXIT_USAGE,
            AppError::Io { .. } | AppError::Parse { .. } | AppError::Data(_) | AppError::Checkpoint { .. } => EXIT_DATA,
            AppError::Core(e) => match e {
                CoreError::Contract(_) | CoreError::Config(_) => EXIT_USAGE,
                CoreError::Size(_) | CoreError::Schema(_) | CoreError::Ordering { .. } => EXIT_DATA,
                CoreError::Dimension { .. } | CoreError::Domain { .. } | CoreError::Numeric(_) => EXIT_NUMERIC,
            },
        }
    }
}
