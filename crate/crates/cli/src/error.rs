//! CLI-level errors and their process exit codes.

use std::process::ExitCode;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Core(#[from] mlla_core::Error),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },

    #[error("format error in {field}: {message}")]
    Format { field: String, message: String },

    #[error("validation error: {0}")]
    Validation(String),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(field: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Format {
            field: field.into(),
            message: message.into(),
        }
    }

    /// 1 for validation/format problems, 2 for numeric failures.
    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Core(mlla_core::Error::Numeric(_)) => ExitCode::from(2),
            _ => ExitCode::from(1),
        }
    }
}
