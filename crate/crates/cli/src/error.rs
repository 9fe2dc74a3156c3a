use thiserror::Error;
use udmamba_core::Error as CoreError;

/// Process exit codes.
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Numeric(_) => EXIT_NUMERIC,
            CliError::Io(_) => EXIT_IO,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let msg = e.to_string();
        match e {
            CoreError::Numeric(_) => CliError::Numeric(msg),
            CoreError::Io(_) | CoreError::Parse { .. } => CliError::Io(msg),
            CoreError::Shape(_)
            | CoreError::Permutation(_)
            | CoreError::Contract(_)
            | CoreError::Config(_)
            | CoreError::Data(_)
            | CoreError::Json(_) => CliError::Config(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
