use std::fmt;

use owseg_core::Error as CoreError;

pub type Result<T> = std::result::Result<T, CliError>;

/// Failure of a command, classified by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Invalid configuration, arguments or experiment state.
    Usage(String),
    /// Filesystem failure.
    Io(String),
    /// Training or inference produced non-finite values.
    Numeric(String),
    Core(CoreError),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    /// 2 for configuration and user errors, 3 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Numeric(_) | CliError::Core(CoreError::Numeric(_)) => 3,
            CliError::Core(CoreError::Internal(_)) => 1,
            _ => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Io(m) => write!(f, "io error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric failure: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Usage(format!("invalid JSON: {e}"))
    }
}
