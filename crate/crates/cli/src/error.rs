use std::fmt;

use lqae::LqaeError;

/// Failure of a subcommand, carrying the process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config keys or inputs that were never usable. Exit code 2.
    Usage(String),
    /// Something went wrong while doing the work. Exit code 3.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<LqaeError> for CliError {
    fn from(e: LqaeError) -> Self {
        match e {
            LqaeError::Config(c) => CliError::Usage(c.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<lqae::training::ConfigError> for CliError {
    fn from(e: lqae::training::ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
