use std::process::ExitCode;

use thiserror::Error;

/// Failure classes with their process exit codes.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("operator failure: {0}")]
    Operator(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Other(_) => 1,
            CliError::Config(_) => 2,
            CliError::Input(_) => 3,
            CliError::Operator(_) => 4,
        })
    }
}

pub fn config(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

pub fn input(e: impl std::fmt::Display) -> CliError {
    CliError::Input(e.to_string())
}

pub fn other(e: impl std::fmt::Display) -> CliError {
    CliError::Other(e.to_string())
}
