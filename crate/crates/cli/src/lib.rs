//! Batch command-line front end for `mmtr`: simulate, fit, tune, predict,
//! eval and replicate, with CSV/JSON file formats (see [`io`]).

pub mod commands;
pub mod io;

use std::fmt;

use mmtr::MmtrError;

/// Failure of a command, carrying its process exit code.
#[derive(Debug)]
pub enum CliError {
    /// Invalid flag values (exit 2).
    Usage(String),
    /// Reading or writing a file failed (exit 3).
    Io(String),
    /// `--strict` and a solver did not converge (exit 4).
    NonConvergence(String),
    /// Conditional prediction for a group absent from the training data (exit 5).
    UnknownGroup(String),
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::NonConvergence(_) => 4,
            CliError::UnknownGroup(_) => 5,
            CliError::Other(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "invalid arguments: {m}"),
            CliError::Io(m) => write!(f, "{m}"),
            CliError::NonConvergence(m) => write!(f, "not converged: {m}"),
            CliError::UnknownGroup(g) => write!(f, "group `{g}` is not present in the training data"),
            CliError::Other(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<MmtrError> for CliError {
    fn from(e: MmtrError) -> Self {
        match e {
            MmtrError::Io(m) => CliError::Io(m),
            MmtrError::UnknownGroup(g) => CliError::UnknownGroup(g),
            other => CliError::Other(other.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
