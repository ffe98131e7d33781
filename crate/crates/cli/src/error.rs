use std::path::Path;

use depthadapt::Error;

/// Command failure, classified by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Exit code 2.
    #[error("configuration error: {0}")]
    Config(String),
    /// Exit code 3.
    #[error("data error: {0}")]
    Data(String),
    /// Exit code 4.
    #[error("runtime error: {0}")]
    Runtime(String),
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) => EXIT_DATA,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Data(format!("{}: {e}", path.display()))
    }
}

fn class(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::ManifestMismatch(_) => EXIT_CONFIG,
        Error::Ingestion { .. }
        | Error::Dataset(_)
        | Error::SubsetSize { .. }
        | Error::Checkpoint(_)
        | Error::EmptyEvaluation(_)
        | Error::Range { .. }
        | Error::InsufficientData(_)
        | Error::PowerLog { .. }
        | Error::Io { .. } => EXIT_DATA,
        Error::Sample { source, .. } => class(source),
        Error::Shape(_)
        | Error::Argument(_)
        | Error::Degenerate(_)
        | Error::Accounting { .. }
        | Error::Divergence { .. }
        | Error::Backend(_) => EXIT_RUNTIME,
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = match &e {
            Error::Config(m) => m.clone(),
            other => other.to_string(),
        };
        match class(&e) {
            EXIT_CONFIG => CliError::Config(msg),
            EXIT_DATA => CliError::Data(msg),
            _ => CliError::Runtime(msg),
        }
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Data(format!("csv: {e}"))
    }
}
