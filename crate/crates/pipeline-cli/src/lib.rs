//! Glue for the command-line pipeline: run configuration, dataset
//! loading and splitting, the training loop, checkpointing, and
//! evaluation over a manifest.

pub mod checkpoint;
pub mod config;
pub mod dataio;
pub mod evalcmd;
pub mod train;

pub use config::RunConfig;
pub use dataio::{load_dataset, split_counts, split_dataset, Dataset};
pub use train::{train, TraceRow, TrainReport};

use std::fmt;

pub type Result<T> = std::result::Result<T, CliError>;

/// Failure classes, each mapped to a process exit code: usage errors
/// exit 1, data errors 2, numeric failures 3.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "usage: {}", msg),
            CliError::Data(msg) => write!(f, "data: {}", msg),
            CliError::Numeric(msg) => write!(f, "numeric: {}", msg),
        }
    }
}

impl std::error::Error for CliError {}

impl From<acie::Error> for CliError {
    fn from(e: acie::Error) -> Self {
        match e {
            acie::Error::Config(msg) => CliError::Usage(msg),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<fusedet::Error> for CliError {
    fn from(e: fusedet::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<evalkit::Error> for CliError {
    fn from(e: evalkit::Error) -> Self {
        CliError::Data(e.to_string())
    }
}
