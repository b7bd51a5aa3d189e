use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("missing {path}: run `din {producer}` first")]
    MissingArtifact { path: PathBuf, producer: &'static str },

    #[error("config hash mismatch in {path}: expected {expected}, found {found}")]
    HashMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("training failed: {0}")]
    Training(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) | CliError::MissingArtifact { .. } | CliError::HashMismatch { .. } => 3,
            CliError::Training(_) => 4,
        }
    }

    pub fn data(e: impl std::fmt::Display) -> Self {
        CliError::Data(e.to_string())
    }

    pub fn config(e: impl std::fmt::Display) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<din_train::TrainError> for CliError {
    fn from(e: din_train::TrainError) -> Self {
        use din_train::TrainError as E;
        match e {
            E::Config(_) | E::Unsupported(_) => CliError::Config(e.to_string()),
            E::Divergence { .. } | E::Member { .. } | E::Nn(_) => CliError::Training(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<din_core::Error> for CliError {
    fn from(e: din_core::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
