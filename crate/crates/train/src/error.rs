use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at epoch {epoch}, window {window}: loss {loss}")]
    Divergence { epoch: usize, window: usize, loss: f64 },
    #[error("ensemble member with seed {seed} failed: {source}")]
    Member {
        seed: u64,
        #[source]
        source: Box<TrainError>,
    },
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("leakage audit failed: {0}")]
    Leakage(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("test outputs overlap: {0}")]
    Overlap(String),
    #[error(transparent)]
    Nn(#[from] din_nn::NnError),
    #[error(transparent)]
    Core(#[from] din_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;
