//! Datasets, architecture-derived networks and the pre-trained model zoo.

mod dataset;
mod net;
pub mod store;
mod train;

use thiserror::Error;

use crate::archspace::ArchError;
use crate::numerics::NumericsError;

pub use dataset::{export_csv, ingest_csv, make_blobs, split_sizes, DatasetBundle, Split, VARIANCE_FLOOR};
pub use net::{expected_param_count, MaterializedNet, NetDims};
pub use train::{accuracy, pretrain, train_net, TrainConfig, TrainStats, TrainedModelRecord};

#[derive(Debug, Error)]
pub enum ZooError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("csv row {row}, column {col}: {message}")]
    Csv { row: usize, col: usize, message: String },
    #[error("label column `{0}` not found")]
    MissingColumn(String),
    #[error("training of {arch} diverged at step {step}: {reason}")]
    Diverged { arch: String, step: u64, reason: String },
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    CsvLib(#[from] csv::Error),
}
