//! The end-to-end training loop: alternating WGAN-GP critic, energy,
//! reward, and generator+encoder updates with Adam, a two-level learning
//! rate schedule, divergence handling, binary checkpoints, and per-epoch
//! metric logging.

mod adam;
mod checkpoint;
mod config;
mod metrics;
mod trainer;

pub use adam::{adam_step, lr_at_epoch, AdamState, ADAM_EPSILON};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use config::TrainConfig;
pub use metrics::{
    divergence_check, metric_csv_row, write_metrics_csv, write_metrics_jsonl, MetricRecord,
    FD_RISE_LIMIT, METRIC_CSV_HEADER,
};
pub use trainer::{derive_rng, evaluate_fd, latent_values, train, TrainOutput, UpdateAudit};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Diff(#[from] crate::diffcore::DiffError),
    #[error(transparent)]
    Mol(#[from] crate::molgraph::MolError),
    #[error("non-finite gradient at tensor {index}")]
    NonFiniteGradient { index: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint version {found} unsupported (expected {supported})")]
    CheckpointVersion { found: u32, supported: u32 },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
