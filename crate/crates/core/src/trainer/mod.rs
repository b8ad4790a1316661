//! Training drivers over sharded synthetic data.
//!
//! Three algorithms share one worker loop: synchronous SGD (gradients are
//! aggregated, every worker applies the same step), asynchronous SGD (the
//! server applies each client's gradient as it arrives) and elastic
//! averaging (clients train locally and periodically exchange parameters
//! with a server-held center).

mod data;
mod driver;
mod metrics;
mod model;

use thiserror::Error;

pub use data::{gaussian_blobs, parse_csv, shard_data, split_samples, two_moons, Dataset, DatasetSpec, Sample};
pub use driver::{
    run_async_sgd, run_elastic_sgd, run_sync_sgd, run_worker, train_inproc, RunOutcome, WorkerEpoch, WorkerOutcome,
};
pub use metrics::{aggregate, mode_label, write_metrics, MetricsRecord, METRICS_HEADER};
pub use model::{Model, ModelKind};

use crate::kvstore::KvError;
use crate::transport::TransportError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("data: {0}")]
    Data(String),
    #[error("loss is not finite")]
    NonFiniteLoss,
    #[error("worker {rank} diverged at epoch {epoch}, iteration {iteration}")]
    Divergence { rank: u32, epoch: usize, iteration: usize },
    #[error("configuration: {0}")]
    Config(String),
    #[error("worker {rank}: {source}")]
    Worker {
        rank: u32,
        #[source]
        source: Box<TrainError>,
    },
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl TrainError {
    /// True when this error (possibly wrapped) is a divergence.
    pub fn is_divergence(&self) -> bool {
        match self {
            TrainError::Divergence { .. } | TrainError::NonFiniteLoss => true,
            TrainError::Worker { source, .. } => source.is_divergence(),
            _ => false,
        }
    }
}
