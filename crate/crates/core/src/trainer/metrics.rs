use std::io::Write;

use serde::Serialize;

use super::driver::WorkerOutcome;
use super::TrainError;
use crate::kvstore::{StalenessStats, StoreMode};
use crate::launcher::config::{Algorithm, RunConfig};

pub const METRICS_HEADER: &str = "run_id,mode,epoch,epoch_time_s,val_acc,mean_staleness,max_staleness,server_in_bytes";

/// One row of the metrics file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub mode: String,
    pub epoch: usize,
    pub epoch_time_s: f64,
    pub val_acc: f64,
    pub mean_staleness: f64,
    pub max_staleness: u64,
    pub server_in_bytes: u64,
}

/// Short name of a run's parallelization scheme, e.g. `mpi-esgd`.
pub fn mode_label(cfg: &RunConfig) -> String {
    let family = match cfg.mode {
        StoreMode::Sync | StoreMode::Async => "dist",
        StoreMode::SyncMpi | StoreMode::AsyncMpi => "mpi",
        StoreMode::PureMpi => "pure-mpi",
    };
    let alg = match cfg.algorithm {
        Algorithm::Sgd => "sgd",
        Algorithm::Asgd => "asgd",
        Algorithm::Esgd => "esgd",
    };
    format!("{family}-{alg}")
}

/// Folds per-worker epochs into one row per epoch: wall time is the mean
/// over workers, accuracy comes from worker 0, staleness is pooled and
/// ingress is the total workers sent to servers.
pub fn aggregate(cfg: &RunConfig, outcomes: &[WorkerOutcome]) -> Vec<MetricsRecord> {
    let epochs = outcomes.iter().map(|o| o.epochs.len()).min().unwrap_or(0);
    (0..epochs)
        .map(|e| {
            let rows: Vec<_> = outcomes.iter().map(|o| &o.epochs[e]).collect();
            let mut st = StalenessStats::default();
            for r in &rows {
                st.merge(&r.staleness);
            }
            MetricsRecord {
                run_id: cfg.run_id.clone(),
                mode: mode_label(cfg),
                epoch: e + 1,
                epoch_time_s: rows.iter().map(|r| r.epoch_time_s).sum::<f64>() / rows.len() as f64,
                val_acc: rows.iter().find_map(|r| r.val_acc).unwrap_or(0.0),
                mean_staleness: st.mean(),
                max_staleness: st.max,
                server_in_bytes: rows.iter().map(|r| r.server_bytes).sum(),
            }
        })
        .collect()
}

pub fn write_metrics(out: impl Write, records: &[MetricsRecord]) -> Result<(), TrainError> {
    let mut w = csv::Writer::from_writer(out);
    if records.is_empty() {
        w.write_record(METRICS_HEADER.split(','))
            .map_err(|e| TrainError::Io(e.into()))?;
    }
    for r in records {
        w.serialize(r).map_err(|e| TrainError::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}
