use std::fs::File;
use std::io::{BufWriter, Write};

use serde::Serialize;

use super::config::{Algorithm, RunConfig};
use super::launch::{launch_with, Spawner};
use super::LaunchError;
use crate::kvstore::StoreMode;
use crate::trainer::{mode_label, RunOutcome};

pub const SUMMARY_HEADER: &str = "mode,final_val_acc,total_time_s,server_in_bytes,server_in_msgs";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeSummary {
    pub mode: String,
    pub final_val_acc: f64,
    pub total_time_s: f64,
    pub server_in_bytes: u64,
    pub server_in_msgs: u64,
}

#[derive(Debug)]
pub struct CompareReport {
    pub runs: Vec<(RunConfig, RunOutcome)>,
    pub summary: Vec<ModeSummary>,
}

const MODES: [(StoreMode, Algorithm); 6] = [
    (StoreMode::Sync, Algorithm::Sgd),
    (StoreMode::Async, Algorithm::Asgd),
    (StoreMode::Async, Algorithm::Esgd),
    (StoreMode::SyncMpi, Algorithm::Sgd),
    (StoreMode::AsyncMpi, Algorithm::Asgd),
    (StoreMode::AsyncMpi, Algorithm::Esgd),
];

/// The six run configurations compared: each algorithm once with every
/// worker talking to the servers and once grouped into `base.clients`.
pub fn mode_configs(base: &RunConfig) -> Vec<RunConfig> {
    MODES
        .iter()
        .map(|&(mode, algorithm)| {
            let mut c = base.clone();
            c.mode = mode;
            c.algorithm = algorithm;
            if !mode.uses_groups() {
                c.clients = c.workers;
            } else if c.clients == c.workers && c.workers > 1 {
                c.clients = 1;
            }
            c.servers = c.servers.max(1);
            c.run_id = format!("{}-{}", base.run_id, mode_label(&c));
            c.out = base.out.as_ref().map(|dir| dir.join(format!("{}.csv", c.run_id)));
            c
        })
        .collect()
}

/// Runs all six modes on identical data and seeds. With `base.out` set,
/// it names a directory that receives one metrics file per mode plus
/// `summary.csv`.
pub fn compare_modes(base: &RunConfig, spawner: Option<&dyn Spawner>) -> Result<CompareReport, LaunchError> {
    if let Some(dir) = &base.out {
        std::fs::create_dir_all(dir)?;
    }
    let mut runs = Vec::new();
    let mut summary = Vec::new();
    for c in mode_configs(base) {
        log::info!("running {}", c.run_id);
        let out = launch_with(&c, spawner)?;
        summary.push(ModeSummary {
            mode: mode_label(&c),
            final_val_acc: out.metrics.last().map_or(0.0, |m| m.val_acc),
            total_time_s: out.metrics.iter().map(|m| m.epoch_time_s).sum(),
            server_in_bytes: out.metrics.iter().map(|m| m.server_in_bytes).sum(),
            server_in_msgs: out.workers.iter().flat_map(|w| &w.epochs).map(|e| e.server_msgs).sum(),
        });
        runs.push((c, out));
    }
    if let Some(dir) = &base.out {
        write_summary(BufWriter::new(File::create(dir.join("summary.csv"))?), &summary)?;
    }
    Ok(CompareReport { runs, summary })
}

pub fn write_summary(out: impl Write, rows: &[ModeSummary]) -> Result<(), LaunchError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| LaunchError::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}
