//! Run orchestration: configuration, process launch and benchmarks.

mod bench;
mod compare;
pub mod config;
mod launch;


pub use bench::{bench_allreduce, write_bench, BenchRow, BENCH_HEADER};
pub use compare::{compare_modes, mode_configs, write_summary, CompareReport, ModeSummary, SUMMARY_HEADER};
pub use launch::{
    child_main, launch, launch_with, run_child, ChildHandle, ChildReport, ChildSpec, ProcessSpawner, Spawner,
    ThreadSpawner, ENV_CONFIG, ENV_RANK, ENV_ROLE, ENV_SCHED_ADDR,
};

use thiserror::Error;

use crate::kvstore::KvOptions;
use crate::trainer::TrainError;
use config::{ConfigError, RunConfig};

#[derive(Debug, Error)]
pub enum LaunchError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("rendezvous failed: {0}")]
    Rendezvous(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("child failure: {0}")]
    Child(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl LaunchError {
    /// Process exit status for this failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            LaunchError::Config(_) => 2,
            LaunchError::Rendezvous(_) => 3,
            LaunchError::Divergence(_) => 4,
            LaunchError::Child(_) => 5,
            LaunchError::Io(_) => 1,
        }
    }
}

impl From<ConfigError> for LaunchError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io(io) => LaunchError::Io(io),
            other => LaunchError::Config(other.to_string()),
        }
    }
}

impl From<TrainError> for LaunchError {
    fn from(e: TrainError) -> Self {
        if e.is_divergence() {
            return LaunchError::Divergence(e.to_string());
        }
        match e {
            TrainError::Config(m) => LaunchError::Config(m),
            TrainError::Data(m) => LaunchError::Config(m),
            TrainError::Io(io) => LaunchError::Io(io),
            TrainError::Transport(t) => t.into(),
            TrainError::Worker { source, .. } if matches!(*source, TrainError::Config(_) | TrainError::Data(_)) => {
                (*source).into()
            }
            other => LaunchError::Child(other.to_string()),
        }
    }
}

pub(crate) fn kv_options(cfg: &RunConfig) -> KvOptions {
    KvOptions {
        rings: cfg.rings,
        timeout: cfg.timeout(),
        ..KvOptions::default()
    }
}
