//! Distributed key-value parameter store.
//!
//! Servers own keys (`key mod servers`) and apply a configurable optimizer
//! to the aggregates workers push. In the MPI modes workers of one client
//! group first combine their tensors with a ring allreduce and only the
//! group master talks to servers; pulled values are broadcast back inside
//! the group.

mod client;
mod msg;
mod server;

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

pub use client::{KvOptions, KvStore, StalenessStats, Var};
pub use msg::{KvMessage, KV_HEADER_LEN};
pub use server::{KeyReport, Server, ServerReport};

use crate::collectives::CollectiveError;
use crate::engine::EngineError;
use crate::optimizers::OptimizerError;
use crate::transport::{NodeId, TransportError};
use crate::wire::WireError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StoreMode {
    Sync,
    Async,
    SyncMpi,
    AsyncMpi,
    PureMpi,
}

impl StoreMode {
    pub const ALL: [StoreMode; 5] = [
        StoreMode::Sync,
        StoreMode::Async,
        StoreMode::SyncMpi,
        StoreMode::AsyncMpi,
        StoreMode::PureMpi,
    ];

    /// Whether the server barriers each round until every master has pushed.
    pub fn is_sync(self) -> bool {
        matches!(self, StoreMode::Sync | StoreMode::SyncMpi | StoreMode::PureMpi)
    }

    /// Whether workers aggregate inside their client group.
    pub fn uses_groups(self) -> bool {
        matches!(self, StoreMode::SyncMpi | StoreMode::AsyncMpi | StoreMode::PureMpi)
    }

    pub fn uses_servers(self) -> bool {
        self != StoreMode::PureMpi
    }

    pub fn name(self) -> &'static str {
        match self {
            StoreMode::Sync => "sync",
            StoreMode::Async => "async",
            StoreMode::SyncMpi => "sync-mpi",
            StoreMode::AsyncMpi => "async-mpi",
            StoreMode::PureMpi => "pure-mpi",
        }
    }
}

impl fmt::Display for StoreMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StoreMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let norm = s.to_ascii_lowercase().replace('_', "-");
        StoreMode::ALL
            .into_iter()
            .find(|m| m.name() == norm || m.name().replace('-', "") == norm)
            .ok_or_else(|| format!("unknown store mode '{s}'"))
    }
}

#[derive(Debug, Error)]
pub enum KvError {
    #[error("key {0} is not initialized")]
    UninitializedKey(u32),
    #[error("key {0} initialized twice")]
    DuplicateKey(u32),
    #[error("key {key}: expected {expected} elements, got {got}")]
    ShapeMismatch { key: u32, expected: usize, got: usize },
    #[error("{op} is not available in {mode} mode")]
    Unsupported { op: &'static str, mode: StoreMode },
    #[error("optimizer cannot change after training has started")]
    TrainingStarted,
    #[error("mode {mode} does not fit topology: {why}")]
    BadTopology { mode: StoreMode, why: &'static str },
    #[error("protocol violation from {from}: {what}")]
    Protocol { from: NodeId, what: String },
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Collective(#[from] CollectiveError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// Server rank that owns `key`.
pub fn shard_of(key: u32, servers: u32) -> u32 {
    key % servers.max(1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mode_names_round_trip() {
        for m in StoreMode::ALL {
            assert_eq!(m.name().parse::<StoreMode>().unwrap(), m);
        }
        assert_eq!("SyncMpi".parse::<StoreMode>().unwrap(), StoreMode::SyncMpi);
        assert!("mpi".parse::<StoreMode>().is_err());
    }

    #[test]
    fn sharding_is_modular() {
        assert_eq!(shard_of(9, 2), 1);
        assert_eq!(shard_of(4, 2), 0);
        assert_eq!(shard_of(4, 1), 0);
    }
}
