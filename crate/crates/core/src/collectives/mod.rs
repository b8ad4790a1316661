//! Tensor-group collectives.
//!
//! A worker's [`TensorGroup`] holds one vector per lane. Lane operations
//! (`lane_reduce`, `lane_broadcast`) stay inside the worker; ring operations
//! move partitions between workers of one [`Communicator`].
//!
//! Reductions are deterministic: lanes are summed in order `0..L`, then each
//! rank adds the incoming chunk to its local lane sum as the chunk arrives
//! around the ring `0 → 1 → … → p-1 → 0`.

mod chunk;
mod comm;
mod cost;
mod plan;
mod ring;
mod tensor;

use thiserror::Error;

pub use chunk::{decode_chunk, encode_chunk, ChunkHeader, CHUNK_HEADER_LEN};
pub use comm::Communicator;
pub use cost::{predict_cost, CostLedger};
pub use plan::{split_even, RingPlan};
pub use ring::{allreduce, broadcast, gather_allreduce, ring_allgather, ring_reduce_scatter};
pub use tensor::{lane_broadcast, lane_reduce, TensorGroup};

use crate::transport::{NodeId, TransportError};
use crate::wire::WireError;

#[derive(Debug, Error)]
pub enum CollectiveError {
    #[error("a tensor group needs at least one lane")]
    NoLanes,
    #[error("lane length mismatch: expected {expected}, got {got}")]
    LaneLengthMismatch { expected: usize, got: usize },
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("plan mismatch between ranks: expected {expected}, got {got}")]
    PlanMismatch { expected: usize, got: usize },
    #[error("communicator already has a collective in flight")]
    Busy,
    #[error("{0} is not a member of the communicator")]
    NotAMember(NodeId),
    #[error("communicator members must be distinct")]
    DuplicateMember,
    #[error("ring count must be at least 1")]
    InvalidRings,
    #[error("root rank {0} out of range")]
    BadRoot(usize),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Wire(#[from] WireError),
}
