//! Point-to-point message transport between named processes.
//!
//! Two interchangeable backends sit behind [`Endpoint`]: an in-process
//! network for tests and single-process runs, and length-framed TCP for
//! multi-process runs. Both carry byte-identical frames (see [`frame`]) and
//! keep per-link byte and message counters.

pub mod endpoint;
pub mod frame;
pub mod inproc;
pub mod tags;
pub mod tcp;
pub mod topology;

use std::time::Duration;

use thiserror::Error;

pub use endpoint::{wire_size, Endpoint, LinkStats};
pub use frame::{Frame, FrameHeader, NodeId, Role, DEFAULT_MAX_FRAME, HEADER_LEN, MAGIC};
pub use inproc::InprocNetwork;
pub use topology::Topology;

use crate::wire::WireError;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("no link to {0}")]
    UnknownDestination(NodeId),
    #[error("connection to {0} is closed")]
    ConnectionClosed(NodeId),
    #[error("{0} disconnected")]
    Disconnected(NodeId),
    #[error("endpoint is closed")]
    EndpointClosed,
    #[error("timed out after {0:?}")]
    Timeout(Duration),
    #[error("payload of {len} bytes exceeds frame limit of {max}")]
    Oversize { len: usize, max: usize },
    #[error("node {0} registered twice")]
    DuplicateNode(NodeId),
    #[error("invalid topology: {0}")]
    InvalidTopology(String),
    #[error("rendezvous timed out: {0}")]
    RendezvousTimeout(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
