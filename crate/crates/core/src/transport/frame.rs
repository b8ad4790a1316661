//! The 13-byte frame header and whole-frame codec.
//!
//! Layout, little-endian:
//!
//! | offset | size | field                     |
//! |--------|------|---------------------------|
//! | 0      | 2    | magic `0x4D58`            |
//! | 2      | 1    | message tag               |
//! | 3      | 1    | source role               |
//! | 4      | 4    | source rank               |
//! | 8      | 4    | payload length            |
//! | 12     | 1    | nonce, reserved, always 0 |

use std::fmt;

use crate::wire::{Reader, WireError};

pub const MAGIC: u16 = 0x4D58;
pub const HEADER_LEN: usize = 13;
pub const DEFAULT_MAX_FRAME: usize = 64 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Role {
    Scheduler = 0,
    Server = 1,
    Worker = 2,
}

impl Role {
    pub fn from_u8(b: u8) -> Result<Self, WireError> {
        match b {
            0 => Ok(Role::Scheduler),
            1 => Ok(Role::Server),
            2 => Ok(Role::Worker),
            other => Err(WireError::BadRole(other)),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::Scheduler => "scheduler",
            Role::Server => "server",
            Role::Worker => "worker",
        }
    }
}

impl std::str::FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "scheduler" => Ok(Role::Scheduler),
            "server" => Ok(Role::Server),
            "worker" => Ok(Role::Worker),
            other => Err(format!("unknown role `{other}`")),
        }
    }
}

/// A process identity: role plus rank within that role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId {
    pub role: Role,
    pub rank: u32,
}

impl NodeId {
    pub const SCHEDULER: NodeId = NodeId {
        role: Role::Scheduler,
        rank: 0,
    };

    pub fn server(rank: u32) -> Self {
        NodeId {
            role: Role::Server,
            rank,
        }
    }

    pub fn worker(rank: u32) -> Self {
        NodeId {
            role: Role::Worker,
            rank,
        }
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.role.name(), self.rank)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameHeader {
    pub tag: u8,
    pub src: NodeId,
    pub len: u32,
}

impl FrameHeader {
    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[0..2].copy_from_slice(&MAGIC.to_le_bytes());
        out[2] = self.tag;
        out[3] = self.src.role as u8;
        out[4..8].copy_from_slice(&self.src.rank.to_le_bytes());
        out[8..12].copy_from_slice(&self.len.to_le_bytes());
        out[12] = 0;
        out
    }

    /// Parses and validates a header; `max_payload` bounds the length field.
    pub fn decode(bytes: &[u8], max_payload: usize) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        let magic = r.u16()?;
        if magic != MAGIC {
            return Err(WireError::BadMagic(magic));
        }
        let tag = r.u8()?;
        let role = Role::from_u8(r.u8()?)?;
        let rank = r.u32()?;
        let len = r.u32()?;
        let nonce = r.u8()?;
        if nonce != 0 {
            return Err(WireError::NonzeroNonce(nonce));
        }
        if len as usize > max_payload {
            return Err(WireError::Oversize {
                len: len as usize,
                max: max_payload,
            });
        }
        Ok(FrameHeader {
            tag,
            src: NodeId { role, rank },
            len,
        })
    }
}

/// A received message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub src: NodeId,
    pub dest: NodeId,
    pub tag: u8,
    pub payload: Vec<u8>,
}

/// Serializes header and payload into one contiguous buffer.
pub fn encode_frame(src: NodeId, tag: u8, payload: &[u8]) -> Vec<u8> {
    let header = FrameHeader {
        tag,
        src,
        len: u32::try_from(payload.len()).expect("payload length fits u32"),
    };
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(&header.encode());
    out.extend_from_slice(payload);
    out
}

/// Decodes one frame from the front of `bytes`, returning it together with
/// the number of bytes consumed.
pub fn decode_frame(
    bytes: &[u8],
    dest: NodeId,
    max_payload: usize,
) -> Result<(Frame, usize), WireError> {
    let header = FrameHeader::decode(bytes, max_payload)?;
    let total = HEADER_LEN + header.len as usize;
    if bytes.len() < total {
        return Err(WireError::Truncated {
            needed: total,
            got: bytes.len(),
        });
    }
    Ok((
        Frame {
            src: header.src,
            dest,
            tag: header.tag,
            payload: bytes[HEADER_LEN..total].to_vec(),
        },
        total,
    ))
}
