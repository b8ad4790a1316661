use crate::optimizers::OptimizerSpec;
use crate::transport::tags;
use crate::wire::{put_f64s, Reader, WireError};

pub const KV_HEADER_LEN: usize = 12;

/// A key-value message between a worker and a server.
///
/// Every variant except `SetOptimizer` is laid out as key (u32), iteration
/// (u32), element count (u32), then the elements as little-endian doubles.
/// `PullResp` carries the server version in the iteration slot.
#[derive(Debug, Clone, PartialEq)]
pub enum KvMessage {
    Init { key: u32, values: Vec<f64> },
    Push { key: u32, iteration: u32, values: Vec<f64> },
    Pull { key: u32, iteration: u32 },
    PullResp { key: u32, version: u32, values: Vec<f64> },
    SetOptimizer(OptimizerSpec),
    Shutdown,
    ShutdownAck,
}

fn header(out: &mut Vec<u8>, key: u32, iteration: u32, values: &[f64]) {
    out.extend_from_slice(&key.to_le_bytes());
    out.extend_from_slice(&iteration.to_le_bytes());
    out.extend_from_slice(&(values.len() as u32).to_le_bytes());
    put_f64s(out, values);
}

impl KvMessage {
    pub fn tag(&self) -> u8 {
        match self {
            KvMessage::Init { .. } => tags::KV_INIT,
            KvMessage::Push { .. } => tags::KV_PUSH,
            KvMessage::Pull { .. } => tags::KV_PULL,
            KvMessage::PullResp { .. } => tags::KV_PULL_RESP,
            KvMessage::SetOptimizer(_) => tags::KV_SET_OPTIMIZER,
            KvMessage::Shutdown => tags::KV_SHUTDOWN,
            KvMessage::ShutdownAck => tags::KV_SHUTDOWN_ACK,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            KvMessage::Init { key, values } => header(&mut out, *key, 0, values),
            KvMessage::Push { key, iteration, values } => header(&mut out, *key, *iteration, values),
            KvMessage::Pull { key, iteration } => header(&mut out, *key, *iteration, &[]),
            KvMessage::PullResp { key, version, values } => header(&mut out, *key, *version, values),
            KvMessage::SetOptimizer(spec) => out.extend_from_slice(&spec.encode()),
            KvMessage::Shutdown | KvMessage::ShutdownAck => header(&mut out, 0, 0, &[]),
        }
        out
    }

    pub fn decode(tag: u8, payload: &[u8]) -> Result<Self, WireError> {
        if tag == tags::KV_SET_OPTIMIZER {
            return Ok(KvMessage::SetOptimizer(OptimizerSpec::decode(payload)?));
        }
        let mut r = Reader::new(payload);
        let key = r.u32()?;
        let iteration = r.u32()?;
        let count = r.u32()? as usize;
        let values = r.f64_tail(count)?;
        let empty = |v: &Vec<f64>| {
            if v.is_empty() {
                Ok(())
            } else {
                Err(WireError::Malformed("message carries no elements"))
            }
        };
        Ok(match tag {
            tags::KV_INIT => KvMessage::Init { key, values },
            tags::KV_PUSH => KvMessage::Push { key, iteration, values },
            tags::KV_PULL => {
                empty(&values)?;
                KvMessage::Pull { key, iteration }
            }
            tags::KV_PULL_RESP => KvMessage::PullResp {
                key,
                version: iteration,
                values,
            },
            tags::KV_SHUTDOWN | tags::KV_SHUTDOWN_ACK => {
                empty(&values)?;
                if tag == tags::KV_SHUTDOWN {
                    KvMessage::Shutdown
                } else {
                    KvMessage::ShutdownAck
                }
            }
            t => return Err(WireError::UnknownTag(t)),
        })
    }
}

/// Reads the key of a KV payload without decoding the elements.
pub(crate) fn peek_key(payload: &[u8]) -> Option<u32> {
    payload.get(..4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
}
