//! Payload of collective chunk frames: ring id (1 byte), stage (4 bytes),
//! element count (4 bytes), then raw little-endian doubles.

use crate::wire::{put_f64s, Reader, WireError};

pub const CHUNK_HEADER_LEN: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkHeader {
    pub ring: u8,
    pub stage: u32,
    pub count: u32,
}

pub fn encode_chunk(ring: u8, stage: u32, data: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(CHUNK_HEADER_LEN + data.len() * 8);
    out.push(ring);
    out.extend_from_slice(&stage.to_le_bytes());
    out.extend_from_slice(&(data.len() as u32).to_le_bytes());
    put_f64s(&mut out, data);
    out
}

pub fn decode_chunk(payload: &[u8]) -> Result<(ChunkHeader, Vec<f64>), WireError> {
    let mut r = Reader::new(payload);
    let ring = r.u8()?;
    let stage = r.u32()?;
    let count = r.u32()?;
    let data = r.f64_tail(count as usize)?;
    Ok((ChunkHeader { ring, stage, count }, data))
}

/// True when `payload` starts with the given ring id and stage.
pub(crate) fn chunk_matches(payload: &[u8], ring: u8, stage: u32) -> bool {
    payload.len() >= CHUNK_HEADER_LEN
        && payload[0] == ring
        && payload[1..5] == stage.to_le_bytes()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout() {
        let p = encode_chunk(2, 7, &[1.0]);
        assert_eq!(&p[..9], &[2, 7, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&p[9..], &1.0f64.to_le_bytes());
        let (h, d) = decode_chunk(&p).unwrap();
        assert_eq!(h, ChunkHeader { ring: 2, stage: 7, count: 1 });
        assert_eq!(d, vec![1.0]);
        assert!(chunk_matches(&p, 2, 7));
        assert!(!chunk_matches(&p, 2, 8));
    }

    #[test]
    fn count_must_match_bytes() {
        let mut p = encode_chunk(0, 0, &[1.0, 2.0]);
        p[5] = 3;
        assert!(decode_chunk(&p).is_err());
        assert!(decode_chunk(&p[..4]).is_err());
    }
}
