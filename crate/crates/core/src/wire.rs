//! Little-endian byte codecs shared by every message format.
//!
//! All decoders in the crate accept untrusted bytes and fail with
//! [`WireError`] rather than panicking.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("truncated input: needed {needed} bytes, got {got}")]
    Truncated { needed: usize, got: usize },
    #[error("bad magic 0x{0:04x}")]
    BadMagic(u16),
    #[error("unknown role byte {0}")]
    BadRole(u8),
    #[error("reserved nonce byte must be zero, got {0}")]
    NonzeroNonce(u8),
    #[error("payload of {len} bytes exceeds limit of {max}")]
    Oversize { len: usize, max: usize },
    #[error("unexpected message tag 0x{0:02x}")]
    UnknownTag(u8),
    #[error("element count {count} does not match {bytes} payload bytes")]
    CountMismatch { count: usize, bytes: usize },
    #[error("{0} trailing bytes")]
    Trailing(usize),
    #[error("malformed: {0}")]
    Malformed(&'static str),
}

/// Cursor over an input buffer.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.remaining() < n {
            return Err(WireError::Truncated {
                needed: self.pos + n,
                got: self.buf.len(),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64, WireError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// Reads `count` little-endian doubles, requiring that exactly that many
    /// bytes remain.
    pub fn f64_tail(&mut self, count: usize) -> Result<Vec<f64>, WireError> {
        let bytes = self.remaining();
        if count.checked_mul(8) != Some(bytes) {
            return Err(WireError::CountMismatch { count, bytes });
        }
        let raw = self.take(bytes)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn finish(self) -> Result<(), WireError> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(WireError::Trailing(n)),
        }
    }
}

pub(crate) fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    out.reserve(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}
