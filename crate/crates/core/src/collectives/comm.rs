use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use super::chunk::{chunk_matches, decode_chunk, encode_chunk, CHUNK_HEADER_LEN};
use super::cost::CostLedger;
use super::CollectiveError;
use crate::transport::{Endpoint, NodeId};

/// An ordered group of workers that run collectives together.
///
/// Only one collective may be in flight per communicator; a second
/// concurrent call fails with [`CollectiveError::Busy`].
pub struct Communicator {
    endpoint: Arc<Endpoint>,
    members: Vec<NodeId>,
    rank: usize,
    timeout: Duration,
    busy: AtomicBool,
    last: Mutex<CostLedger>,
    total: Mutex<CostLedger>,
}

pub(crate) struct BusyGuard<'a>(&'a AtomicBool);

impl Drop for BusyGuard<'_> {
    fn drop(&mut self) {
        self.0.store(false, Ordering::SeqCst);
    }
}

impl Communicator {
    pub fn new(
        endpoint: Arc<Endpoint>,
        members: Vec<NodeId>,
        timeout: Duration,
    ) -> Result<Self, CollectiveError> {
        let me = endpoint.id();
        let rank = members
            .iter()
            .position(|m| *m == me)
            .ok_or(CollectiveError::NotAMember(me))?;
        let mut sorted = members.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != members.len() {
            return Err(CollectiveError::DuplicateMember);
        }
        Ok(Communicator {
            endpoint,
            members,
            rank,
            timeout,
            busy: AtomicBool::new(false),
            last: Mutex::new(CostLedger::default()),
            total: Mutex::new(CostLedger::default()),
        })
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn members(&self) -> &[NodeId] {
        &self.members
    }

    pub fn endpoint(&self) -> &Arc<Endpoint> {
        &self.endpoint
    }

    pub fn timeout(&self) -> Duration {
        self.timeout
    }

    /// Ledger of the most recent collective call.
    pub fn last_ledger(&self) -> CostLedger {
        *self.last.lock().unwrap()
    }

    /// Sum of ledgers over this communicator's lifetime.
    pub fn total_ledger(&self) -> CostLedger {
        *self.total.lock().unwrap()
    }

    pub(crate) fn record(&self, ledger: CostLedger) {
        *self.last.lock().unwrap() = ledger;
        *self.total.lock().unwrap() += ledger;
    }

    pub(crate) fn begin(&self) -> Result<BusyGuard<'_>, CollectiveError> {
        if self.busy.swap(true, Ordering::SeqCst) {
            return Err(CollectiveError::Busy);
        }
        Ok(BusyGuard(&self.busy))
    }

    pub(crate) fn send_chunk(
        &self,
        to: usize,
        tag: u8,
        ring: u8,
        stage: u32,
        data: &[f64],
    ) -> Result<(), CollectiveError> {
        self.endpoint
            .send(self.members[to], tag, &encode_chunk(ring, stage, data))?;
        Ok(())
    }

    pub(crate) fn recv_chunk(
        &self,
        from: usize,
        tag: u8,
        ring: u8,
        stage: u32,
    ) -> Result<Vec<f64>, CollectiveError> {
        let frame = self.endpoint.recv_where(self.timeout, Some(self.members[from]), |f| {
            f.tag == tag && chunk_matches(&f.payload, ring, stage)
        })?;
        Ok(decode_chunk(&frame.payload)?.1)
    }

    /// Largest number of doubles that fit in one chunk frame.
    pub(crate) fn max_chunk_elems(&self) -> usize {
        ((self.endpoint.max_frame() - CHUNK_HEADER_LEN) / 8).max(1)
    }

    /// Sends a whole vector, split into as many frames as the frame limit
    /// requires. Segment `i` travels as stage `i`.
    pub(crate) fn send_vec(&self, to: usize, tag: u8, data: &[f64]) -> Result<(), CollectiveError> {
        let seg = self.max_chunk_elems();
        if data.is_empty() {
            return self.send_chunk(to, tag, 0, 0, data);
        }
        for (i, part) in data.chunks(seg).enumerate() {
            self.send_chunk(to, tag, 0, i as u32, part)?;
        }
        Ok(())
    }

    pub(crate) fn recv_vec(&self, from: usize, tag: u8, len: usize) -> Result<Vec<f64>, CollectiveError> {
        let seg = self.max_chunk_elems();
        let frames = len.div_ceil(seg).max(1);
        let mut out = Vec::with_capacity(len);
        for i in 0..frames {
            out.extend(self.recv_chunk(from, tag, 0, i as u32)?);
        }
        if out.len() != len {
            return Err(CollectiveError::PlanMismatch {
                expected: len,
                got: out.len(),
            });
        }
        Ok(out)
    }
}
