//! Bucket (ring) algorithms over lane-grouped tensors.
//!
//! Allreduce is a reduce-scatter followed by an allgather. During
//! reduce-scatter each incoming chunk is combined with the matching
//! partition of the local lanes, so lane reduction and network transfer are
//! interleaved. With several rings, every partition is further split across
//! rings and the rings advance round-robin: while ring `k`'s chunk is on the
//! wire, ring `k+1`'s incoming chunk is being reduced.

use std::ops::Range;

use super::comm::Communicator;
use super::cost::CostLedger;
use super::plan::RingPlan;
use super::tensor::{lane_broadcast, lane_reduce, TensorGroup};
use super::CollectiveError;
use crate::transport::tags;

struct Ring<'a> {
    comm: &'a Communicator,
    plan: &'a RingPlan,
    pos: usize,
    left: usize,
    right: usize,
    slices: Vec<Vec<Range<usize>>>,
    ledger: CostLedger,
}

impl<'a> Ring<'a> {
    fn new(comm: &'a Communicator, plan: &'a RingPlan, rings: usize) -> Result<Self, CollectiveError> {
        if plan.ranks() != comm.size() {
            return Err(CollectiveError::PlanMismatch {
                expected: comm.size(),
                got: plan.ranks(),
            });
        }
        let pos = plan.position_of(comm.rank());
        Ok(Ring {
            comm,
            plan,
            pos,
            left: plan.rank_at(pos, -1),
            right: plan.rank_at(pos, 1),
            slices: plan.ring_slices(rings),
            ledger: CostLedger::default(),
        })
    }

    fn p(&self) -> usize {
        self.plan.ranks()
    }

    fn send(&mut self, tag: u8, ring: usize, stage: usize, data: &[f64]) -> Result<(), CollectiveError> {
        self.comm
            .send_chunk(self.right, tag, ring as u8, stage as u32, data)?;
        self.ledger.elements_sent_per_rank += data.len() as u64;
        Ok(())
    }

    fn recv(&mut self, tag: u8, ring: usize, stage: usize, expect: usize) -> Result<Vec<f64>, CollectiveError> {
        let data = self
            .comm
            .recv_chunk(self.left, tag, ring as u8, stage as u32)?;
        if data.len() != expect {
            return Err(CollectiveError::PlanMismatch {
                expected: expect,
                got: data.len(),
            });
        }
        self.ledger.elements_received += data.len() as u64;
        Ok(data)
    }

    /// Leaves the fully reduced partition owned by this rank in `acc`.
    fn reduce_scatter(&mut self, group: &TensorGroup, acc: &mut [f64]) -> Result<(), CollectiveError> {
        let p = self.p();
        self.ledger.lane_reduce_elements += (acc.len() * (group.lane_count() - 1)) as u64;
        if p == 1 {
            group.reduce_range_into(0..acc.len(), acc);
            return Ok(());
        }
        let rings = self.slices.len();
        let first = self.plan.rank_at(self.pos, -1);
        for k in 0..rings {
            let r = self.slices[k][first].clone();
            group.reduce_range_into(r.clone(), &mut acc[r.clone()]);
            self.send(tags::REDUCE_SCATTER_CHUNK, k, 0, &acc[r])?;
        }
        for s in 0..p - 1 {
            let part = self.plan.rank_at(self.pos, -(s as isize) - 2);
            for k in 0..rings {
                let r = self.slices[k][part].clone();
                let incoming = self.recv(tags::REDUCE_SCATTER_CHUNK, k, s, r.len())?;
                let local = &mut acc[r.clone()];
                group.reduce_range_into(r.clone(), local);
                for (a, b) in local.iter_mut().zip(&incoming) {
                    *a += *b;
                }
                if s + 1 < p - 1 {
                    self.send(tags::REDUCE_SCATTER_CHUNK, k, s + 1, &acc[r])?;
                }
            }
        }
        self.ledger.comm_steps += (p - 1) as u64;
        Ok(())
    }

    /// Circulates every rank's owned partition so `acc` is complete
    /// everywhere. Each chunk is copied into `group`'s lanes right after it
    /// is forwarded.
    fn allgather(&mut self, acc: &mut [f64], mut group: Option<&mut TensorGroup>) -> Result<(), CollectiveError> {
        let p = self.p();
        let rings = self.slices.len();
        let own = self.comm.rank();
        for k in 0..rings {
            let r = self.slices[k][own].clone();
            if p > 1 {
                self.send(tags::ALLGATHER_CHUNK, k, 0, &acc[r.clone()])?;
            }
            if let Some(g) = group.as_deref_mut() {
                g.broadcast_range(r.clone(), &acc[r]);
            }
        }
        if p == 1 {
            return Ok(());
        }
        for s in 0..p - 1 {
            let part = self.plan.rank_at(self.pos, -(s as isize) - 1);
            for k in 0..rings {
                let r = self.slices[k][part].clone();
                let incoming = self.recv(tags::ALLGATHER_CHUNK, k, s, r.len())?;
                acc[r.clone()].copy_from_slice(&incoming);
                if s + 1 < p - 1 {
                    self.send(tags::ALLGATHER_CHUNK, k, s + 1, &incoming)?;
                }
                if let Some(g) = group.as_deref_mut() {
                    g.broadcast_range(r, &incoming);
                }
            }
        }
        self.ledger.comm_steps += (p - 1) as u64;
        Ok(())
    }
}

fn check_plan(plan: &RingPlan, n: usize) -> Result<(), CollectiveError> {
    if plan.len() != n {
        return Err(CollectiveError::PlanMismatch {
            expected: plan.len(),
            got: n,
        });
    }
    Ok(())
}

/// Ring reduce-scatter: returns this rank's partition of the elementwise sum
/// of every rank's lane-reduced tensor.
pub fn ring_reduce_scatter(
    comm: &Communicator,
    group: &TensorGroup,
    plan: &RingPlan,
) -> Result<Vec<f64>, CollectiveError> {
    let _busy = comm.begin()?;
    check_plan(plan, group.len())?;
    let mut ring = Ring::new(comm, plan, 1)?;
    let mut acc = vec![0.0; group.len()];
    ring.reduce_scatter(group, &mut acc)?;
    comm.record(ring.ledger);
    Ok(acc[plan.partition(comm.rank())].to_vec())
}

/// Ring allgather: every rank contributes its partition and receives the
/// concatenation of all partitions.
pub fn ring_allgather(
    comm: &Communicator,
    my_part: &[f64],
    plan: &RingPlan,
) -> Result<Vec<f64>, CollectiveError> {
    let _busy = comm.begin()?;
    let own = plan.partition(comm.rank());
    if my_part.len() != own.len() {
        return Err(CollectiveError::PlanMismatch {
            expected: own.len(),
            got: my_part.len(),
        });
    }
    let mut ring = Ring::new(comm, plan, 1)?;
    let mut acc = vec![0.0; plan.len()];
    acc[own].copy_from_slice(my_part);
    ring.allgather(&mut acc, None)?;
    comm.record(ring.ledger);
    Ok(acc)
}

/// Multi-ring tensor allreduce. On return every lane of `group` on every
/// rank holds the elementwise sum over all ranks and lanes.
///
/// `rings` larger than the element count is clamped.
pub fn allreduce(
    comm: &Communicator,
    group: &mut TensorGroup,
    rings: usize,
) -> Result<CostLedger, CollectiveError> {
    if rings == 0 {
        return Err(CollectiveError::InvalidRings);
    }
    let _busy = comm.begin()?;
    let n = group.len();
    let effective = rings.min(n.max(1));
    if effective < rings {
        log::warn!("allreduce: {rings} rings requested for {n} elements, using {effective}");
    }
    let plan = RingPlan::new(n, comm.size());
    let mut ring = Ring::new(comm, &plan, effective)?;
    let mut acc = vec![0.0; n];
    ring.reduce_scatter(group, &mut acc)?;
    ring.allgather(&mut acc, Some(group))?;
    comm.record(ring.ledger);
    Ok(ring.ledger)
}

/// Copies `root`'s lane 0 into every lane of every member.
pub fn broadcast(comm: &Communicator, root: usize, group: &mut TensorGroup) -> Result<(), CollectiveError> {
    if root >= comm.size() {
        return Err(CollectiveError::BadRoot(root));
    }
    let _busy = comm.begin()?;
    let mut ledger = CostLedger::default();
    let n = group.len();
    if comm.rank() == root {
        let src = group.lane(0).to_vec();
        for r in (0..comm.size()).filter(|r| *r != root) {
            comm.send_vec(r, tags::BROADCAST_CHUNK, &src)?;
            ledger.elements_sent_per_rank += n as u64;
        }
        lane_broadcast(&src, group)?;
    } else {
        let data = comm.recv_vec(root, tags::BROADCAST_CHUNK, n)?;
        ledger.elements_received += n as u64;
        lane_broadcast(&data, group)?;
    }
    if comm.size() > 1 {
        ledger.comm_steps = 1;
    }
    comm.record(ledger);
    Ok(())
}

/// Baseline allreduce: every rank ships its lane-reduced vector to rank 0,
/// which sums in rank order and sends the result back.
pub fn gather_allreduce(comm: &Communicator, group: &mut TensorGroup) -> Result<CostLedger, CollectiveError> {
    let _busy = comm.begin()?;
    let n = group.len();
    let mut ledger = CostLedger {
        lane_reduce_elements: (n * (group.lane_count() - 1)) as u64,
        ..CostLedger::default()
    };
    let mut acc = lane_reduce(group);
    if comm.size() > 1 {
        if comm.rank() == 0 {
            for r in 1..comm.size() {
                let part = comm.recv_vec(r, tags::GATHER_CHUNK, n)?;
                ledger.elements_received += n as u64;
                for (a, b) in acc.iter_mut().zip(&part) {
                    *a += *b;
                }
            }
            for r in 1..comm.size() {
                comm.send_vec(r, tags::BROADCAST_CHUNK, &acc)?;
                ledger.elements_sent_per_rank += n as u64;
            }
        } else {
            comm.send_vec(0, tags::GATHER_CHUNK, &acc)?;
            ledger.elements_sent_per_rank += n as u64;
            acc = comm.recv_vec(0, tags::BROADCAST_CHUNK, n)?;
            ledger.elements_received += n as u64;
        }
        ledger.comm_steps = 2;
    }
    lane_broadcast(&acc, group)?;
    comm.record(ledger);
    Ok(ledger)
}
