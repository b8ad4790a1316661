use std::ops::Range;

use super::plan::split_even;
use super::CollectiveError;

/// Below this many elements lane kernels run on the calling thread.
const PARALLEL_MIN: usize = 1 << 16;

/// One key's vectors across the lanes of a worker, all of equal length.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorGroup {
    key: u32,
    lanes: Vec<Vec<f64>>,
}

impl TensorGroup {
    pub fn new(key: u32, lanes: Vec<Vec<f64>>) -> Result<Self, CollectiveError> {
        let Some(first) = lanes.first() else {
            return Err(CollectiveError::NoLanes);
        };
        let n = first.len();
        if let Some(bad) = lanes.iter().find(|l| l.len() != n) {
            return Err(CollectiveError::LaneLengthMismatch {
                expected: n,
                got: bad.len(),
            });
        }
        Ok(TensorGroup { key, lanes })
    }

    pub fn zeros(key: u32, lanes: usize, n: usize) -> Self {
        TensorGroup {
            key,
            lanes: vec![vec![0.0; n]; lanes.max(1)],
        }
    }

    /// Every lane a copy of `values`.
    pub fn replicated(key: u32, lanes: usize, values: &[f64]) -> Self {
        TensorGroup {
            key,
            lanes: vec![values.to_vec(); lanes.max(1)],
        }
    }

    pub fn key(&self) -> u32 {
        self.key
    }

    pub fn lane_count(&self) -> usize {
        self.lanes.len()
    }

    pub fn len(&self) -> usize {
        self.lanes[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn lane(&self, i: usize) -> &[f64] {
        &self.lanes[i]
    }

    pub fn lane_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.lanes[i]
    }

    pub fn lanes(&self) -> &[Vec<f64>] {
        &self.lanes
    }

    /// Elementwise sum over lanes of `range`, written into `out`.
    /// Lanes are always added in order 0..L.
    pub(crate) fn reduce_range_into(&self, range: Range<usize>, out: &mut [f64]) {
        debug_assert_eq!(range.len(), out.len());
        out.copy_from_slice(&self.lanes[0][range.clone()]);
        for lane in &self.lanes[1..] {
            for (o, v) in out.iter_mut().zip(&lane[range.clone()]) {
                *o += *v;
            }
        }
    }

    /// Copies `src` into `range` of every lane.
    pub(crate) fn broadcast_range(&mut self, range: Range<usize>, src: &[f64]) {
        for lane in &mut self.lanes {
            lane[range.clone()].copy_from_slice(src);
        }
    }
}

/// Elementwise sum over the lanes of `group`.
///
/// The index space is split into one chunk per lane and each lane sums its
/// chunk across all lanes, the way one reduction kernel per device would.
pub fn lane_reduce(group: &TensorGroup) -> Vec<f64> {
    let n = group.len();
    let mut out = vec![0.0; n];
    let chunks = split_even(n, group.lane_count());
    if n < PARALLEL_MIN || group.lane_count() == 1 {
        for c in chunks {
            group.reduce_range_into(c.clone(), &mut out[c]);
        }
        return out;
    }
    std::thread::scope(|s| {
        let mut rest = out.as_mut_slice();
        for c in chunks {
            let (head, tail) = rest.split_at_mut(c.len());
            rest = tail;
            s.spawn(move || group.reduce_range_into(c, head));
        }
    });
    out
}

/// Overwrites every lane of `group` with `src`.
pub fn lane_broadcast(src: &[f64], group: &mut TensorGroup) -> Result<(), CollectiveError> {
    if src.len() != group.len() {
        return Err(CollectiveError::LengthMismatch {
            expected: group.len(),
            got: src.len(),
        });
    }
    if src.len() < PARALLEL_MIN || group.lane_count() == 1 {
        group.broadcast_range(0..src.len(), src);
        return Ok(());
    }
    std::thread::scope(|s| {
        for lane in group.lanes.iter_mut() {
            s.spawn(move || lane.copy_from_slice(src));
        }
    });
    Ok(())
}
