use std::ops::Range;

/// Splits `[0, n)` into `parts` contiguous ranges whose sizes differ by at
/// most one; the first `n % parts` ranges get the extra element.
pub fn split_even(n: usize, parts: usize) -> Vec<Range<usize>> {
    let parts = parts.max(1);
    let (base, extra) = (n / parts, n % parts);
    let mut start = 0;
    (0..parts)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

/// Partitioning of an `n`-element buffer over a ring of `p` ranks.
///
/// Partition `r` is owned by rank `r`; `order` lists ranks in ring order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RingPlan {
    n: usize,
    parts: Vec<Range<usize>>,
    order: Vec<usize>,
}

impl RingPlan {
    pub fn new(n: usize, p: usize) -> Self {
        let p = p.max(1);
        RingPlan {
            n,
            parts: split_even(n, p),
            order: (0..p).collect(),
        }
    }

    /// A plan whose ring visits ranks in `order` (a permutation of 0..p).
    pub fn with_order(n: usize, order: Vec<usize>) -> Option<Self> {
        let mut seen = vec![false; order.len()];
        for &r in &order {
            if r >= order.len() || std::mem::replace(&mut seen[r], true) {
                return None;
            }
        }
        if order.is_empty() {
            return None;
        }
        Some(RingPlan {
            n,
            parts: split_even(n, order.len()),
            order,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn ranks(&self) -> usize {
        self.parts.len()
    }

    pub fn partition(&self, rank: usize) -> Range<usize> {
        self.parts[rank].clone()
    }

    pub fn partitions(&self) -> &[Range<usize>] {
        &self.parts
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub(crate) fn position_of(&self, rank: usize) -> usize {
        self.order.iter().position(|&r| r == rank).expect("rank in ring")
    }

    /// Rank `k` steps after position `pos` (negative walks backwards).
    pub(crate) fn rank_at(&self, pos: usize, k: isize) -> usize {
        let p = self.order.len() as isize;
        self.order[((pos as isize + k).rem_euclid(p)) as usize]
    }

    /// Ranges that ring `ring` of `rings` handles, indexed by partition.
    /// Each partition is itself split evenly across rings.
    pub(crate) fn ring_slices(&self, rings: usize) -> Vec<Vec<Range<usize>>> {
        let per_part: Vec<Vec<Range<usize>>> = self
            .parts
            .iter()
            .map(|p| {
                split_even(p.len(), rings)
                    .into_iter()
                    .map(|r| p.start + r.start..p.start + r.end)
                    .collect()
            })
            .collect();
        (0..rings)
            .map(|k| per_part.iter().map(|subs| subs[k].clone()).collect())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn seven_over_three() {
        let plan = RingPlan::new(7, 3);
        assert_eq!(plan.partitions(), &[0..3, 3..5, 5..7]);
    }

    #[test]
    fn rejects_bad_orders() {
        assert!(RingPlan::with_order(4, vec![0, 0]).is_none());
        assert!(RingPlan::with_order(4, vec![0, 2]).is_none());
        assert!(RingPlan::with_order(4, vec![]).is_none());
        assert!(RingPlan::with_order(4, vec![1, 0]).is_some());
    }

    proptest! {
        #[test]
        fn partitions_cover_disjointly(n in 0usize..2000, p in 1usize..17) {
            let plan = RingPlan::new(n, p);
            let parts = plan.partitions();
            prop_assert_eq!(parts.len(), p);
            let mut next = 0;
            for (i, r) in parts.iter().enumerate() {
                prop_assert_eq!(r.start, next);
                let want = if i < n % p { n.div_ceil(p) } else { n / p };
                prop_assert_eq!(r.len(), want);
                next = r.end;
            }
            prop_assert_eq!(next, n);
        }

        #[test]
        fn ring_slices_tile_the_buffer(n in 0usize..500, p in 1usize..9, rings in 1usize..5) {
            let plan = RingPlan::new(n, p);
            let mut hit = vec![0u8; n];
            for ring in plan.ring_slices(rings) {
                prop_assert_eq!(ring.len(), p);
                for r in ring {
                    for i in r { hit[i] += 1; }
                }
            }
            prop_assert!(hit.iter().all(|&h| h == 1));
        }
    }
}
