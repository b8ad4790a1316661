mod common;

use std::sync::Arc;
use std::time::Duration;

use common::{max_rel_err, naive_sum, random_groups, run_ranks, run_ranks_with_timeout};
use hybridps::collectives::{
    allreduce, broadcast, gather_allreduce, lane_reduce, ring_allgather, ring_reduce_scatter,
    CollectiveError, Communicator, RingPlan, TensorGroup,
};
use hybridps::transport::{InprocNetwork, NodeId};

#[test]
fn allgather_two_ranks() {
    let out = run_ranks(2, |c| {
        let plan = RingPlan::new(2, 2);
        ring_allgather(c, &[c.rank() as f64 + 1.0], &plan).unwrap()
    });
    assert_eq!(out, vec![vec![1.0, 2.0], vec![1.0, 2.0]]);
}

#[test]
fn allgather_four_ranks_takes_three_steps() {
    let out = run_ranks(4, |c| {
        let plan = RingPlan::new(8, 4);
        let r = c.rank() as f64;
        let v = ring_allgather(c, &[r, r], &plan).unwrap();
        (v, c.last_ledger().comm_steps)
    });
    let want = vec![0.0, 0.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0];
    for (v, steps) in out {
        assert_eq!(v, want);
        assert_eq!(steps, 3);
    }
}

#[test]
fn allgather_uneven_partitions() {
    let out = run_ranks(3, |c| {
        let plan = RingPlan::new(7, 3);
        let part = plan.partition(c.rank());
        let mine: Vec<f64> = part.clone().map(|i| i as f64).collect();
        (part.len(), ring_allgather(c, &mine, &plan).unwrap())
    });
    let sizes: Vec<usize> = out.iter().map(|o| o.0).collect();
    assert_eq!(sizes, vec![3, 2, 2]);
    for (_, v) in out {
        assert_eq!(v, (0..7).map(|i| i as f64).collect::<Vec<_>>());
    }
}

#[test]
fn allgather_rejects_wrong_part_length() {
    let out = run_ranks(1, |c| ring_allgather(c, &[1.0, 2.0], &RingPlan::new(1, 1)));
    assert!(matches!(out[0], Err(CollectiveError::PlanMismatch { .. })));
}

#[test]
fn reduce_scatter_two_ranks() {
    let out = run_ranks(2, |c| {
        let v = if c.rank() == 0 { vec![1.0, 2.0] } else { vec![10.0, 20.0] };
        let g = TensorGroup::new(0, vec![v]).unwrap();
        ring_reduce_scatter(c, &g, &RingPlan::new(2, 2)).unwrap()
    });
    assert_eq!(out, vec![vec![11.0], vec![22.0]]);
}

#[test]
fn reduce_scatter_single_rank_is_lane_reduce() {
    let g = TensorGroup::new(0, vec![vec![1.0, 2.0, 3.0], vec![0.5, 0.5, 0.5]]).unwrap();
    let out = run_ranks(1, |c| ring_reduce_scatter(c, &g, &RingPlan::new(3, 1)).unwrap());
    assert_eq!(out[0], lane_reduce(&g));
    assert_eq!(out[0], vec![1.5, 2.5, 3.5]);
}

#[test]
fn reduce_scatter_large_matches_naive_sum() {
    let n = 100_000;
    let groups = random_groups(7, 4, 2, n);
    let (want, mag) = naive_sum(&groups);
    let plan = RingPlan::new(n, 4);
    let parts = run_ranks(4, |c| ring_reduce_scatter(c, &groups[c.rank()], &plan).unwrap());
    let got: Vec<f64> = parts.concat();
    assert!(max_rel_err(&got, &want, &mag) <= 1e-12);
}

#[test]
fn allreduce_rank_constants() {
    let out = run_ranks(4, |c| {
        let mut g = TensorGroup::replicated(0, 2, &[c.rank() as f64]);
        allreduce(c, &mut g, 2).unwrap();
        g
    });
    for g in out {
        assert!(g.lanes().iter().all(|l| l == &[12.0]));
    }
}

#[test]
fn allreduce_ring_counts_agree() {
    let groups = random_groups(11, 5, 2, 1001);
    let run = |rings| {
        run_ranks(5, |c| {
            let mut g = groups[c.rank()].clone();
            allreduce(c, &mut g, rings).unwrap();
            g.lane(0).to_vec()
        })
    };
    let one = run(1);
    let two = run(2);
    let (want, mag) = naive_sum(&groups);
    for (a, b) in one.iter().zip(&two) {
        assert!(max_rel_err(a, b, &mag) <= 1e-12);
        assert!(max_rel_err(a, &want, &mag) <= 1e-12);
    }
}

#[test]
fn allreduce_is_bit_reproducible() {
    let groups = random_groups(3, 3, 4, 513);
    let run = || {
        run_ranks(3, |c| {
            let mut g = groups[c.rank()].clone();
            allreduce(c, &mut g, 2).unwrap();
            g
        })
    };
    assert_eq!(run(), run());
}

#[test]
fn allreduce_ledger_matches_cost_formula() {
    let n = 4 << 20;
    let out = run_ranks(4, |c| {
        let mut g = TensorGroup::replicated(0, 1, &vec![1.0; n]);
        let ledger = allreduce(c, &mut g, 2).unwrap();
        assert!(g.lane(0).iter().all(|v| *v == 4.0));
        ledger
    });
    for ledger in out {
        assert_eq!(ledger.elements_sent_per_rank, 6 << 20);
        assert_eq!(ledger.comm_steps, 6);
    }
}

#[test]
fn more_rings_than_elements_is_clamped() {
    let out = run_ranks(2, |c| {
        let mut g = TensorGroup::replicated(0, 1, &[1.0, 2.0]);
        allreduce(c, &mut g, 8).unwrap();
        g.lane(0).to_vec()
    });
    assert_eq!(out, vec![vec![2.0, 4.0]; 2]);
}

#[test]
fn zero_rings_rejected() {
    let out = run_ranks(1, |c| allreduce(c, &mut TensorGroup::zeros(0, 1, 3), 0));
    assert!(matches!(out[0], Err(CollectiveError::InvalidRings)));
}

#[test]
fn reduce_scatter_then_allgather_equals_allreduce() {
    let groups = random_groups(5, 4, 2, 203);
    let composed = run_ranks(4, |c| {
        let plan = RingPlan::new(203, 4);
        let part = ring_reduce_scatter(c, &groups[c.rank()], &plan).unwrap();
        ring_allgather(c, &part, &plan).unwrap()
    });
    let direct = run_ranks(4, |c| {
        let mut g = groups[c.rank()].clone();
        allreduce(c, &mut g, 1).unwrap();
        g.lane(0).to_vec()
    });
    assert_eq!(composed, direct);
}

#[test]
fn shape_mismatch_between_ranks_is_detected() {
    let out = run_ranks_with_timeout(2, Duration::from_millis(300), |c| {
        let n = if c.rank() == 0 { 4 } else { 6 };
        allreduce(c, &mut TensorGroup::zeros(0, 1, n), 1)
    });
    assert!(out.iter().any(|r| matches!(r, Err(CollectiveError::PlanMismatch { .. }))));
}

#[test]
fn concurrent_calls_on_one_communicator_are_refused() {
    let net = InprocNetwork::new();
    let members = vec![NodeId::worker(0), NodeId::worker(1)];
    let mk = |id| {
        let ep = Arc::new(net.endpoint(id, &members).unwrap());
        Communicator::new(ep, members.clone(), Duration::from_secs(5)).unwrap()
    };
    let c0 = mk(members[0]);
    let c1 = mk(members[1]);
    std::thread::scope(|s| {
        let first = s.spawn(|| {
            let mut g = TensorGroup::zeros(0, 1, 4);
            allreduce(&c0, &mut g, 1)
        });
        // rank 0 is now blocked waiting for rank 1
        std::thread::sleep(Duration::from_millis(100));
        let mut g = TensorGroup::zeros(0, 1, 4);
        assert!(matches!(allreduce(&c0, &mut g, 1), Err(CollectiveError::Busy)));
        let mut g = TensorGroup::zeros(0, 1, 4);
        allreduce(&c1, &mut g, 1).unwrap();
        first.join().unwrap().unwrap();
    });
}

#[test]
fn broadcast_and_gather_baseline() {
    let out = run_ranks(3, |c| {
        let mut g = TensorGroup::replicated(0, 2, &[c.rank() as f64 + 1.0, 0.0]);
        broadcast(c, 2, &mut g).unwrap();
        let after_bcast = g.clone();
        let mut h = TensorGroup::replicated(0, 2, &[c.rank() as f64, 1.0]);
        let ledger = gather_allreduce(c, &mut h).unwrap();
        (after_bcast, h, ledger)
    });
    for (rank, (b, h, ledger)) in out.iter().enumerate() {
        assert!(b.lanes().iter().all(|l| l == &[3.0, 0.0]));
        assert!(h.lanes().iter().all(|l| l == &[6.0, 6.0]));
        let sent = if rank == 0 { 4 } else { 2 };
        assert_eq!(ledger.elements_sent_per_rank, sent);
    }
}
