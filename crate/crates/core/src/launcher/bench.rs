use std::io::Write;
use std::sync::{Arc, Barrier};
use std::time::Instant;

use serde::Serialize;

use super::config::{RunConfig, TransportKind};
use super::LaunchError;
use crate::collectives::{allreduce, gather_allreduce, predict_cost, CollectiveError, Communicator, CostLedger, TensorGroup};
use crate::kvstore::StoreMode;
use crate::transport::tcp::connect_all_local;
use crate::transport::{Endpoint, InprocNetwork, NodeId, Role, Topology};

pub const BENCH_HEADER: &str = "size_bytes,variant,p,time_s,modeled_s,bytes_per_rank,steps";

/// One measured allreduce.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub size_bytes: u64,
    pub variant: String,
    pub p: usize,
    /// Slowest rank's wall time.
    pub time_s: f64,
    pub modeled_s: f64,
    /// Largest per-rank traffic in either direction.
    pub bytes_per_rank: u64,
    pub steps: u64,
}

#[derive(Clone, Copy)]
enum Variant {
    Rings(usize),
    Gather,
}

impl Variant {
    fn name(self) -> String {
        match self {
            Variant::Rings(k) => format!("ring{k}"),
            Variant::Gather => "gather".into(),
        }
    }
}

const VARIANTS: [Variant; 4] = [Variant::Rings(1), Variant::Rings(2), Variant::Rings(4), Variant::Gather];

fn endpoints(cfg: &RunConfig) -> Result<Vec<Arc<Endpoint>>, LaunchError> {
    let topo = Topology::new(0, cfg.workers, 1)?;
    let eps = match cfg.transport {
        TransportKind::Inproc => InprocNetwork::new().connect_all(&topo)?,
        TransportKind::Tcp => connect_all_local(&topo, cfg.timeout())?,
    };
    Ok(eps
        .into_iter()
        .filter(|e| e.id().role == Role::Worker)
        .map(Arc::new)
        .collect())
}

/// Times every allreduce variant on each message size over `cfg.workers`
/// ranks with `cfg.lanes` lanes each.
pub fn bench_allreduce(cfg: &RunConfig, sizes: &[u64]) -> Result<Vec<BenchRow>, LaunchError> {
    cfg.validate()?;
    if cfg.mode != StoreMode::PureMpi {
        return Err(LaunchError::Config("benchmarks run in pure-mpi mode".into()));
    }
    let eps = endpoints(cfg)?;
    let members: Vec<NodeId> = eps.iter().map(|e| e.id()).collect();
    let comms = eps
        .iter()
        .map(|e| Communicator::new(e.clone(), members.clone(), cfg.timeout()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| LaunchError::Child(e.to_string()))?;
    let p = comms.len();
    let mut rows = Vec::new();
    for &size in sizes {
        let n = (size / 8) as usize;
        let barrier = Barrier::new(p);
        let per_rank: Vec<Result<Vec<(f64, CostLedger)>, CollectiveError>> = std::thread::scope(|s| {
            let hs: Vec<_> = comms
                .iter()
                .map(|comm| {
                    let barrier = &barrier;
                    s.spawn(move || {
                        let lanes = (0..cfg.lanes)
                            .map(|l| vec![(comm.rank() * cfg.lanes + l) as f64; n])
                            .collect();
                        let mut group = TensorGroup::new(0, lanes)?;
                        let mut out = Vec::new();
                        for v in VARIANTS {
                            barrier.wait();
                            let t = Instant::now();
                            let ledger = match v {
                                Variant::Rings(k) => allreduce(comm, &mut group, k)?,
                                Variant::Gather => gather_allreduce(comm, &mut group)?,
                            };
                            out.push((t.elapsed().as_secs_f64(), ledger));
                        }
                        Ok(out)
                    })
                })
                .collect();
            hs.into_iter().map(|h| h.join().expect("bench rank panicked")).collect()
        });
        let per_rank = per_rank
            .into_iter()
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| LaunchError::Child(e.to_string()))?;
        for (i, v) in VARIANTS.iter().enumerate() {
            let time_s = per_rank.iter().map(|r| r[i].0).fold(0.0, f64::max);
            let elems = per_rank
                .iter()
                .map(|r| r[i].1.elements_sent_per_rank.max(r[i].1.elements_received))
                .max()
                .unwrap_or(0);
            let bytes = n as f64 * 8.0;
            let modeled_s = match v {
                Variant::Rings(_) => predict_cost(p, bytes, cfg.cost_alpha, cfg.cost_beta, cfg.cost_gamma),
                // the root receives and then sends p-1 full copies
                Variant::Gather if p > 1 => {
                    let q = (p - 1) as f64;
                    2.0 * cfg.cost_alpha + 2.0 * q * bytes * cfg.cost_beta + q * bytes * cfg.cost_gamma
                }
                Variant::Gather => 0.0,
            };
            rows.push(BenchRow {
                size_bytes: size,
                variant: v.name(),
                p,
                time_s,
                modeled_s,
                bytes_per_rank: elems * 8,
                steps: per_rank[0][i].1.comm_steps,
            });
        }
    }
    Ok(rows)
}

pub fn write_bench(out: impl Write, rows: &[BenchRow]) -> Result<(), LaunchError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| LaunchError::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bench_cfg(workers: u32) -> RunConfig {
        RunConfig {
            workers,
            clients: 1,
            servers: 0,
            mode: StoreMode::PureMpi,
            ..RunConfig::default()
        }
    }

    #[test]
    fn single_rank_moves_no_bytes() {
        let rows = bench_allreduce(&bench_cfg(1), &[4096]).unwrap();
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(|r| r.bytes_per_rank == 0 && r.steps == 0 && r.modeled_s == 0.0));
    }

    #[test]
    fn ring_beats_gather_root_for_three_or_more() {
        for p in 3..6 {
            let rows = bench_allreduce(&bench_cfg(p), &[8 * 3000]).unwrap();
            let gather = rows.iter().find(|r| r.variant == "gather").unwrap().bytes_per_rank;
            for r in rows.iter().filter(|r| r.variant.starts_with("ring")) {
                assert!(r.bytes_per_rank < gather, "p={p}: {r:?} vs {gather}");
            }
        }
    }

    #[test]
    fn rejects_server_modes() {
        assert!(matches!(
            bench_allreduce(&RunConfig::default(), &[64]),
            Err(LaunchError::Config(_))
        ));
    }

    #[test]
    fn header_matches_rows() {
        let rows = bench_allreduce(&bench_cfg(2), &[64]).unwrap();
        let mut buf = Vec::new();
        write_bench(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next(), Some(BENCH_HEADER));
        assert_eq!(text.lines().count(), 5);
    }
}
