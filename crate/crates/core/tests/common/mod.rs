#![allow(dead_code)]

use std::sync::Arc;
use std::time::Duration;

use hybridps::collectives::{Communicator, TensorGroup};
use hybridps::transport::{InprocNetwork, NodeId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Runs `f` once per rank of a `p`-worker in-process group, in parallel.
pub fn run_ranks<T: Send>(p: usize, f: impl Fn(&Communicator) -> T + Sync) -> Vec<T> {
    run_ranks_with_timeout(p, Duration::from_secs(30), f)
}

pub fn run_ranks_with_timeout<T: Send>(
    p: usize,
    timeout: Duration,
    f: impl Fn(&Communicator) -> T + Sync,
) -> Vec<T> {
    let net = InprocNetwork::new();
    let members: Vec<NodeId> = (0..p as u32).map(NodeId::worker).collect();
    let comms: Vec<Communicator> = members
        .iter()
        .map(|id| {
            let ep = Arc::new(net.endpoint(*id, &members).unwrap());
            Communicator::new(ep, members.clone(), timeout).unwrap()
        })
        .collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = comms.iter().map(|c| s.spawn(|| f(c))).collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    })
}

/// Per-rank tensor groups of uniform random values in [-1, 1).
pub fn random_groups(seed: u64, p: usize, lanes: usize, n: usize) -> Vec<TensorGroup> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..p)
        .map(|_| {
            let l = (0..lanes)
                .map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            TensorGroup::new(0, l).unwrap()
        })
        .collect()
}

/// Sequential sum over ranks then lanes, plus the matching sum of
/// magnitudes used to scale the error bound.
pub fn naive_sum(groups: &[TensorGroup]) -> (Vec<f64>, Vec<f64>) {
    let n = groups[0].len();
    let mut sum = vec![0.0; n];
    let mut mag = vec![0.0; n];
    for g in groups {
        for lane in g.lanes() {
            for i in 0..n {
                sum[i] += lane[i];
                mag[i] += lane[i].abs();
            }
        }
    }
    (sum, mag)
}

/// Largest elementwise error relative to the magnitude of the summed terms.
pub fn max_rel_err(got: &[f64], want: &[f64], mag: &[f64]) -> f64 {
    got.iter()
        .zip(want)
        .zip(mag)
        .map(|((g, w), m)| (g - w).abs() / m.max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max)
}

use hybridps::transport::{Endpoint, Topology};

/// Deterministic send script over `eps` (ordered as `Topology::nodes`).
/// Every node sends numbered payloads to each of its peers, then drains its
/// inbox. Returns, per node, the raw inbound frames grouped by source.
pub fn run_script(eps: &[Endpoint], rounds: usize) -> Vec<Vec<(NodeId, Vec<Vec<u8>>)>> {
    for ep in eps {
        ep.enable_tap();
    }
    std::thread::scope(|s| {
        for (i, ep) in eps.iter().enumerate() {
            s.spawn(move || {
                let peers = ep.peers();
                let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
                for round in 0..rounds {
                    for p in &peers {
                        let len = rng.random_range(0..64usize);
                        let mut payload = (round as u32).to_le_bytes().to_vec();
                        payload.extend((0..len).map(|_| rng.random::<u8>()));
                        let tag = 0x40 + (round % 7) as u8;
                        ep.send(*p, tag, &payload).unwrap();
                    }
                }
                for p in &peers {
                    for round in 0..rounds {
                        let f = ep
                            .recv_where(Duration::from_secs(20), Some(*p), |_| true)
                            .unwrap();
                        let seen = u32::from_le_bytes(f.payload[..4].try_into().unwrap());
                        assert_eq!(seen as usize, round, "out of order from {p}");
                    }
                }
            });
        }
    });
    eps.iter()
        .map(|ep| {
            let mut by_src: std::collections::BTreeMap<NodeId, Vec<Vec<u8>>> = Default::default();
            for (src, bytes) in ep.take_tap() {
                by_src.entry(src).or_default().push(bytes);
            }
            by_src.into_iter().collect()
        })
        .collect()
}

pub fn small_topology() -> Topology {
    Topology::new(2, 4, 2).unwrap()
}

use hybridps::engine::{DeferredOp, Engine, ExecRecord};

/// Pushes `ops` operations over `tags` random tags and checks every
/// conflicting pair against the execution log. Returns the number of
/// happens-before violations and whether admission order equals seq order.
pub fn engine_stress(seed: u64, ops: usize, tags: usize, threads: usize) -> (usize, bool) {
    let engine = Engine::with_logging(threads);
    let pool: Vec<_> = (0..tags).map(|_| engine.new_tag()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // per op: (reads, mutates) as tag indices
    let mut sets: Vec<(Vec<usize>, Vec<usize>)> = Vec::with_capacity(ops);
    for _ in 0..ops {
        let k = rng.random_range(1..=4usize);
        let mut picked: Vec<usize> = (0..k).map(|_| rng.random_range(0..tags)).collect();
        picked.sort_unstable();
        picked.dedup();
        let (mut r, mut m) = (Vec::new(), Vec::new());
        for t in picked {
            if rng.random_bool(0.6) {
                r.push(t);
            } else {
                m.push(t);
            }
        }
        let spin = rng.random_range(0..200u64);
        let op = DeferredOp::new(move || {
            let mut x = 0u64;
            for i in 0..spin {
                x = std::hint::black_box(x.wrapping_add(i));
            }
            Ok(())
        })
        .reads(&r.iter().map(|i| pool[*i]).collect::<Vec<_>>())
        .mutates(&m.iter().map(|i| pool[*i]).collect::<Vec<_>>());
        engine.push(op).unwrap();
        sets.push((r, m));
    }
    engine.wait_all().unwrap();

    let admission = engine.admission_log();
    let in_order = admission.len() == ops && admission.iter().enumerate().all(|(i, s)| *s == i as u64);

    let mut rec = vec![ExecRecord { seq: 0, start: 0, end: 0 }; ops];
    let log = engine.execution_log();
    assert_eq!(log.len(), ops);
    for e in log {
        rec[e.seq as usize] = e;
    }
    // per tag, (seq, mutates?) in enqueue order
    let mut per_tag: Vec<Vec<(usize, bool)>> = vec![Vec::new(); tags];
    for (i, (r, m)) in sets.iter().enumerate() {
        for t in r {
            per_tag[*t].push((i, false));
        }
        for t in m {
            per_tag[*t].push((i, true));
        }
    }
    let mut violations = 0;
    for list in &per_tag {
        for (x, &(a, am)) in list.iter().enumerate() {
            for &(b, bm) in &list[x + 1..] {
                if (am || bm) && rec[b].start <= rec[a].end {
                    violations += 1;
                }
            }
        }
    }
    (violations, in_order)
}

use hybridps::kvstore::{KvOptions, KvStore, Server, ServerReport, StoreMode};

/// Runs one in-process job: a server thread per server rank and `f` once
/// per worker. Every worker's store is closed after `f` returns.
pub fn run_cluster<T: Send>(
    topo: Topology,
    mode: StoreMode,
    f: impl Fn(&KvStore) -> T + Sync,
) -> (Vec<T>, Vec<ServerReport>) {
    let net = InprocNetwork::new();
    let eps = net.connect_all(&topo).unwrap();
    let mut servers = Vec::new();
    let mut workers = Vec::new();
    for ep in eps {
        match ep.id().role {
            hybridps::transport::Role::Server => servers.push(Arc::new(ep)),
            hybridps::transport::Role::Worker => workers.push(Arc::new(ep)),
            _ => {}
        }
    }
    let opts = KvOptions {
        timeout: Duration::from_secs(30),
        ..KvOptions::default()
    };
    std::thread::scope(|s| {
        let sh: Vec<_> = servers
            .iter()
            .map(|ep| {
                let ep = ep.clone();
                s.spawn(move || Server::new(ep, &topo, mode, Duration::from_secs(30)).run().unwrap())
            })
            .collect();
        let wh: Vec<_> = workers
            .iter()
            .map(|ep| {
                let ep = ep.clone();
                let f = &f;
                s.spawn(move || {
                    let kv = KvStore::new(ep, topo, mode, opts).unwrap();
                    let out = f(&kv);
                    kv.close().unwrap();
                    out
                })
            })
            .collect();
        let outs = wh.into_iter().map(|h| h.join().unwrap()).collect();
        let reports = sh.into_iter().map(|h| h.join().unwrap()).collect();
        (outs, reports)
    })
}

use hybridps::launcher::config::RunConfig;
use hybridps::trainer::{shard_data, Dataset, Sample};
use hybridps::trainer::{Model, ModelKind};

/// Serial mini-batch SGD: iteration `t` trains on the round-robin
/// concatenation of every worker's `t`-th batch. Returns the parameters
/// after each epoch.
pub fn serial_sgd(cfg: &RunConfig, data: &Dataset) -> Vec<Vec<Vec<f64>>> {
    let w = cfg.workers as usize;
    let b = cfg.batch_size;
    let shards = shard_data(&data.train, w, cfg.seed).unwrap();
    let iters = (data.train.len() / w) / b;
    let mb = (w * b) as f64;
    let mut model = Model::new(cfg.model, data.dim, data.classes, cfg.seed);
    let mut out = Vec::new();
    for _ in 0..cfg.epochs {
        for t in 0..iters {
            let batch: Vec<Sample> = shards
                .iter()
                .flat_map(|s| s[t * b..(t + 1) * b].iter().cloned())
                .collect();
            let (_, g) = model.forward_backward(&batch).unwrap();
            for (p, g) in model.params.iter_mut().zip(&g) {
                for (x, d) in p.iter_mut().zip(g) {
                    *x -= cfg.lr * d / mb;
                }
            }
        }
        out.push(model.params.clone());
    }
    out
}

/// Largest coordinate difference between two parameter sets.
pub fn max_param_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

#[allow(clippy::needless_range_loop)]
/// Draws a random model and batch and returns the worst relative gap
/// between analytic and central-difference gradients.
pub fn finite_difference_gap(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = rng.random_range(1..6);
    let classes = rng.random_range(2..5);
    let kind = if rng.random_bool(0.5) {
        ModelKind::Logistic
    } else {
        ModelKind::Mlp {
            hidden: rng.random_range(1..6),
        }
    };
    let mut model = Model::new(kind, dim, classes, seed);
    for p in model.params.iter_mut() {
        for x in p.iter_mut() {
            *x = rng.random_range(-1.0..1.0);
        }
    }
    let batch: Vec<Sample> = (0..rng.random_range(1..8))
        .map(|_| Sample {
            x: (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
            y: rng.random_range(0..classes),
        })
        .collect();
    let (_, grads) = model.forward_backward(&batch).unwrap();
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for k in 0..model.params.len() {
        for i in 0..model.params[k].len() {
            let orig = model.params[k][i];
            model.params[k][i] = orig + h;
            let up = model.loss(&batch);
            model.params[k][i] = orig - h;
            let down = model.loss(&batch);
            model.params[k][i] = orig;
            let fd = (up - down) / (2.0 * h);
            let a = grads[k][i];
            let scale = a.abs().max(fd.abs()).max(1e-3);
            worst = worst.max((a - fd).abs() / scale);
        }
    }
    worst
}
