use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::data::{shard_data, Dataset};
use super::metrics::{aggregate, MetricsRecord};
use super::model::Model;
use super::TrainError;
use crate::collectives::{split_even, TensorGroup};
use crate::kvstore::{KvError, KvStore, Server, ServerReport, StalenessStats, StoreMode, Var};
use crate::launcher::config::{Algorithm, RunConfig};
use crate::launcher::kv_options;
use crate::optimizers::{elastic_local_update, sgd_update, OptimizerSpec};
use crate::transport::{Endpoint, InprocNetwork, Role};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerEpoch {
    pub epoch: usize,
    pub epoch_time_s: f64,
    /// Validation accuracy of this worker's model; recorded on worker 0.
    pub val_acc: Option<f64>,
    pub loss: f64,
    pub staleness: StalenessStats,
    pub server_bytes: u64,
    pub server_msgs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerOutcome {
    pub rank: u32,
    pub iterations_per_epoch: usize,
    pub epochs: Vec<WorkerEpoch>,
    /// Parameters after each epoch, kept on worker 0 only.
    pub params_by_epoch: Vec<Vec<Vec<f64>>>,
}

fn first_lane(v: &Var) -> Vec<f64> {
    v.lock().lane(0).to_vec()
}

/// One worker's whole training run. Closes the store when done.
pub fn run_worker(kv: &KvStore, cfg: &RunConfig, data: &Dataset) -> Result<WorkerOutcome, TrainError> {
    let rank = kv.rank();
    let b = cfg.batch_size;
    let shards = shard_data(&data.train, cfg.workers as usize, cfg.seed)?;
    let shard = &shards[rank as usize];
    // every worker runs the same number of iterations
    let iters = (data.train.len() / cfg.workers as usize) / b;
    if iters == 0 {
        return Err(TrainError::Config(format!(
            "batch_size {b} exceeds the smallest shard of {} samples",
            data.train.len() / cfg.workers as usize
        )));
    }
    let lanes = split_even(b, cfg.lanes);
    let rescale = 1.0 / cfg.mini_batch() as f64;

    let mut model = Model::new(cfg.model, data.dim, data.classes, cfg.seed);
    let keys: Vec<u32> = (0..model.key_count() as u32).collect();
    let replicate = |k: usize, v: &[f64]| TensorGroup::replicated(k as u32, cfg.lanes, v);
    let param_vars: Vec<Var> = model
        .params
        .iter()
        .enumerate()
        .map(|(k, p)| kv.var(replicate(k, p)))
        .collect();
    let grad_vars: Vec<Var> = model
        .params
        .iter()
        .enumerate()
        .map(|(k, p)| kv.var(TensorGroup::zeros(k as u32, cfg.lanes, p.len())))
        .collect();
    let center_vars: Vec<Var> = model
        .params
        .iter()
        .enumerate()
        .map(|(k, p)| kv.var(TensorGroup::zeros(k as u32, cfg.lanes, p.len())))
        .collect();

    match cfg.algorithm {
        Algorithm::Sgd => {}
        Algorithm::Asgd => kv.set_optimizer(OptimizerSpec::sgd(cfg.lr, rescale))?,
        Algorithm::Esgd => kv.set_optimizer(OptimizerSpec::elastic(cfg.alpha))?,
    }
    kv.init(&keys, &param_vars)?;
    for (p, v) in model.params.iter_mut().zip(&param_vars) {
        *p = first_lane(v);
    }

    let mut outcome = WorkerOutcome {
        rank,
        iterations_per_epoch: iters,
        epochs: Vec::with_capacity(cfg.epochs),
        params_by_epoch: Vec::new(),
    };
    kv.take_staleness();
    let mut traffic = kv.server_traffic();
    let mut iter: u64 = 0;

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let mut epoch_loss = 0.0;
        for it in 0..iters {
            let batch = &shard[it * b..(it + 1) * b];
            let diverged = || TrainError::Divergence {
                rank,
                epoch,
                iteration: it,
            };
            let map_fb = |e: TrainError| match e {
                TrainError::NonFiniteLoss => diverged(),
                other => other,
            };
            let mut lane_grads = Vec::with_capacity(lanes.len());
            let mut loss = 0.0;
            for r in &lanes[..lanes.len() - 1] {
                let (l, g) = model.forward_backward(&batch[r.clone()]).map_err(map_fb)?;
                loss += l;
                lane_grads.push(g);
            }
            // the last lane's backward pass hands each key over as soon as it
            // is complete, so its aggregation starts while earlier layers are
            // still being differentiated
            let mut failed: Option<KvError> = None;
            let last = lanes.last().unwrap().clone();
            let (l, _) = model
                .forward_backward_with(&batch[last], |k, g| {
                    let mut group: Vec<Vec<f64>> = lane_grads.iter().map(|lg| lg[k].clone()).collect();
                    group.push(g.to_vec());
                    *grad_vars[k].lock() = TensorGroup::new(k as u32, group).expect("equal lane lengths");
                    let key = k as u32;
                    let r = match (cfg.algorithm, cfg.mode) {
                        (Algorithm::Sgd, StoreMode::PureMpi) => kv.pushpull(key, &grad_vars[k], &grad_vars[k]),
                        (Algorithm::Sgd, _) => kv.push(key, &grad_vars[k]).and_then(|_| kv.pull(key, &grad_vars[k])),
                        (Algorithm::Asgd, _) => kv.push(key, &grad_vars[k]).and_then(|_| kv.pull(key, &param_vars[k])),
                        (Algorithm::Esgd, _) => kv.group_allreduce(&grad_vars[k]),
                    };
                    if let Err(e) = r {
                        failed.get_or_insert(e);
                    }
                })
                .map_err(map_fb)?;
            loss += l;
            if let Some(e) = failed {
                return Err(e.into());
            }
            if !loss.is_finite() {
                return Err(diverged());
            }
            epoch_loss += loss;

            let exchange = cfg.algorithm == Algorithm::Esgd && iter.is_multiple_of(cfg.interval);
            if exchange {
                for (k, key) in keys.iter().enumerate() {
                    *param_vars[k].lock() = replicate(k, &model.params[k]);
                    kv.push_local(*key, &param_vars[k])?;
                    kv.pull(*key, &center_vars[k])?;
                }
            }
            kv.wait_all()?;

            for k in 0..keys.len() {
                let p = &mut model.params[k];
                match cfg.algorithm {
                    Algorithm::Sgd => *p = sgd_update(p, grad_vars[k].lock().lane(0), cfg.lr, rescale).map_err(KvError::from)?,
                    Algorithm::Asgd => *p = first_lane(&param_vars[k]),
                    Algorithm::Esgd => {
                        if exchange {
                            *p = elastic_local_update(p, center_vars[k].lock().lane(0), cfg.alpha).map_err(KvError::from)?;
                        }
                        *p = sgd_update(p, grad_vars[k].lock().lane(0), cfg.lr, rescale).map_err(KvError::from)?;
                    }
                }
            }
            iter += 1;
        }
        let epoch_time_s = start.elapsed().as_secs_f64();
        let now = kv.server_traffic();
        let delta = now.saturating_sub(traffic);
        traffic = now;
        outcome.epochs.push(WorkerEpoch {
            epoch: epoch + 1,
            epoch_time_s,
            val_acc: (rank == 0).then(|| model.accuracy(&data.test)),
            loss: epoch_loss,
            staleness: kv.take_staleness(),
            server_bytes: delta.bytes_sent,
            server_msgs: delta.msgs_sent,
        });
        if rank == 0 {
            outcome.params_by_epoch.push(model.params.clone());
        }
        log::debug!("worker {rank} finished epoch {} in {epoch_time_s:.3}s", epoch + 1);
    }
    kv.close()?;
    Ok(outcome)
}

/// Everything an in-process run produced.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub metrics: Vec<MetricsRecord>,
    pub workers: Vec<WorkerOutcome>,
    pub servers: Vec<ServerReport>,
}

/// Runs servers and workers as threads of this process, linked by the
/// in-process transport.
pub fn train_inproc(cfg: &RunConfig) -> Result<RunOutcome, TrainError> {
    cfg.validate().map_err(|e| TrainError::Config(e.to_string()))?;
    let data = cfg.dataset.load()?;
    let per_worker = data.train.len() / cfg.workers as usize;
    if per_worker < cfg.batch_size {
        return Err(TrainError::Config(format!(
            "batch_size {} exceeds the {per_worker} samples each worker holds",
            cfg.batch_size
        )));
    }
    let topo = cfg.topology();
    let net = InprocNetwork::new();
    let eps: Vec<Arc<Endpoint>> = net.connect_all(&topo)?.into_iter().map(Arc::new).collect();
    let first_error: Mutex<Option<TrainError>> = Mutex::new(None);
    let fail = |e: TrainError| {
        let mut slot = first_error.lock().unwrap();
        if slot.is_none() {
            *slot = Some(e);
            // unblock everyone still waiting on a peer
            for ep in &eps {
                ep.close();
            }
        }
    };

    let (workers, servers) = std::thread::scope(|s| {
        let mut wh = Vec::new();
        let mut sh = Vec::new();
        for ep in &eps {
            let ep = ep.clone();
            match ep.id().role {
                Role::Server => sh.push(s.spawn(|| {
                    let rank = ep.id().rank;
                    Server::new(ep, &topo, cfg.mode, cfg.timeout())
                        .run()
                        .map_err(|e| fail(TrainError::Worker { rank, source: Box::new(e.into()) }))
                        .ok()
                })),
                Role::Worker => wh.push(s.spawn(|| {
                    let rank = ep.id().rank;
                    KvStore::new(ep, topo, cfg.mode, kv_options(cfg))
                        .map_err(TrainError::from)
                        .and_then(|kv| run_worker(&kv, cfg, &data))
                        .map_err(|e| fail(TrainError::Worker { rank, source: Box::new(e) }))
                        .ok()
                })),
                Role::Scheduler => {}
            }
        }
        let w: Vec<_> = wh.into_iter().map(|h| h.join().expect("worker thread panicked")).collect();
        let s: Vec<_> = sh.into_iter().map(|h| h.join().expect("server thread panicked")).collect();
        (w, s)
    });
    if let Some(e) = first_error.into_inner().unwrap() {
        return Err(e);
    }
    let workers: Vec<WorkerOutcome> = workers.into_iter().map(Option::unwrap).collect();
    let servers: Vec<ServerReport> = servers.into_iter().map(Option::unwrap).collect();
    Ok(RunOutcome {
        metrics: aggregate(cfg, &workers),
        workers,
        servers,
    })
}

fn require(cfg: &RunConfig, alg: Algorithm, modes: &[StoreMode]) -> Result<(), TrainError> {
    if cfg.algorithm != alg || !modes.contains(&cfg.mode) {
        return Err(TrainError::Config(format!(
            "{} in {} mode does not fit this driver",
            cfg.algorithm.name(),
            cfg.mode
        )));
    }
    Ok(())
}

/// Synchronous SGD in sync, sync-mpi or pure-mpi mode.
pub fn run_sync_sgd(cfg: &RunConfig) -> Result<RunOutcome, TrainError> {
    require(cfg, Algorithm::Sgd, &[StoreMode::Sync, StoreMode::SyncMpi, StoreMode::PureMpi])?;
    train_inproc(cfg)
}

/// Asynchronous SGD with the update applied on the servers.
pub fn run_async_sgd(cfg: &RunConfig) -> Result<RunOutcome, TrainError> {
    require(cfg, Algorithm::Asgd, &[StoreMode::Async, StoreMode::AsyncMpi])?;
    train_inproc(cfg)
}

/// Elastic averaging SGD: local steps, parameter exchange every
/// `cfg.interval` iterations.
pub fn run_elastic_sgd(cfg: &RunConfig) -> Result<RunOutcome, TrainError> {
    require(cfg, Algorithm::Esgd, &[StoreMode::Async, StoreMode::AsyncMpi])?;
    train_inproc(cfg)
}
