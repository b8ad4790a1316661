use std::collections::HashMap;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use super::msg::{peek_key, KvMessage};
use super::{shard_of, KvError, StoreMode};
use crate::collectives::{allreduce, broadcast, lane_broadcast, lane_reduce, Communicator, TensorGroup};
use crate::engine::{DeferredOp, Engine, Tag, Ticket};
use crate::optimizers::OptimizerSpec;
use crate::transport::{tags, Endpoint, LinkStats, NodeId, Role, Topology};

#[derive(Debug, Clone, Copy)]
pub struct KvOptions {
    pub rings: usize,
    pub timeout: Duration,
    pub engine_threads: usize,
}

impl Default for KvOptions {
    fn default() -> Self {
        KvOptions {
            rings: 2,
            timeout: Duration::from_secs(60),
            engine_threads: 2,
        }
    }
}

/// A tensor group registered with a store's engine. Operations that read or
/// write it are ordered by its tag.
#[derive(Clone)]
pub struct Var {
    tag: Tag,
    data: Arc<Mutex<TensorGroup>>,
}

impl Var {
    pub fn tag(&self) -> Tag {
        self.tag
    }

    /// Locks the tensor. Callers should only do this once every scheduled
    /// operation on it has completed.
    pub fn lock(&self) -> MutexGuard<'_, TensorGroup> {
        self.data.lock().unwrap_or_else(|p| p.into_inner())
    }
}

#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StalenessStats {
    pub samples: u64,
    pub sum: u64,
    pub max: u64,
}

impl StalenessStats {
    pub fn mean(&self) -> f64 {
        if self.samples == 0 {
            0.0
        } else {
            self.sum as f64 / self.samples as f64
        }
    }

    pub fn merge(&mut self, o: &StalenessStats) {
        self.samples += o.samples;
        self.sum += o.sum;
        self.max = self.max.max(o.max);
    }

    fn record(&mut self, s: u64) {
        self.samples += 1;
        self.sum += s;
        self.max = self.max.max(s);
    }
}

#[derive(Default)]
struct KeyState {
    len: usize,
    pushes: u32,
    since_pull: u64,
    version: Option<u64>,
}

struct Inner {
    mode: StoreMode,
    me: NodeId,
    topo: Topology,
    endpoint: Arc<Endpoint>,
    group: Option<Communicator>,
    rings: usize,
    timeout: Duration,
    keys: Mutex<HashMap<u32, KeyState>>,
    started: Mutex<bool>,
    staleness: Mutex<StalenessStats>,
}

/// Worker-side handle to the parameter store.
///
/// `push`, `pull` and `pushpull` are scheduled on an internal engine and
/// return immediately. A push reads its tensor; a pull mutates its tensor;
/// both mutate the key so operations on one key run in call order. In the
/// group modes every operation also mutates the communicator, since only one
/// collective may be in flight on it.
pub struct KvStore {
    inner: Arc<Inner>,
    engine: Engine,
    comm_tag: Tag,
    key_tags: Mutex<HashMap<u32, Tag>>,
}

impl KvStore {
    pub fn new(endpoint: Arc<Endpoint>, topo: Topology, mode: StoreMode, opts: KvOptions) -> Result<Self, KvError> {
        let me = endpoint.id();
        if me.role != Role::Worker || me.rank >= topo.workers {
            return Err(KvError::Protocol {
                from: me,
                what: "store clients must be workers of the topology".into(),
            });
        }
        if mode.uses_servers() != (topo.servers > 0) {
            return Err(KvError::BadTopology {
                mode,
                why: "servers must be zero exactly in pure-mpi mode",
            });
        }
        if mode == StoreMode::PureMpi && topo.clients != 1 {
            return Err(KvError::BadTopology {
                mode,
                why: "pure-mpi runs as a single client",
            });
        }
        let group = if mode.uses_groups() {
            Some(Communicator::new(endpoint.clone(), topo.group_of(me.rank), opts.timeout)?)
        } else {
            None
        };
        let engine = Engine::new(opts.engine_threads);
        let comm_tag = engine.new_tag();
        Ok(KvStore {
            inner: Arc::new(Inner {
                mode,
                me,
                topo,
                endpoint,
                group,
                rings: opts.rings,
                timeout: opts.timeout,
                keys: Mutex::new(HashMap::new()),
                started: Mutex::new(false),
                staleness: Mutex::new(StalenessStats::default()),
            }),
            engine,
            comm_tag,
            key_tags: Mutex::new(HashMap::new()),
        })
    }

    pub fn mode(&self) -> StoreMode {
        self.inner.mode
    }

    pub fn id(&self) -> NodeId {
        self.inner.me
    }

    pub fn rank(&self) -> u32 {
        self.inner.me.rank
    }

    /// True for group rank 0, and for every worker in the non-group modes.
    pub fn is_master(&self) -> bool {
        self.inner.is_master()
    }

    pub fn group(&self) -> Option<&Communicator> {
        self.inner.group.as_ref()
    }

    pub fn var(&self, group: TensorGroup) -> Var {
        Var {
            tag: self.engine.new_tag(),
            data: Arc::new(Mutex::new(group)),
        }
    }

    /// Installs `spec` on every server. Only worker 0 sends; the call must
    /// come before this worker's first push.
    pub fn set_optimizer(&self, spec: OptimizerSpec) -> Result<(), KvError> {
        spec.validate()?;
        if *self.inner.started.lock().unwrap() {
            return Err(KvError::TrainingStarted);
        }
        if self.inner.me.rank == 0 && self.inner.mode.uses_servers() {
            let m = KvMessage::SetOptimizer(spec);
            for s in 0..self.inner.topo.servers {
                self.inner.endpoint.send(NodeId::server(s), m.tag(), &m.encode())?;
            }
        }
        Ok(())
    }

    /// Registers `keys` and makes every worker's tensors equal worker 0's.
    /// Blocks until done.
    pub fn init(&self, keys: &[u32], vars: &[Var]) -> Result<(), KvError> {
        if keys.len() != vars.len() {
            return Err(KvError::ShapeMismatch {
                key: keys.first().copied().unwrap_or(0),
                expected: keys.len(),
                got: vars.len(),
            });
        }
        self.wait_all()?;
        {
            let mut known = self.inner.keys.lock().unwrap();
            for (i, k) in keys.iter().enumerate() {
                if known.contains_key(k) || keys[..i].contains(k) {
                    return Err(KvError::DuplicateKey(*k));
                }
            }
            for (k, v) in keys.iter().zip(vars) {
                known.insert(
                    *k,
                    KeyState {
                        len: v.lock().len(),
                        ..KeyState::default()
                    },
                );
            }
        }
        {
            let mut tags = self.key_tags.lock().unwrap();
            for k in keys {
                tags.insert(*k, self.engine.new_tag());
            }
        }
        let inner = &self.inner;
        if inner.mode == StoreMode::PureMpi {
            let comm = inner.group.as_ref().unwrap();
            for v in vars {
                broadcast(comm, 0, &mut v.lock())?;
            }
            return Ok(());
        }
        if inner.me.rank == 0 {
            for (k, v) in keys.iter().zip(vars) {
                let m = KvMessage::Init {
                    key: *k,
                    values: v.lock().lane(0).to_vec(),
                };
                inner.endpoint.send(inner.server_for(*k), m.tag(), &m.encode())?;
            }
        }
        for (k, v) in keys.iter().zip(vars) {
            inner.pull_into(*k, &mut v.lock())?;
        }
        Ok(())
    }

    fn key_tag(&self, key: u32) -> Result<Tag, KvError> {
        self.key_tags
            .lock()
            .unwrap()
            .get(&key)
            .copied()
            .ok_or(KvError::UninitializedKey(key))
    }

    fn schedule(
        &self,
        key: Option<u32>,
        reads: &[Tag],
        mutates: &[Tag],
        body: impl FnOnce(&Inner) -> Result<(), KvError> + Send + 'static,
    ) -> Result<Ticket, KvError> {
        let mut m = mutates.to_vec();
        if let Some(k) = key {
            m.push(self.key_tag(k)?);
        }
        if self.inner.group.is_some() {
            m.push(self.comm_tag);
        }
        let inner = self.inner.clone();
        let op = DeferredOp::new(move || body(&inner).map_err(|e| Box::new(e) as _))
            .reads(reads)
            .mutates(&m);
        Ok(self.engine.push(op)?)
    }

    /// Sends the aggregate of `var` to the key's server. Group modes reduce
    /// across the group first and only the master sends.
    pub fn push(&self, key: u32, var: &Var) -> Result<Ticket, KvError> {
        if self.inner.mode == StoreMode::PureMpi {
            return Err(KvError::Unsupported {
                op: "push",
                mode: self.inner.mode,
            });
        }
        *self.inner.started.lock().unwrap() = true;
        let data = var.data.clone();
        self.schedule(Some(key), &[var.tag], &[], move |inner| {
            let g = data.lock().unwrap().clone();
            inner.push_group(key, g, true)
        })
    }

    /// Sends the master's own lane 0 without reducing across the group.
    /// Used for parameter exchange, where group members hold identical
    /// replicas.
    pub fn push_local(&self, key: u32, var: &Var) -> Result<Ticket, KvError> {
        if self.inner.mode == StoreMode::PureMpi {
            return Err(KvError::Unsupported {
                op: "push",
                mode: self.inner.mode,
            });
        }
        *self.inner.started.lock().unwrap() = true;
        let data = var.data.clone();
        self.schedule(Some(key), &[var.tag], &[], move |inner| {
            let g = data.lock().unwrap().clone();
            inner.push_group(key, g, false)
        })
    }

    /// Overwrites every lane of `var` with the server's value (broadcast
    /// through the group in group modes).
    pub fn pull(&self, key: u32, var: &Var) -> Result<Ticket, KvError> {
        if self.inner.mode == StoreMode::PureMpi {
            return Err(KvError::Unsupported {
                op: "pull",
                mode: self.inner.mode,
            });
        }
        let data = var.data.clone();
        self.schedule(Some(key), &[], &[var.tag], move |inner| {
            let mut g = data.lock().unwrap();
            inner.pull_into(key, &mut g)
        })
    }

    /// Push then pull; in pure-mpi mode a single group allreduce of `src`
    /// into `dst` with no server traffic.
    pub fn pushpull(&self, key: u32, src: &Var, dst: &Var) -> Result<Ticket, KvError> {
        if self.inner.mode != StoreMode::PureMpi {
            self.push(key, src)?;
            return self.pull(key, dst);
        }
        *self.inner.started.lock().unwrap() = true;
        let (s, d) = (src.data.clone(), dst.data.clone());
        let same = Arc::ptr_eq(&s, &d);
        let (reads, mutates) = if same {
            (vec![], vec![dst.tag])
        } else {
            (vec![src.tag], vec![dst.tag])
        };
        self.schedule(Some(key), &reads, &mutates, move |inner| {
            inner.check_len(key, s.lock().unwrap().len())?;
            let mut g = s.lock().unwrap().clone();
            allreduce(inner.group.as_ref().unwrap(), &mut g, inner.rings)?;
            *d.lock().unwrap() = g;
            Ok(())
        })
    }

    /// Sums `var` over the group's workers and lanes, in place. Without a
    /// group this is a local lane reduction.
    pub fn group_allreduce(&self, var: &Var) -> Result<Ticket, KvError> {
        let data = var.data.clone();
        self.schedule(None, &[], &[var.tag], move |inner| {
            let mut g = data.lock().unwrap();
            match &inner.group {
                Some(comm) => {
                    allreduce(comm, &mut g, inner.rings)?;
                }
                None => {
                    let sum = lane_reduce(&g);
                    lane_broadcast(&sum, &mut g)?;
                }
            }
            Ok(())
        })
    }

    pub fn wait_all(&self) -> Result<(), KvError> {
        Ok(self.engine.wait_all()?)
    }

    /// Staleness observed on pulls since the last call.
    pub fn take_staleness(&self) -> StalenessStats {
        std::mem::take(&mut *self.inner.staleness.lock().unwrap())
    }

    /// Traffic this worker sent to and received from servers.
    pub fn server_traffic(&self) -> LinkStats {
        (0..self.inner.topo.servers)
            .map(|s| self.inner.endpoint.link_stats(NodeId::server(s)))
            .fold(LinkStats::default(), |a, b| a + b)
    }

    /// Drains scheduled work and signs off from every server.
    pub fn close(&self) -> Result<(), KvError> {
        self.wait_all()?;
        let inner = &self.inner;
        if !inner.mode.uses_servers() || !inner.is_master() {
            return Ok(());
        }
        for s in 0..inner.topo.servers {
            let m = KvMessage::Shutdown;
            inner.endpoint.send(NodeId::server(s), m.tag(), &m.encode())?;
        }
        for s in 0..inner.topo.servers {
            inner
                .endpoint
                .recv_from(NodeId::server(s), tags::KV_SHUTDOWN_ACK, inner.timeout)?;
        }
        Ok(())
    }
}

impl Inner {
    fn is_master(&self) -> bool {
        self.group.as_ref().is_none_or(|g| g.rank() == 0)
    }

    fn server_for(&self, key: u32) -> NodeId {
        NodeId::server(shard_of(key, self.topo.servers))
    }

    fn masters(&self) -> u64 {
        if self.mode.uses_groups() {
            self.topo.clients as u64
        } else {
            self.topo.workers as u64
        }
    }

    fn check_len(&self, key: u32, got: usize) -> Result<(), KvError> {
        let keys = self.keys.lock().unwrap();
        let st = keys.get(&key).ok_or(KvError::UninitializedKey(key))?;
        if st.len != got {
            return Err(KvError::ShapeMismatch {
                key,
                expected: st.len,
                got,
            });
        }
        Ok(())
    }

    fn push_group(&self, key: u32, mut g: TensorGroup, reduce: bool) -> Result<(), KvError> {
        self.check_len(key, g.len())?;
        let values = match &self.group {
            Some(comm) if reduce => {
                allreduce(comm, &mut g, self.rings)?;
                g.lane(0).to_vec()
            }
            Some(_) => g.lane(0).to_vec(),
            None if reduce => lane_reduce(&g),
            None => g.lane(0).to_vec(),
        };
        let iteration = {
            let mut keys = self.keys.lock().unwrap();
            let st = keys.get_mut(&key).unwrap();
            let it = st.pushes;
            st.pushes += 1;
            st.since_pull += 1;
            it
        };
        if self.is_master() {
            let m = KvMessage::Push { key, iteration, values };
            self.endpoint.send(self.server_for(key), m.tag(), &m.encode())?;
        }
        Ok(())
    }

    fn pull_into(&self, key: u32, g: &mut TensorGroup) -> Result<(), KvError> {
        self.check_len(key, g.len())?;
        if self.is_master() {
            let iteration = self.keys.lock().unwrap()[&key].pushes;
            let server = self.server_for(key);
            let m = KvMessage::Pull { key, iteration };
            self.endpoint.send(server, m.tag(), &m.encode())?;
            let frame = self.endpoint.recv_where(self.timeout, Some(server), |f| {
                f.tag == tags::KV_PULL_RESP && peek_key(&f.payload) == Some(key)
            })?;
            let KvMessage::PullResp { version, values, .. } = KvMessage::decode(frame.tag, &frame.payload)? else {
                unreachable!("filtered on tag");
            };
            if values.len() != g.len() {
                return Err(KvError::ShapeMismatch {
                    key,
                    expected: g.len(),
                    got: values.len(),
                });
            }
            self.observe_version(key, version as u64, server)?;
            lane_broadcast(&values, g)?;
        }
        if let Some(comm) = &self.group {
            broadcast(comm, 0, g)?;
        }
        Ok(())
    }

    /// Records how many foreign updates landed between this worker's last
    /// two pulls of `key`, beyond the ones it is entitled to expect.
    fn observe_version(&self, key: u32, version: u64, server: NodeId) -> Result<(), KvError> {
        let mut keys = self.keys.lock().unwrap();
        let st = keys.get_mut(&key).unwrap();
        if let Some(prev) = st.version {
            let per_push = if self.mode.is_sync() { self.masters() } else { 1 };
            let expected = st.since_pull * per_push;
            let advanced = version.checked_sub(prev).and_then(|d| d.checked_sub(expected));
            match advanced {
                Some(s) => self.staleness.lock().unwrap().record(s),
                None => {
                    return Err(KvError::Protocol {
                        from: server,
                        what: format!("key {key} version went from {prev} to {version} after {expected} expected updates"),
                    })
                }
            }
        }
        st.version = Some(version);
        st.since_pull = 0;
        Ok(())
    }
}
