use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::msg::KvMessage;
use super::{KvError, StoreMode};
use crate::optimizers::{OptimizerKind, OptimizerSpec};
use crate::transport::{Endpoint, Frame, NodeId, Topology};

struct Entry {
    value: Vec<f64>,
    center: Option<Vec<f64>>,
    version: u64,
    rounds_done: u32,
    pending: BTreeMap<u32, BTreeMap<NodeId, Vec<f64>>>,
    snapshots: HashMap<NodeId, Vec<f64>>,
    pushes: u64,
    pulls: u64,
}

impl Entry {
    fn readable(&self) -> &[f64] {
        self.center.as_deref().unwrap_or(&self.value)
    }
}

/// Final state of one key, as reported when a server shuts down.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyReport {
    pub value: Vec<f64>,
    pub center: Option<Vec<f64>>,
    pub version: u64,
    pub pushes: u64,
    pub pulls: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ServerReport {
    pub keys: BTreeMap<u32, KeyReport>,
    pub messages_in: u64,
    pub bytes_in: u64,
}

/// One parameter server. [`Server::run`] serves requests until every
/// worker that talks to servers has sent `Shutdown`.
///
/// Messages are handled one at a time in arrival order.
pub struct Server {
    endpoint: Arc<Endpoint>,
    mode: StoreMode,
    talkers: usize,
    idle_timeout: Duration,
    spec: OptimizerSpec,
    entries: BTreeMap<u32, Entry>,
    deferred: Vec<(NodeId, u32, u32)>,
    any_push: bool,
    report: ServerReport,
}

impl Server {
    pub fn new(endpoint: Arc<Endpoint>, topo: &Topology, mode: StoreMode, idle_timeout: Duration) -> Self {
        let talkers = if mode.uses_groups() {
            topo.clients as usize
        } else {
            topo.workers as usize
        };
        Server {
            endpoint,
            mode,
            talkers,
            idle_timeout,
            spec: OptimizerSpec::assign(),
            entries: BTreeMap::new(),
            deferred: Vec::new(),
            any_push: false,
            report: ServerReport::default(),
        }
    }

    pub fn run(mut self) -> Result<ServerReport, KvError> {
        let mut shut = 0;
        while shut < self.talkers {
            let frame = self.endpoint.recv(self.idle_timeout)?;
            self.report.messages_in += 1;
            self.report.bytes_in += crate::transport::wire_size(frame.payload.len()) as u64;
            if self.handle(frame)? {
                shut += 1;
            }
        }
        self.report.keys = std::mem::take(&mut self.entries)
            .into_iter()
            .map(|(k, e)| {
                (
                    k,
                    KeyReport {
                        value: e.value,
                        center: e.center,
                        version: e.version,
                        pushes: e.pushes,
                        pulls: e.pulls,
                    },
                )
            })
            .collect();
        Ok(self.report)
    }

    fn protocol(from: NodeId, what: impl Into<String>) -> KvError {
        KvError::Protocol {
            from,
            what: what.into(),
        }
    }

    /// Returns true on `Shutdown`.
    fn handle(&mut self, frame: Frame) -> Result<bool, KvError> {
        let src = frame.src;
        match KvMessage::decode(frame.tag, &frame.payload)? {
            KvMessage::SetOptimizer(spec) => {
                if self.any_push {
                    return Err(KvError::TrainingStarted);
                }
                self.spec = spec;
                for e in self.entries.values_mut() {
                    e.center = (spec.kind == OptimizerKind::Elastic1).then(|| e.value.clone());
                }
            }
            KvMessage::Init { key, values } => {
                if self.entries.contains_key(&key) {
                    return Err(KvError::DuplicateKey(key));
                }
                let center = (self.spec.kind == OptimizerKind::Elastic1).then(|| values.clone());
                self.entries.insert(
                    key,
                    Entry {
                        value: values,
                        center,
                        version: 0,
                        rounds_done: 0,
                        pending: BTreeMap::new(),
                        snapshots: HashMap::new(),
                        pushes: 0,
                        pulls: 0,
                    },
                );
                self.flush_deferred()?;
            }
            KvMessage::Push { key, iteration, values } => {
                self.any_push = true;
                let mode = self.mode;
                let spec = self.spec;
                let talkers = self.talkers;
                let e = self
                    .entries
                    .get_mut(&key)
                    .ok_or(KvError::UninitializedKey(key))?;
                if values.len() != e.value.len() {
                    return Err(KvError::ShapeMismatch {
                        key,
                        expected: e.value.len(),
                        got: values.len(),
                    });
                }
                e.pushes += 1;
                if mode.is_sync() {
                    if iteration < e.rounds_done {
                        return Err(Self::protocol(src, format!("push for finished round {iteration}")));
                    }
                    let round = e.pending.entry(iteration).or_default();
                    if round.insert(src, values).is_some() {
                        return Err(Self::protocol(src, format!("second push in round {iteration}")));
                    }
                    let mut advanced = false;
                    while e.pending.get(&e.rounds_done).is_some_and(|r| r.len() == talkers) {
                        let contribs = e.pending.remove(&e.rounds_done).unwrap();
                        let mut sum = vec![0.0; e.value.len()];
                        for v in contribs.values() {
                            for (s, x) in sum.iter_mut().zip(v) {
                                *s += *x;
                            }
                        }
                        let target = e.center.as_mut().unwrap_or(&mut e.value);
                        spec.apply(target, &sum)?;
                        e.version += contribs.len() as u64;
                        e.rounds_done += 1;
                        advanced = true;
                    }
                    if advanced {
                        self.flush_deferred()?;
                    }
                } else {
                    if let Some(c) = e.center.as_mut() {
                        e.snapshots.insert(src, c.clone());
                        spec.apply(c, &values)?;
                    } else {
                        spec.apply(&mut e.value, &values)?;
                    }
                    e.version += 1;
                }
            }
            KvMessage::Pull { key, iteration } => {
                self.deferred.push((src, key, iteration));
                self.flush_deferred()?;
            }
            KvMessage::Shutdown => {
                self.endpoint.send(src, KvMessage::ShutdownAck.tag(), &KvMessage::ShutdownAck.encode())?;
                return Ok(true);
            }
            other => {
                return Err(Self::protocol(src, format!("unexpected {:?} at server", other.tag())));
            }
        }
        Ok(false)
    }

    /// Answers every queued pull whose key exists and whose round is done.
    fn flush_deferred(&mut self) -> Result<(), KvError> {
        let mut keep = Vec::new();
        for (src, key, iteration) in std::mem::take(&mut self.deferred) {
            let Some(e) = self.entries.get_mut(&key) else {
                keep.push((src, key, iteration));
                continue;
            };
            if self.mode.is_sync() && e.rounds_done < iteration {
                keep.push((src, key, iteration));
                continue;
            }
            let values = match e.snapshots.remove(&src) {
                Some(s) => s,
                None => e.readable().to_vec(),
            };
            e.pulls += 1;
            let resp = KvMessage::PullResp {
                key,
                version: e.version as u32,
                values,
            };
            self.endpoint.send(src, resp.tag(), &resp.encode())?;
        }
        self.deferred = keep;
        Ok(())
    }
}
