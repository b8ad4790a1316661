//! Channel-style backend connecting endpoints that live in one process.

use std::collections::{HashMap, HashSet};
use std::sync::{Arc, Mutex};

use super::endpoint::{Backend, Endpoint, EndpointCore};
use super::frame::{NodeId, DEFAULT_MAX_FRAME};
use super::topology::Topology;
use super::TransportError;

pub struct InprocNetwork {
    cores: Mutex<HashMap<NodeId, Arc<EndpointCore>>>,
    max_frame: usize,
}

impl InprocNetwork {
    pub fn new() -> Arc<Self> {
        Self::with_max_frame(DEFAULT_MAX_FRAME)
    }

    pub fn with_max_frame(max_frame: usize) -> Arc<Self> {
        Arc::new(InprocNetwork {
            cores: Mutex::new(HashMap::new()),
            max_frame,
        })
    }

    /// Registers `id` with links to `peers`.
    pub fn endpoint(self: &Arc<Self>, id: NodeId, peers: &[NodeId]) -> Result<Endpoint, TransportError> {
        let mut cores = self.cores.lock().unwrap();
        if cores.contains_key(&id) {
            return Err(TransportError::DuplicateNode(id));
        }
        let core = EndpointCore::new(id, self.max_frame);
        cores.insert(id, core.clone());
        Ok(Endpoint::from_parts(
            core,
            Backend::Inproc {
                net: self.clone(),
                peers: peers.iter().copied().filter(|p| *p != id).collect::<HashSet<_>>(),
            },
        ))
    }

    /// Creates every endpoint of `topo`, linked as the topology prescribes.
    pub fn connect_all(self: &Arc<Self>, topo: &Topology) -> Result<Vec<Endpoint>, TransportError> {
        topo.nodes()
            .into_iter()
            .map(|id| self.endpoint(id, &topo.peers_of(id)))
            .collect()
    }

    pub(crate) fn lookup(&self, id: NodeId) -> Option<Arc<EndpointCore>> {
        self.cores.lock().unwrap().get(&id).cloned()
    }

    pub(crate) fn remove(&self, id: NodeId) {
        self.cores.lock().unwrap().remove(&id);
    }
}
