use super::frame::NodeId;
use super::TransportError;

/// Which nodes exist in a run and which pairs of them are linked.
///
/// The scheduler links to everyone, every worker links to every server, and
/// workers of the same client group link pairwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Topology {
    pub servers: u32,
    pub workers: u32,
    pub clients: u32,
}

impl Topology {
    pub fn new(servers: u32, workers: u32, clients: u32) -> Result<Self, TransportError> {
        if workers == 0 || clients == 0 {
            return Err(TransportError::InvalidTopology(
                "need at least one worker and one client".into(),
            ));
        }
        if !workers.is_multiple_of(clients) {
            return Err(TransportError::InvalidTopology(format!(
                "{clients} clients do not evenly divide {workers} workers"
            )));
        }
        Ok(Topology {
            servers,
            workers,
            clients,
        })
    }

    pub fn workers_per_client(&self) -> u32 {
        self.workers / self.clients
    }

    pub fn client_of(&self, worker: u32) -> u32 {
        worker / self.workers_per_client()
    }

    /// Members of `worker`'s client group in group-rank order.
    pub fn group_of(&self, worker: u32) -> Vec<NodeId> {
        let wpc = self.workers_per_client();
        let first = self.client_of(worker) * wpc;
        (first..first + wpc).map(NodeId::worker).collect()
    }

    /// Every node of the run: scheduler, then servers, then workers.
    pub fn nodes(&self) -> Vec<NodeId> {
        std::iter::once(NodeId::SCHEDULER)
            .chain((0..self.servers).map(NodeId::server))
            .chain((0..self.workers).map(NodeId::worker))
            .collect()
    }

    pub fn contains(&self, id: NodeId) -> bool {
        use super::frame::Role;
        match id.role {
            Role::Scheduler => id.rank == 0,
            Role::Server => id.rank < self.servers,
            Role::Worker => id.rank < self.workers,
        }
    }

    /// Sorted list of nodes `id` is linked to.
    pub fn peers_of(&self, id: NodeId) -> Vec<NodeId> {
        use super::frame::Role;
        let mut out: Vec<NodeId> = match id.role {
            Role::Scheduler => self.nodes().into_iter().skip(1).collect(),
            Role::Server => std::iter::once(NodeId::SCHEDULER)
                .chain((0..self.workers).map(NodeId::worker))
                .collect(),
            Role::Worker => std::iter::once(NodeId::SCHEDULER)
                .chain((0..self.servers).map(NodeId::server))
                .chain(self.group_of(id.rank).into_iter().filter(|p| *p != id))
                .collect(),
        };
        out.sort();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn workers_hold_server_and_group_links() {
        let t = Topology::new(2, 4, 2).unwrap();
        let peers = t.peers_of(NodeId::worker(2));
        assert_eq!(
            peers,
            vec![
                NodeId::SCHEDULER,
                NodeId::server(0),
                NodeId::server(1),
                NodeId::worker(3)
            ]
        );
    }

    #[test]
    fn pure_collective_run_has_only_group_links() {
        let t = Topology::new(0, 3, 1).unwrap();
        assert_eq!(
            t.peers_of(NodeId::worker(0)),
            vec![NodeId::SCHEDULER, NodeId::worker(1), NodeId::worker(2)]
        );
    }

    #[test]
    fn rejects_indivisible_groups() {
        assert!(Topology::new(1, 5, 2).is_err());
        assert_eq!(Topology::new(2, 12, 2).unwrap().workers_per_client(), 6);
    }
}
