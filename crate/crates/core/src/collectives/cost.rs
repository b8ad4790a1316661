use std::ops::AddAssign;

/// Instrumented communication and reduction work of a collective call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CostLedger {
    /// Pipeline stages that involve a network transfer.
    pub comm_steps: u64,
    /// Elements this rank put on the wire.
    pub elements_sent_per_rank: u64,
    /// Elements this rank received.
    pub elements_received: u64,
    /// Element additions performed while combining lanes.
    pub lane_reduce_elements: u64,
}

impl AddAssign for CostLedger {
    fn add_assign(&mut self, o: CostLedger) {
        self.comm_steps += o.comm_steps;
        self.elements_sent_per_rank += o.elements_sent_per_rank;
        self.elements_received += o.elements_received;
        self.lane_reduce_elements += o.lane_reduce_elements;
    }
}

/// Modeled time of a bucket allreduce over `p` ranks and `n` units of data:
/// `(p-1)·alpha + 2·(p-1)/p·n·beta + (p-1)/p·n·gamma`.
///
/// `alpha` is per-message latency, `beta` the transfer cost per unit and
/// `gamma` the reduction cost per unit.
pub fn predict_cost(p: usize, n: f64, alpha: f64, beta: f64, gamma: f64) -> f64 {
    if p <= 1 {
        return 0.0;
    }
    let p = p as f64;
    let frac = (p - 1.0) / p;
    (p - 1.0) * alpha + 2.0 * frac * n * beta + frac * n * gamma
}
