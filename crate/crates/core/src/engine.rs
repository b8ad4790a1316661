//! Dependency-tracking asynchronous executor.
//!
//! Every deferred operation declares the tags it reads and the tags it
//! mutates. An operation starts only after every earlier-enqueued operation
//! it conflicts with has finished, where two operations conflict when they
//! share a tag and at least one of them mutates it. Readers of a tag may run
//! concurrently with each other.
//!
//! ```
//! use hybridps::engine::{DeferredOp, Engine};
//! use std::sync::{Arc, Mutex};
//!
//! let engine = Engine::new(2);
//! let (a, b) = (engine.new_tag(), engine.new_tag());
//! let cell = Arc::new(Mutex::new(0));
//! let c = cell.clone();
//! engine
//!     .push(DeferredOp::new(move || { *c.lock().unwrap() += 1; Ok(()) })
//!         .reads(&[b])
//!         .mutates(&[a]))
//!     .unwrap();
//! engine.wait_all().unwrap();
//! assert_eq!(*cell.lock().unwrap(), 1);
//! ```

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::JoinHandle;

use thiserror::Error;

pub type OpError = Box<dyn std::error::Error + Send + Sync>;
pub type OpResult = Result<(), OpError>;

type Body = Box<dyn FnOnce() -> OpResult + Send>;

/// Identifier of a mutable resource known to one engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Tag(u64);

impl Tag {
    pub fn id(self) -> u64 {
        self.0
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("tag {0} is not registered with this engine")]
    UnknownTag(u64),
    #[error("tag {0} appears in both the read and mutate sets")]
    OverlappingTags(u64),
    #[error("engine has shut down")]
    ShutDown,
    #[error("{failed} operation(s) failed; first failure in op #{seq}: {source}")]
    OpFailed {
        seq: u64,
        failed: usize,
        #[source]
        source: OpError,
    },
    #[error("op #{seq} failed: {message}")]
    TicketFailed { seq: u64, message: String },
}

/// An operation waiting to be scheduled.
pub struct DeferredOp {
    body: Body,
    reads: Vec<Tag>,
    mutates: Vec<Tag>,
}

impl DeferredOp {
    pub fn new(body: impl FnOnce() -> OpResult + Send + 'static) -> Self {
        DeferredOp {
            body: Box::new(body),
            reads: Vec::new(),
            mutates: Vec::new(),
        }
    }

    pub fn reads(mut self, tags: &[Tag]) -> Self {
        self.reads.extend_from_slice(tags);
        self
    }

    pub fn mutates(mut self, tags: &[Tag]) -> Self {
        self.mutates.extend_from_slice(tags);
        self
    }
}

/// Start and end of one executed operation, on the engine's logical clock.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExecRecord {
    pub seq: u64,
    pub start: u64,
    pub end: u64,
}

#[derive(Default)]
struct TicketState {
    done: Mutex<Option<Result<(), String>>>,
    cv: Condvar,
}

/// Completion handle returned by [`Engine::push`].
#[derive(Clone)]
pub struct Ticket {
    seq: u64,
    state: Arc<TicketState>,
}

impl Ticket {
    pub fn seq(&self) -> u64 {
        self.seq
    }

    pub fn is_done(&self) -> bool {
        self.state.done.lock().unwrap().is_some()
    }

    /// Blocks until the operation has run.
    pub fn wait(&self) -> Result<(), EngineError> {
        let mut done = self.state.done.lock().unwrap();
        while done.is_none() {
            done = self.state.cv.wait(done).unwrap();
        }
        match done.as_ref().unwrap() {
            Ok(()) => Ok(()),
            Err(message) => Err(EngineError::TicketFailed {
                seq: self.seq,
                message: message.clone(),
            }),
        }
    }
}

struct Node {
    remaining: usize,
    dependents: Vec<u64>,
    body: Option<Body>,
    ticket: Arc<TicketState>,
}

#[derive(Default)]
struct State {
    next_seq: u64,
    next_tag: u64,
    live_tags: HashSet<u64>,
    last_writer: HashMap<u64, u64>,
    readers: HashMap<u64, Vec<u64>>,
    pending: HashMap<u64, Node>,
    ready: BinaryHeap<Reverse<u64>>,
    errors: Vec<(u64, OpError)>,
    admission: Vec<u64>,
    executions: Vec<ExecRecord>,
    shutdown: bool,
}

struct Shared {
    state: Mutex<State>,
    work: Condvar,
    idle: Condvar,
    clock: AtomicU64,
    record: bool,
}

impl Shared {
    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }
}

/// Fixed-size pool executing [`DeferredOp`]s in dependency order.
pub struct Engine {
    shared: Arc<Shared>,
    threads: Mutex<Vec<JoinHandle<()>>>,
}

impl Default for Engine {
    fn default() -> Self {
        let n = std::thread::available_parallelism().map_or(1, |n| n.get());
        Engine::new(n)
    }
}

impl Engine {
    pub fn new(threads: usize) -> Self {
        Self::build(threads, false)
    }

    /// Like [`Engine::new`] but keeps admission and execution logs.
    pub fn with_logging(threads: usize) -> Self {
        Self::build(threads, true)
    }

    fn build(threads: usize, record: bool) -> Self {
        let shared = Arc::new(Shared {
            state: Mutex::new(State::default()),
            work: Condvar::new(),
            idle: Condvar::new(),
            clock: AtomicU64::new(0),
            record,
        });
        let handles = (0..threads.max(1))
            .map(|i| {
                let shared = shared.clone();
                std::thread::Builder::new()
                    .name(format!("engine-{i}"))
                    .spawn(move || worker_loop(&shared))
                    .expect("spawn engine thread")
            })
            .collect();
        Engine {
            shared,
            threads: Mutex::new(handles),
        }
    }

    /// Registers a fresh resource tag. Tags are never reused.
    pub fn new_tag(&self) -> Tag {
        let mut st = self.shared.lock();
        let id = st.next_tag;
        st.next_tag += 1;
        st.live_tags.insert(id);
        Tag(id)
    }

    /// Retires a tag; later pushes naming it are rejected.
    pub fn release_tag(&self, tag: Tag) {
        let mut st = self.shared.lock();
        st.live_tags.remove(&tag.0);
        st.last_writer.remove(&tag.0);
        st.readers.remove(&tag.0);
    }

    pub fn push(&self, op: DeferredOp) -> Result<Ticket, EngineError> {
        let DeferredOp {
            body,
            mut reads,
            mut mutates,
        } = op;
        reads.sort_unstable();
        reads.dedup();
        mutates.sort_unstable();
        mutates.dedup();

        let mut guard = self.shared.lock();
        let st = &mut *guard;
        if st.shutdown {
            return Err(EngineError::ShutDown);
        }
        for t in reads.iter().chain(&mutates) {
            if !st.live_tags.contains(&t.0) {
                return Err(EngineError::UnknownTag(t.0));
            }
        }
        if let Some(t) = reads.iter().find(|t| mutates.binary_search(t).is_ok()) {
            return Err(EngineError::OverlappingTags(t.0));
        }

        let seq = st.next_seq;
        st.next_seq += 1;

        let mut deps = HashSet::new();
        for t in &reads {
            if let Some(&w) = st.last_writer.get(&t.0) {
                if st.pending.contains_key(&w) {
                    deps.insert(w);
                }
            }
        }
        for t in &mutates {
            if let Some(&w) = st.last_writer.get(&t.0) {
                if st.pending.contains_key(&w) {
                    deps.insert(w);
                }
            }
            if let Some(rs) = st.readers.get(&t.0) {
                deps.extend(rs.iter().copied().filter(|r| st.pending.contains_key(r)));
            }
        }

        for t in &reads {
            let pending = &st.pending;
            let mut list = st.readers.remove(&t.0).unwrap_or_default();
            list.retain(|r| pending.contains_key(r));
            list.push(seq);
            st.readers.insert(t.0, list);
        }
        for t in &mutates {
            st.last_writer.insert(t.0, seq);
            st.readers.remove(&t.0);
        }

        for d in &deps {
            st.pending.get_mut(d).unwrap().dependents.push(seq);
        }
        let ticket = Arc::new(TicketState::default());
        st.pending.insert(
            seq,
            Node {
                remaining: deps.len(),
                dependents: Vec::new(),
                body: Some(body),
                ticket: ticket.clone(),
            },
        );
        if self.shared.record {
            st.admission.push(seq);
        }
        if deps.is_empty() {
            st.ready.push(Reverse(seq));
            self.shared.work.notify_one();
        }
        Ok(Ticket { seq, state: ticket })
    }

    /// Blocks until every pushed operation has completed, then reports the
    /// failures collected since the previous call.
    pub fn wait_all(&self) -> Result<(), EngineError> {
        let mut st = self.shared.lock();
        while !st.pending.is_empty() {
            st = self.shared.idle.wait(st).unwrap_or_else(|p| p.into_inner());
        }
        if st.errors.is_empty() {
            return Ok(());
        }
        let mut errors = std::mem::take(&mut st.errors);
        errors.sort_by_key(|(seq, _)| *seq);
        let failed = errors.len();
        let (seq, source) = errors.swap_remove(0);
        Err(EngineError::OpFailed {
            seq,
            failed,
            source,
        })
    }

    /// Sequence numbers in the order ops were admitted (logging engines only).
    pub fn admission_log(&self) -> Vec<u64> {
        self.shared.lock().admission.clone()
    }

    /// Execution intervals in completion order (logging engines only).
    pub fn execution_log(&self) -> Vec<ExecRecord> {
        self.shared.lock().executions.clone()
    }

    /// Drains outstanding work and stops the pool.
    pub fn shutdown(&self) {
        {
            let mut st = self.shared.lock();
            while !st.pending.is_empty() {
                st = self.shared.idle.wait(st).unwrap_or_else(|p| p.into_inner());
            }
            st.shutdown = true;
        }
        self.shared.work.notify_all();
        for h in self.threads.lock().unwrap().drain(..) {
            let _ = h.join();
        }
    }
}

impl Drop for Engine {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn worker_loop(shared: &Shared) {
    loop {
        let (seq, body) = {
            let mut st = shared.lock();
            loop {
                if let Some(Reverse(seq)) = st.ready.pop() {
                    let body = st.pending.get_mut(&seq).unwrap().body.take().unwrap();
                    break (seq, body);
                }
                if st.shutdown {
                    return;
                }
                st = shared.work.wait(st).unwrap_or_else(|p| p.into_inner());
            }
        };

        let start = shared.clock.fetch_add(1, Ordering::SeqCst);
        let outcome = match catch_unwind(AssertUnwindSafe(body)) {
            Ok(r) => r,
            Err(panic) => {
                let msg = panic
                    .downcast_ref::<&str>()
                    .map(|s| s.to_string())
                    .or_else(|| panic.downcast_ref::<String>().cloned())
                    .unwrap_or_else(|| "panic".into());
                Err(format!("op panicked: {msg}").into())
            }
        };
        let end = shared.clock.fetch_add(1, Ordering::SeqCst);

        let mut st = shared.lock();
        let node = st.pending.remove(&seq).unwrap();
        if shared.record {
            st.executions.push(ExecRecord { seq, start, end });
        }
        let mut woke = 0;
        for d in node.dependents {
            let dep = st.pending.get_mut(&d).unwrap();
            dep.remaining -= 1;
            if dep.remaining == 0 {
                st.ready.push(Reverse(d));
                woke += 1;
            }
        }
        let ticket_result = match outcome {
            Ok(()) => Ok(()),
            Err(e) => {
                let msg = e.to_string();
                st.errors.push((seq, e));
                Err(msg)
            }
        };
        let now_idle = st.pending.is_empty();
        drop(st);

        *node.ticket.done.lock().unwrap() = Some(ticket_result);
        node.ticket.cv.notify_all();
        for _ in 0..woke {
            shared.work.notify_one();
        }
        if now_idle {
            shared.idle.notify_all();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Duration;

    fn log_op(log: &Arc<Mutex<Vec<u32>>>, id: u32) -> DeferredOp {
        let log = log.clone();
        DeferredOp::new(move || {
            log.lock().unwrap().push(id);
            Ok(())
        })
    }

    #[test]
    fn wait_all_on_empty_engine_returns() {
        Engine::new(2).wait_all().unwrap();
    }

    #[test]
    fn shared_mutate_tag_serializes_in_enqueue_order() {
        let engine = Engine::new(4);
        let t = engine.new_tag();
        let log = Arc::new(Mutex::new(Vec::new()));
        for i in 0..100 {
            engine.push(log_op(&log, i).mutates(&[t])).unwrap();
        }
        engine.wait_all().unwrap();
        assert_eq!(*log.lock().unwrap(), (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn reader_waits_for_writer() {
        let engine = Engine::with_logging(4);
        let t = engine.new_tag();
        let a = engine
            .push(
                DeferredOp::new(|| {
                    std::thread::sleep(Duration::from_millis(20));
                    Ok(())
                })
                .mutates(&[t]),
            )
            .unwrap();
        let b = engine.push(DeferredOp::new(|| Ok(())).reads(&[t])).unwrap();
        engine.wait_all().unwrap();
        let log = engine.execution_log();
        let ra = log.iter().find(|r| r.seq == a.seq()).unwrap();
        let rb = log.iter().find(|r| r.seq == b.seq()).unwrap();
        assert!(rb.start > ra.end);
    }

    #[test]
    fn rejects_unknown_and_overlapping_tags() {
        let engine = Engine::new(1);
        let t = engine.new_tag();
        engine.release_tag(t);
        assert!(matches!(
            engine.push(DeferredOp::new(|| Ok(())).reads(&[t])),
            Err(EngineError::UnknownTag(_))
        ));
        let u = engine.new_tag();
        assert_ne!(u, t);
        assert!(matches!(
            engine.push(DeferredOp::new(|| Ok(())).reads(&[u]).mutates(&[u])),
            Err(EngineError::OverlappingTags(_))
        ));
    }

    #[test]
    fn push_after_shutdown_is_rejected() {
        let engine = Engine::new(1);
        engine.shutdown();
        assert!(matches!(
            engine.push(DeferredOp::new(|| Ok(()))),
            Err(EngineError::ShutDown)
        ));
    }

    #[test]
    fn errors_surface_at_wait_all_without_cancelling_others() {
        let engine = Engine::new(2);
        let t = engine.new_tag();
        let log = Arc::new(Mutex::new(Vec::new()));
        engine.push(log_op(&log, 0).mutates(&[t])).unwrap();
        let bad = engine
            .push(DeferredOp::new(|| Err("boom".into())).mutates(&[t]))
            .unwrap();
        engine.push(log_op(&log, 2).mutates(&[t])).unwrap();
        engine
            .push(DeferredOp::new(|| panic!("kaboom")).mutates(&[t]))
            .unwrap();
        let err = engine.wait_all().unwrap_err();
        match err {
            EngineError::OpFailed { seq, failed, source } => {
                assert_eq!(seq, bad.seq());
                assert_eq!(failed, 2);
                assert_eq!(source.to_string(), "boom");
            }
            other => panic!("unexpected {other}"),
        }
        assert!(bad.wait().is_err());
        assert_eq!(*log.lock().unwrap(), vec![0, 2]);
        engine.wait_all().unwrap();
    }

    #[test]
    fn single_thread_replays_enqueue_order() {
        let engine = Engine::with_logging(1);
        let t = engine.new_tag();
        for _ in 0..50 {
            engine.push(DeferredOp::new(|| Ok(())).mutates(&[t])).unwrap();
        }
        engine.wait_all().unwrap();
        let seqs: Vec<u64> = engine.execution_log().iter().map(|r| r.seq).collect();
        assert_eq!(seqs, (0..50).collect::<Vec<_>>());
        assert_eq!(engine.admission_log(), (0..50).collect::<Vec<_>>());
    }
}
