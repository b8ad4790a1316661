use std::collections::{HashMap, HashSet, VecDeque};
use std::io::Write;
use std::net::{Shutdown, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use super::frame::{decode_frame, encode_frame, Frame, NodeId, HEADER_LEN};
use super::inproc::InprocNetwork;
use super::TransportError;

/// Per-peer traffic counters. All fields only ever increase.
#[derive(Debug, Default)]
pub struct LinkCounters {
    bytes_sent: AtomicU64,
    bytes_received: AtomicU64,
    msgs_sent: AtomicU64,
    msgs_received: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LinkStats {
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub msgs_sent: u64,
    pub msgs_received: u64,
}

impl LinkStats {
    pub fn saturating_sub(self, earlier: LinkStats) -> LinkStats {
        LinkStats {
            bytes_sent: self.bytes_sent.saturating_sub(earlier.bytes_sent),
            bytes_received: self.bytes_received.saturating_sub(earlier.bytes_received),
            msgs_sent: self.msgs_sent.saturating_sub(earlier.msgs_sent),
            msgs_received: self.msgs_received.saturating_sub(earlier.msgs_received),
        }
    }
}

impl std::ops::Add for LinkStats {
    type Output = LinkStats;

    fn add(self, o: LinkStats) -> LinkStats {
        LinkStats {
            bytes_sent: self.bytes_sent + o.bytes_sent,
            bytes_received: self.bytes_received + o.bytes_received,
            msgs_sent: self.msgs_sent + o.msgs_sent,
            msgs_received: self.msgs_received + o.msgs_received,
        }
    }
}

impl LinkCounters {
    fn snapshot(&self) -> LinkStats {
        LinkStats {
            bytes_sent: self.bytes_sent.load(Ordering::SeqCst),
            bytes_received: self.bytes_received.load(Ordering::SeqCst),
            msgs_sent: self.msgs_sent.load(Ordering::SeqCst),
            msgs_received: self.msgs_received.load(Ordering::SeqCst),
        }
    }
}

#[derive(Default)]
struct MailboxState {
    frames: VecDeque<Frame>,
    closed: bool,
    dead: HashSet<NodeId>,
}

/// The single logical receive queue of a node.
#[derive(Default)]
pub(crate) struct Mailbox {
    state: Mutex<MailboxState>,
    cv: Condvar,
}

impl Mailbox {
    fn push(&self, frame: Frame) -> Result<(), TransportError> {
        let mut st = self.state.lock().unwrap();
        if st.closed {
            return Err(TransportError::ConnectionClosed(frame.dest));
        }
        st.frames.push_back(frame);
        drop(st);
        self.cv.notify_all();
        Ok(())
    }

    pub(crate) fn mark_dead(&self, peer: NodeId) {
        self.state.lock().unwrap().dead.insert(peer);
        self.cv.notify_all();
    }

    fn close(&self) {
        self.state.lock().unwrap().closed = true;
        self.cv.notify_all();
    }

    fn is_closed(&self) -> bool {
        self.state.lock().unwrap().closed
    }

    fn take_where(
        &self,
        timeout: Duration,
        src: Option<NodeId>,
        pred: &dyn Fn(&Frame) -> bool,
    ) -> Result<Frame, TransportError> {
        let deadline = Instant::now() + timeout;
        let mut st = self.state.lock().unwrap();
        loop {
            let hit = st
                .frames
                .iter()
                .position(|f| src.is_none_or(|s| f.src == s) && pred(f));
            if let Some(i) = hit {
                return Ok(st.frames.remove(i).unwrap());
            }
            if st.closed {
                return Err(TransportError::EndpointClosed);
            }
            if let Some(s) = src {
                if st.dead.contains(&s) {
                    return Err(TransportError::Disconnected(s));
                }
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(TransportError::Timeout(timeout));
            }
            st = self.cv.wait_timeout(st, deadline - now).unwrap().0;
        }
    }
}

/// Raw inbound frames, keyed by the link they arrived on.
type Tap = Vec<(NodeId, Vec<u8>)>;

/// State shared between an endpoint and whoever delivers frames into it.
pub(crate) struct EndpointCore {
    pub(crate) id: NodeId,
    pub(crate) mailbox: Mailbox,
    counters: Mutex<HashMap<NodeId, Arc<LinkCounters>>>,
    tap: Mutex<Option<Tap>>,
    pub(crate) max_frame: usize,
}

impl EndpointCore {
    pub(crate) fn new(id: NodeId, max_frame: usize) -> Arc<Self> {
        Arc::new(EndpointCore {
            id,
            mailbox: Mailbox::default(),
            counters: Mutex::new(HashMap::new()),
            tap: Mutex::new(None),
            max_frame,
        })
    }

    fn counters(&self, peer: NodeId) -> Arc<LinkCounters> {
        self.counters
            .lock()
            .unwrap()
            .entry(peer)
            .or_default()
            .clone()
    }

    /// Accepts one raw encoded frame that arrived over the link to `peer`.
    pub(crate) fn deliver_raw(&self, peer: NodeId, bytes: Vec<u8>) -> Result<(), TransportError> {
        let (frame, used) = decode_frame(&bytes, self.id, self.max_frame)?;
        if used != bytes.len() {
            return Err(crate::wire::WireError::Trailing(bytes.len() - used).into());
        }
        if frame.src != peer {
            return Err(TransportError::Protocol(format!(
                "frame from {} arrived on the link to {peer}",
                frame.src
            )));
        }
        if let Some(tap) = self.tap.lock().unwrap().as_mut() {
            tap.push((peer, bytes.clone()));
        }
        let c = self.counters(peer);
        self.mailbox.push(frame)?;
        c.bytes_received.fetch_add(bytes.len() as u64, Ordering::SeqCst);
        c.msgs_received.fetch_add(1, Ordering::SeqCst);
        Ok(())
    }
}

pub(crate) struct TcpLink {
    pub(crate) writer: Mutex<TcpStream>,
    pub(crate) alive: Arc<AtomicBool>,
    pub(crate) reader: Mutex<Option<JoinHandle<()>>>,
}

pub(crate) enum Backend {
    Inproc {
        net: Arc<InprocNetwork>,
        peers: HashSet<NodeId>,
    },
    Tcp {
        links: HashMap<NodeId, Arc<TcpLink>>,
    },
}

/// One node's view of the network: a receive queue plus outbound links.
///
/// Delivery is exactly-once and FIFO per (source, destination) pair.
pub struct Endpoint {
    core: Arc<EndpointCore>,
    backend: Backend,
    closed: AtomicBool,
}

impl Endpoint {
    pub(crate) fn from_parts(core: Arc<EndpointCore>, backend: Backend) -> Self {
        Endpoint {
            core,
            backend,
            closed: AtomicBool::new(false),
        }
    }

    pub fn id(&self) -> NodeId {
        self.core.id
    }

    pub fn max_frame(&self) -> usize {
        self.core.max_frame
    }

    /// Peers this endpoint holds a link to, sorted.
    pub fn peers(&self) -> Vec<NodeId> {
        let mut out: Vec<NodeId> = match &self.backend {
            Backend::Inproc { peers, .. } => peers.iter().copied().collect(),
            Backend::Tcp { links } => links.keys().copied().collect(),
        };
        out.sort();
        out
    }

    pub fn send(&self, dst: NodeId, tag: u8, payload: &[u8]) -> Result<(), TransportError> {
        if self.closed.load(Ordering::SeqCst) {
            return Err(TransportError::EndpointClosed);
        }
        if payload.len() > self.core.max_frame {
            return Err(TransportError::Oversize {
                len: payload.len(),
                max: self.core.max_frame,
            });
        }
        let bytes = encode_frame(self.core.id, tag, payload);
        let n = bytes.len() as u64;
        match &self.backend {
            Backend::Inproc { net, peers } => {
                if !peers.contains(&dst) {
                    return Err(TransportError::UnknownDestination(dst));
                }
                let target = net
                    .lookup(dst)
                    .ok_or(TransportError::ConnectionClosed(dst))?;
                target.deliver_raw(self.core.id, bytes)?;
            }
            Backend::Tcp { links } => {
                let link = links
                    .get(&dst)
                    .ok_or(TransportError::UnknownDestination(dst))?;
                if !link.alive.load(Ordering::SeqCst) {
                    return Err(TransportError::ConnectionClosed(dst));
                }
                let mut w = link.writer.lock().unwrap();
                if w.write_all(&bytes).is_err() {
                    link.alive.store(false, Ordering::SeqCst);
                    return Err(TransportError::ConnectionClosed(dst));
                }
            }
        }
        let c = self.core.counters(dst);
        c.bytes_sent.fetch_add(n, Ordering::SeqCst);
        c.msgs_sent.fetch_add(1, Ordering::SeqCst);
        Ok(())
    }

    /// Next frame from any source.
    pub fn recv(&self, timeout: Duration) -> Result<Frame, TransportError> {
        self.core.mailbox.take_where(timeout, None, &|_| true)
    }

    /// Next frame from `src` carrying `tag`; other frames stay queued.
    pub fn recv_from(&self, src: NodeId, tag: u8, timeout: Duration) -> Result<Frame, TransportError> {
        self.core
            .mailbox
            .take_where(timeout, Some(src), &|f| f.tag == tag)
    }

    /// Earliest queued frame (optionally from `src`) accepted by `pred`.
    pub fn recv_where(
        &self,
        timeout: Duration,
        src: Option<NodeId>,
        pred: impl Fn(&Frame) -> bool,
    ) -> Result<Frame, TransportError> {
        self.core.mailbox.take_where(timeout, src, &pred)
    }

    pub fn link_stats(&self, peer: NodeId) -> LinkStats {
        self.core
            .counters
            .lock()
            .unwrap()
            .get(&peer)
            .map(|c| c.snapshot())
            .unwrap_or_default()
    }

    /// Counters for every peer that has exchanged traffic with this node.
    pub fn all_link_stats(&self) -> Vec<(NodeId, LinkStats)> {
        let mut out: Vec<_> = self
            .core
            .counters
            .lock()
            .unwrap()
            .iter()
            .map(|(k, v)| (*k, v.snapshot()))
            .collect();
        out.sort_by_key(|(k, _)| *k);
        out
    }

    /// Starts recording the raw bytes of every inbound frame.
    pub fn enable_tap(&self) {
        *self.core.tap.lock().unwrap() = Some(Vec::new());
    }

    pub fn take_tap(&self) -> Vec<(NodeId, Vec<u8>)> {
        self.core
            .tap
            .lock()
            .unwrap()
            .as_mut()
            .map(std::mem::take)
            .unwrap_or_default()
    }

    pub fn is_closed(&self) -> bool {
        self.closed.load(Ordering::SeqCst) || self.core.mailbox.is_closed()
    }

    /// Closes the endpoint. Peers observe the disconnect on their next
    /// receive from this node.
    pub fn close(&self) {
        if self.closed.swap(true, Ordering::SeqCst) {
            return;
        }
        self.core.mailbox.close();
        match &self.backend {
            Backend::Inproc { net, peers } => {
                net.remove(self.core.id);
                for p in peers {
                    if let Some(peer) = net.lookup(*p) {
                        peer.mailbox.mark_dead(self.core.id);
                    }
                }
            }
            Backend::Tcp { links } => {
                for link in links.values() {
                    link.alive.store(false, Ordering::SeqCst);
                    let _ = link.writer.lock().unwrap().shutdown(Shutdown::Both);
                }
                for link in links.values() {
                    if let Some(h) = link.reader.lock().unwrap().take() {
                        let _ = h.join();
                    }
                }
            }
        }
    }
}

impl Drop for Endpoint {
    fn drop(&mut self) {
        self.close();
    }
}

/// Bytes a frame with `payload_len` payload bytes occupies on the wire.
pub const fn wire_size(payload_len: usize) -> usize {
    HEADER_LEN + payload_len
}
