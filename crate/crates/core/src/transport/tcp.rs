//! Length-framed TCP backend and scheduler rendezvous.
//!
//! The scheduler listens first. Every server and worker binds its own
//! listener, registers `(role, rank, address)` with the scheduler and waits
//! for the full address book, which the scheduler sends once every expected
//! node has registered. Peers then connect pairwise: for each linked pair the
//! node with the smaller id dials and introduces itself with a `HELLO` frame.

use std::collections::{HashMap, HashSet};
use std::io::{ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use super::endpoint::{Backend, Endpoint, EndpointCore, TcpLink};
use super::frame::{encode_frame, FrameHeader, NodeId, Role, DEFAULT_MAX_FRAME, HEADER_LEN};
use super::tags;
use super::topology::Topology;
use super::TransportError;
use crate::wire::{Reader, WireError};

/// Addresses of every registered node, as broadcast by the scheduler.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AddressBook {
    pub entries: Vec<(NodeId, String)>,
}

impl AddressBook {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (id, addr) in &self.entries {
            out.push(id.role as u8);
            out.extend_from_slice(&id.rank.to_le_bytes());
            put_str(&mut out, addr);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(bytes);
        let count = r.u32()? as usize;
        // each entry needs at least 7 bytes
        if count > r.remaining() / 7 {
            return Err(WireError::Malformed("address book count exceeds payload"));
        }
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let role = Role::from_u8(r.u8()?)?;
            let rank = r.u32()?;
            let addr = get_str(&mut r)?;
            entries.push((NodeId { role, rank }, addr));
        }
        r.finish()?;
        Ok(AddressBook { entries })
    }

    pub fn get(&self, id: NodeId) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| *k == id)
            .map(|(_, a)| a.as_str())
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn get_str(r: &mut Reader<'_>) -> Result<String, WireError> {
    let len = r.u16()? as usize;
    let raw = r.take(len)?;
    String::from_utf8(raw.to_vec()).map_err(|_| WireError::Malformed("address is not utf-8"))
}

/// Decodes the payload of a `REGISTER` frame: the node's listen address.
pub fn decode_register(payload: &[u8]) -> Result<String, WireError> {
    let mut r = Reader::new(payload);
    let s = get_str(&mut r)?;
    r.finish()?;
    Ok(s)
}

fn encode_register(addr: &str) -> Vec<u8> {
    let mut out = Vec::new();
    put_str(&mut out, addr);
    out
}

/// Binds the scheduler's listening socket. Use port 0 for an ephemeral port.
pub fn bind_scheduler(addr: &str) -> Result<TcpListener, TransportError> {
    Ok(TcpListener::bind(addr)?)
}

fn read_raw_frame(stream: &mut TcpStream, max: usize) -> Result<(FrameHeader, Vec<u8>), TransportError> {
    let mut buf = vec![0u8; HEADER_LEN];
    stream.read_exact(&mut buf)?;
    let header = FrameHeader::decode(&buf, max)?;
    buf.resize(HEADER_LEN + header.len as usize, 0);
    stream.read_exact(&mut buf[HEADER_LEN..])?;
    Ok((header, buf))
}

fn write_frame(stream: &mut TcpStream, src: NodeId, tag: u8, payload: &[u8]) -> Result<(), TransportError> {
    stream.write_all(&encode_frame(src, tag, payload))?;
    Ok(())
}

fn accept_until(listener: &TcpListener, deadline: Instant) -> Result<TcpStream, TransportError> {
    listener.set_nonblocking(true)?;
    loop {
        match listener.accept() {
            Ok((s, _)) => {
                s.set_nonblocking(false)?;
                return Ok(s);
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => {
                if Instant::now() >= deadline {
                    return Err(TransportError::RendezvousTimeout(
                        "timed out waiting for inbound connections".into(),
                    ));
                }
                std::thread::sleep(Duration::from_millis(2));
            }
            Err(e) => return Err(e.into()),
        }
    }
}

fn dial_until(addr: &str, deadline: Instant) -> Result<TcpStream, TransportError> {
    loop {
        let attempt = addr
            .to_socket_addrs()
            .map_err(TransportError::from)
            .and_then(|mut a| {
                a.next()
                    .ok_or_else(|| TransportError::Protocol(format!("cannot resolve {addr}")))
            })
            .and_then(|sa| Ok(TcpStream::connect_timeout(&sa, Duration::from_millis(500))?));
        match attempt {
            Ok(s) => return Ok(s),
            Err(e) => {
                if Instant::now() >= deadline {
                    return Err(TransportError::RendezvousTimeout(format!(
                        "could not reach {addr}: {e}"
                    )));
                }
                std::thread::sleep(Duration::from_millis(10));
            }
        }
    }
}

fn prepare(stream: &TcpStream, deadline: Instant) -> Result<(), TransportError> {
    stream.set_nodelay(true)?;
    let left = deadline.saturating_duration_since(Instant::now()).max(Duration::from_millis(1));
    stream.set_read_timeout(Some(left))?;
    Ok(())
}

fn spawn_link(core: &Arc<EndpointCore>, peer: NodeId, stream: TcpStream) -> Result<Arc<TcpLink>, TransportError> {
    stream.set_read_timeout(None)?;
    let mut reader = stream.try_clone()?;
    let alive = Arc::new(AtomicBool::new(true));
    let core = core.clone();
    let alive_r = alive.clone();
    let handle = std::thread::Builder::new()
        .name(format!("rx-{}-{peer}", core.id))
        .spawn(move || {
            while let Ok((_, bytes)) = read_raw_frame(&mut reader, core.max_frame) {
                if let Err(e) = core.deliver_raw(peer, bytes) {
                    log::warn!("{}: dropping link to {peer}: {e}", core.id);
                    break;
                }
            }
            alive_r.store(false, Ordering::SeqCst);
            core.mailbox.mark_dead(peer);
        })?;
    Ok(Arc::new(TcpLink {
        writer: Mutex::new(stream),
        alive,
        reader: Mutex::new(Some(handle)),
    }))
}

/// Runs the scheduler side of rendezvous and returns its endpoint, linked to
/// every server and worker of `topo`.
pub fn rendezvous_scheduler(
    listener: TcpListener,
    topo: &Topology,
    timeout: Duration,
) -> Result<Endpoint, TransportError> {
    let deadline = Instant::now() + timeout;
    let me = NodeId::SCHEDULER;
    let expected: HashSet<NodeId> = topo.nodes().into_iter().skip(1).collect();
    let mut registered: HashMap<NodeId, (TcpStream, String)> = HashMap::new();

    let reject_all = |registered: &mut HashMap<NodeId, (TcpStream, String)>| {
        for (s, _) in registered.values_mut() {
            let _ = write_frame(s, me, tags::REJECT, &[]);
        }
    };

    while registered.len() < expected.len() {
        let mut stream = match accept_until(&listener, deadline) {
            Ok(s) => s,
            Err(e) => {
                reject_all(&mut registered);
                return Err(e);
            }
        };
        prepare(&stream, deadline)?;
        let (header, raw) = read_raw_frame(&mut stream, DEFAULT_MAX_FRAME)?;
        if header.tag != tags::REGISTER {
            return Err(TransportError::Protocol(format!(
                "expected REGISTER, got tag 0x{:02x}",
                header.tag
            )));
        }
        let addr = decode_register(&raw[HEADER_LEN..])?;
        let id = header.src;
        if registered.contains_key(&id) || !expected.contains(&id) {
            let _ = write_frame(&mut stream, me, tags::REJECT, &[]);
            reject_all(&mut registered);
            return Err(if registered.contains_key(&id) {
                TransportError::DuplicateNode(id)
            } else {
                TransportError::Protocol(format!("{id} is not part of this run"))
            });
        }
        registered.insert(id, (stream, addr));
    }

    let mut book = AddressBook {
        entries: registered.iter().map(|(k, (_, a))| (*k, a.clone())).collect(),
    };
    book.entries.sort();
    let payload = book.encode();

    let core = EndpointCore::new(me, DEFAULT_MAX_FRAME);
    let mut links = HashMap::new();
    for (id, (mut stream, _)) in registered {
        write_frame(&mut stream, me, tags::ADDRESS_BOOK, &payload)?;
        links.insert(id, spawn_link(&core, id, stream)?);
    }
    Ok(Endpoint::from_parts(core, Backend::Tcp { links }))
}

/// Registers `id` with the scheduler at `sched_addr`, then links to every
/// peer `topo` prescribes.
pub fn connect_node(
    id: NodeId,
    sched_addr: &str,
    topo: &Topology,
    timeout: Duration,
) -> Result<Endpoint, TransportError> {
    let deadline = Instant::now() + timeout;
    let mut sched = dial_until(sched_addr, deadline)?;
    prepare(&sched, deadline)?;

    let local_ip = sched.local_addr()?.ip();
    let listener = TcpListener::bind(SocketAddr::new(local_ip, 0))?;
    let my_addr = listener.local_addr()?.to_string();

    write_frame(&mut sched, id, tags::REGISTER, &encode_register(&my_addr))?;
    let (header, raw) = read_raw_frame(&mut sched, DEFAULT_MAX_FRAME).map_err(|e| match e {
        TransportError::Io(ref io)
            if matches!(io.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) =>
        {
            TransportError::RendezvousTimeout("no address book from scheduler".into())
        }
        other => other,
    })?;
    match header.tag {
        tags::ADDRESS_BOOK => {}
        tags::REJECT => return Err(TransportError::DuplicateNode(id)),
        t => {
            return Err(TransportError::Protocol(format!(
                "expected ADDRESS_BOOK, got tag 0x{t:02x}"
            )))
        }
    }
    let book = AddressBook::decode(&raw[HEADER_LEN..])?;

    let core = EndpointCore::new(id, DEFAULT_MAX_FRAME);
    let mut links = HashMap::new();
    let peers: Vec<NodeId> = topo
        .peers_of(id)
        .into_iter()
        .filter(|p| p.role != Role::Scheduler)
        .collect();

    for p in peers.iter().filter(|p| id < **p) {
        let addr = book
            .get(*p)
            .ok_or_else(|| TransportError::Protocol(format!("{p} missing from address book")))?;
        let mut s = dial_until(addr, deadline)?;
        prepare(&s, deadline)?;
        write_frame(&mut s, id, tags::HELLO, &[])?;
        links.insert(*p, s);
    }
    let mut inbound: HashSet<NodeId> = peers.iter().copied().filter(|p| *p < id).collect();
    while !inbound.is_empty() {
        let mut s = accept_until(&listener, deadline)?;
        prepare(&s, deadline)?;
        let (header, _) = read_raw_frame(&mut s, DEFAULT_MAX_FRAME)?;
        if header.tag != tags::HELLO || !inbound.remove(&header.src) {
            return Err(TransportError::Protocol(format!(
                "unexpected handshake from {} (tag 0x{:02x})",
                header.src, header.tag
            )));
        }
        links.insert(header.src, s);
    }

    let mut live = HashMap::new();
    live.insert(NodeId::SCHEDULER, spawn_link(&core, NodeId::SCHEDULER, sched)?);
    for (p, s) in links {
        live.insert(p, spawn_link(&core, p, s)?);
    }
    Ok(Endpoint::from_parts(core, Backend::Tcp { links: live }))
}

/// Brings up a whole topology over loopback TCP inside this process, one
/// thread per node. Returned endpoints are ordered as [`Topology::nodes`].
pub fn connect_all_local(topo: &Topology, timeout: Duration) -> Result<Vec<Endpoint>, TransportError> {
    let listener = bind_scheduler("127.0.0.1:0")?;
    let addr = listener.local_addr()?.to_string();
    let topo_s = *topo;
    let sched = std::thread::spawn(move || rendezvous_scheduler(listener, &topo_s, timeout));
    let nodes: Vec<_> = topo
        .nodes()
        .into_iter()
        .skip(1)
        .map(|id| {
            let addr = addr.clone();
            let topo = *topo;
            std::thread::spawn(move || connect_node(id, &addr, &topo, timeout))
        })
        .collect();
    let mut out = vec![sched.join().expect("scheduler thread")?];
    for h in nodes {
        out.push(h.join().expect("node thread")?);
    }
    Ok(out)
}
