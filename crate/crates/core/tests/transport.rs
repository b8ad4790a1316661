mod common;

use std::time::Duration;

use common::{run_script, small_topology};
use hybridps::transport::tcp::{bind_scheduler, connect_all_local, connect_node, rendezvous_scheduler};
use hybridps::transport::{
    wire_size, FrameHeader, InprocNetwork, LinkStats, NodeId, Role, Topology, TransportError,
    DEFAULT_MAX_FRAME, HEADER_LEN,
};

const T: Duration = Duration::from_secs(10);

fn pair() -> (hybridps::transport::Endpoint, hybridps::transport::Endpoint) {
    let net = InprocNetwork::new();
    let (a, b) = (NodeId::worker(0), NodeId::worker(1));
    (net.endpoint(a, &[b]).unwrap(), net.endpoint(b, &[a]).unwrap())
}

#[test]
fn frames_arrive_in_send_order() {
    let (a, b) = pair();
    for i in 0..3u8 {
        a.send(b.id(), 0x40, &[i]).unwrap();
    }
    let got: Vec<u8> = (0..3).map(|_| b.recv(T).unwrap().payload[0]).collect();
    assert_eq!(got, vec![0, 1, 2]);
}

#[test]
fn counters_include_the_header() {
    let (a, b) = pair();
    a.send(b.id(), 0x40, &[0; 100]).unwrap();
    b.recv(T).unwrap();
    let sent = a.link_stats(b.id());
    assert_eq!(sent.bytes_sent, 100 + HEADER_LEN as u64);
    assert_eq!(sent.msgs_sent, 1);
    let got = b.link_stats(a.id());
    assert_eq!(got.bytes_received, wire_size(100) as u64);
    assert_eq!(got.msgs_received, 1);
}

#[test]
fn empty_inbox_times_out() {
    let (_a, b) = pair();
    assert!(matches!(
        b.recv(Duration::from_millis(10)),
        Err(TransportError::Timeout(_))
    ));
}

#[test]
fn closed_peer_is_an_error() {
    let (a, b) = pair();
    b.close();
    assert!(matches!(
        a.send(b.id(), 0x40, &[1]),
        Err(TransportError::ConnectionClosed(_))
    ));
    assert!(matches!(
        a.recv_from(b.id(), 0x40, T),
        Err(TransportError::Disconnected(_))
    ));
    assert!(matches!(b.recv(T), Err(TransportError::EndpointClosed)));
}

#[test]
fn unknown_destination_and_oversize() {
    let net = InprocNetwork::with_max_frame(16);
    let a = net.endpoint(NodeId::worker(0), &[NodeId::worker(1)]).unwrap();
    let _b = net.endpoint(NodeId::worker(1), &[NodeId::worker(0)]).unwrap();
    assert!(matches!(
        a.send(NodeId::server(0), 0x40, &[]),
        Err(TransportError::UnknownDestination(_))
    ));
    assert!(matches!(
        a.send(NodeId::worker(1), 0x40, &[0; 17]),
        Err(TransportError::Oversize { len: 17, max: 16 })
    ));
}

#[test]
fn interleaved_sources_keep_per_source_order() {
    let net = InprocNetwork::new();
    let dst = NodeId::server(0);
    let srcs = [NodeId::worker(0), NodeId::worker(1)];
    let rx = net.endpoint(dst, &srcs).unwrap();
    let txs: Vec<_> = srcs.iter().map(|s| net.endpoint(*s, &[dst]).unwrap()).collect();
    std::thread::scope(|s| {
        for tx in &txs {
            s.spawn(move || {
                for i in 0..500u32 {
                    tx.send(dst, 0x40, &i.to_le_bytes()).unwrap();
                }
            });
        }
    });
    let mut next = [0u32; 2];
    for _ in 0..1000 {
        let f = rx.recv(T).unwrap();
        let k = f.src.rank as usize;
        assert_eq!(u32::from_le_bytes(f.payload[..].try_into().unwrap()), next[k]);
        next[k] += 1;
    }
    assert_eq!(next, [500, 500]);
}

#[test]
fn duplicate_inproc_registration_fails() {
    let net = InprocNetwork::new();
    let _a = net.endpoint(NodeId::worker(0), &[]).unwrap();
    assert!(matches!(
        net.endpoint(NodeId::worker(0), &[]),
        Err(TransportError::DuplicateNode(_))
    ));
}

fn check_registry(eps: &[hybridps::transport::Endpoint], topo: &Topology) {
    for ep in eps {
        let id = ep.id();
        let peers = ep.peers();
        assert_eq!(peers, topo.peers_of(id), "{id}");
        if id.role == Role::Worker {
            let servers = peers.iter().filter(|p| p.role == Role::Server).count();
            let group = peers.iter().filter(|p| p.role == Role::Worker).count();
            assert_eq!(servers as u32, topo.servers);
            assert_eq!(group as u32, topo.workers_per_client() - 1);
            assert!(peers.contains(&NodeId::SCHEDULER));
        }
    }
}

#[test]
fn registry_matches_topology_on_both_backends() {
    let topo = small_topology();
    check_registry(&InprocNetwork::new().connect_all(&topo).unwrap(), &topo);
    check_registry(&connect_all_local(&topo, T).unwrap(), &topo);

    let pure = Topology::new(0, 4, 1).unwrap();
    let eps = connect_all_local(&pure, T).unwrap();
    check_registry(&eps, &pure);
    for ep in eps.iter().filter(|e| e.id().role == Role::Worker) {
        assert!(ep.peers().iter().all(|p| p.role != Role::Server));
    }
}

#[test]
fn tcp_duplicate_worker_rank_is_rejected() {
    let topo = Topology::new(0, 2, 1).unwrap();
    let listener = bind_scheduler("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let sched = std::thread::spawn(move || rendezvous_scheduler(listener, &topo, T));
    let nodes: Vec<_> = (0..2)
        .map(|_| {
            let addr = addr.clone();
            std::thread::spawn(move || connect_node(NodeId::worker(0), &addr, &topo, T))
        })
        .collect();
    assert!(matches!(
        sched.join().unwrap(),
        Err(TransportError::DuplicateNode(_))
    ));
    for n in nodes {
        assert!(n.join().unwrap().is_err());
    }
}

#[test]
fn tcp_rendezvous_times_out_without_peers() {
    let topo = Topology::new(1, 1, 1).unwrap();
    let listener = bind_scheduler("127.0.0.1:0").unwrap();
    let r = rendezvous_scheduler(listener, &topo, Duration::from_millis(200));
    assert!(matches!(r, Err(TransportError::RendezvousTimeout(_))));
}

fn conserved(eps: &[hybridps::transport::Endpoint]) {
    for a in eps {
        for (b, stats) in a.all_link_stats() {
            let back = eps.iter().find(|e| e.id() == b).unwrap().link_stats(a.id());
            assert_eq!(stats.bytes_sent, back.bytes_received, "{} -> {b}", a.id());
            assert_eq!(stats.msgs_sent, back.msgs_received);
        }
    }
    let total = eps
        .iter()
        .flat_map(|e| e.all_link_stats())
        .fold(LinkStats::default(), |acc, (_, s)| acc + s);
    assert_eq!(total.bytes_sent, total.bytes_received);
}

#[test]
fn bytes_are_conserved_after_quiescence() {
    let topo = small_topology();
    let inproc = InprocNetwork::new().connect_all(&topo).unwrap();
    run_script(&inproc, 20);
    conserved(&inproc);
    let tcp = connect_all_local(&topo, T).unwrap();
    run_script(&tcp, 20);
    conserved(&tcp);
}

#[test]
fn backends_carry_identical_bytes() {
    let topo = small_topology();
    let a = run_script(&InprocNetwork::new().connect_all(&topo).unwrap(), 25);
    let b = run_script(&connect_all_local(&topo, T).unwrap(), 25);
    assert_eq!(a, b);
    for node in &a {
        for (src, frames) in node {
            for f in frames {
                let h = FrameHeader::decode(f, DEFAULT_MAX_FRAME).unwrap();
                assert_eq!(h.src, *src);
                assert_eq!(&f[..2], &[0x58, 0x4D]);
                assert_eq!(f[12], 0);
                assert_eq!(f.len(), HEADER_LEN + h.len as usize);
            }
        }
    }
}

#[test]
fn tcp_peer_close_is_observed() {
    let topo = Topology::new(0, 2, 1).unwrap();
    let eps = connect_all_local(&topo, T).unwrap();
    let (w0, w1) = (&eps[1], &eps[2]);
    w1.close();
    assert!(matches!(
        w0.recv_from(w1.id(), 0x40, T),
        Err(TransportError::Disconnected(_))
    ));
}
