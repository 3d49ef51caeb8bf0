//! Emulated packet network.
//!
//! Nodes are named endpoints joined by bidirectional links. Each link
//! direction is a FIFO: packets are serialized against an optional
//! bandwidth cap (token-bucket style), then delayed by propagation plus
//! seeded uniform jitter, with optional Bernoulli loss. Connections are
//! message-oriented — every `send` crosses the wire as one packet, which is
//! exactly the unit passive taps record and active marks delay.
//!
//! Handshakes are modelled: `connect` costs one round trip (SYN/ACK) and
//! `close` sends a FIN, so taps see realistic control chatter.

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use super::pipe::{Mailbox, RecvOutcome};
use super::rng::child_rng;
use super::{Sim, VirtualTime, SECOND};

const SYN_SIZE: u32 = 40;
const ACK_SIZE: u32 = 40;
const FIN_SIZE: u32 = 40;

/// Shaping parameters for one link (applied to both directions).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkParams {
    pub delay_us: u64,
    pub jitter_us: u64,
    /// `None` means uncapped.
    pub bandwidth_kbps: Option<u64>,
    /// Bernoulli drop probability in `[0, 1)`.
    pub loss_rate: f64,
}

impl LinkParams {
    pub fn delay_ms(delay_ms: u64) -> Self {
        LinkParams {
            delay_us: delay_ms * 1_000,
            jitter_us: 0,
            bandwidth_kbps: None,
            loss_rate: 0.0,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NetError {
    #[error("no link between {0} and {1}")]
    NoRoute(String, String),
    #[error("connection refused by {0}:{1}")]
    Refused(String, u16),
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("connection closed")]
    Closed,
}

/// Direction of a packet relative to a tap's position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrafficDir {
    In,
    Out,
}

/// One packet observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TapRecord {
    pub ts_us: VirtualTime,
    pub size: u32,
    pub dir: TrafficDir,
    pub conn: u64,
}

/// Active temporal mark: packets whose send time falls in a `true` slot are
/// held back by `delay_us` before entering the link.
#[derive(Debug, Clone)]
pub struct MarkSpec {
    pub slots: Vec<bool>,
    pub slot_us: u64,
    pub delay_us: u64,
    pub epoch_us: VirtualTime,
}

impl MarkSpec {
    fn delay_for(&self, ts: VirtualTime) -> u64 {
        if self.slots.is_empty() {
            return 0;
        }
        let period = self.slot_us * self.slots.len() as u64;
        let offset = ts.saturating_sub(self.epoch_us) % period;
        let slot = (offset / self.slot_us) as usize;
        if self.slots[slot] {
            self.delay_us
        } else {
            0
        }
    }
}

struct TapState {
    records: RefCell<Vec<TapRecord>>,
    conn_filter: Option<u64>,
}

impl TapState {
    fn record(&self, ts: VirtualTime, size: u32, dir: TrafficDir, conn: u64) {
        if let Some(want) = self.conn_filter {
            if want != conn {
                return;
            }
        }
        self.records.borrow_mut().push(TapRecord {
            ts_us: ts,
            size,
            dir,
            conn,
        });
    }
}

/// Handle to a passive capture point. Clone to share.
#[derive(Clone)]
pub struct Tap {
    state: Rc<TapState>,
}

impl Tap {
    pub fn snapshot(&self) -> Vec<TapRecord> {
        self.state.records.borrow().clone()
    }

    pub fn clear(&self) {
        self.state.records.borrow_mut().clear();
    }
}

#[derive(Debug, Default)]
struct DirStats {
    sent: Cell<u64>,
    delivered: Cell<u64>,
    dropped: Cell<u64>,
}

enum Delivery {
    Data {
        inbound: Mailbox<Vec<u8>>,
        bytes: Vec<u8>,
    },
    Open {
        port: u16,
        to: String,
        server_end: ConnEnd,
        ack: Mailbox<bool>,
    },
    Ack {
        ack: Mailbox<bool>,
        accepted: bool,
    },
    Fin {
        inbound: Mailbox<Vec<u8>>,
    },
}

struct DirState {
    params: LinkParams,
    busy_until: Cell<VirtualTime>,
    last_arrival: Cell<VirtualTime>,
    rng: RefCell<ChaCha12Rng>,
    src_taps: RefCell<Vec<Rc<TapState>>>,
    dst_taps: RefCell<Vec<Rc<TapState>>>,
    mark: RefCell<Option<MarkSpec>>,
    stats: DirStats,
    queue: Mailbox<(VirtualTime, u64, u32, Delivery)>,
}

struct LinkState {
    a: String,
    a2b: Rc<DirState>,
    b2a: Rc<DirState>,
}

impl LinkState {
    fn dir_from(&self, node: &str) -> Rc<DirState> {
        if node == self.a {
            Rc::clone(&self.a2b)
        } else {
            Rc::clone(&self.b2a)
        }
    }
}

struct NodeEntry {
    listeners: BTreeMap<u16, Mailbox<ConnEnd>>,
}

struct NetInner {
    sim: Sim,
    master_seed: u64,
    nodes: RefCell<BTreeMap<String, NodeEntry>>,
    links: RefCell<BTreeMap<(String, String), Rc<LinkState>>>,
    next_conn: Cell<u64>,
}

/// The emulated network. Cheap to clone.
#[derive(Clone)]
pub struct Network {
    inner: Rc<NetInner>,
}

fn link_key(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

impl Network {
    pub fn new(sim: &Sim, master_seed: u64) -> Self {
        Network {
            inner: Rc::new(NetInner {
                sim: sim.clone(),
                master_seed,
                nodes: RefCell::new(BTreeMap::new()),
                links: RefCell::new(BTreeMap::new()),
                next_conn: Cell::new(1),
            }),
        }
    }

    pub fn sim(&self) -> &Sim {
        &self.inner.sim
    }

    pub fn add_node(&self, name: &str) {
        self.inner.nodes.borrow_mut().entry(name.to_string()).or_insert(NodeEntry {
            listeners: BTreeMap::new(),
        });
    }

    pub fn has_node(&self, name: &str) -> bool {
        self.inner.nodes.borrow().contains_key(name)
    }

    /// Create a bidirectional link; both nodes must exist.
    pub fn add_link(&self, a: &str, b: &str, params: LinkParams) {
        assert!(self.has_node(a), "unknown node {a}");
        assert!(self.has_node(b), "unknown node {b}");
        let key = link_key(a, b);
        let mk_dir = |from: &str, to: &str| {
            let label = format!("link:{from}->{to}");
            let dir = Rc::new(DirState {
                rng: RefCell::new(child_rng(self.inner.master_seed, &label)),
                params,
                busy_until: Cell::new(0),
                last_arrival: Cell::new(0),
                src_taps: RefCell::new(Vec::new()),
                dst_taps: RefCell::new(Vec::new()),
                mark: RefCell::new(None),
                stats: DirStats::default(),
                queue: Mailbox::new(),
            });
            self.spawn_delivery_task(Rc::clone(&dir));
            dir
        };
        let link = Rc::new(LinkState {
            a: key.0.clone(),
            a2b: mk_dir(&key.0, &key.1),
            b2a: mk_dir(&key.1, &key.0),
        });
        self.inner.links.borrow_mut().insert(key, link);
    }

    fn link(&self, a: &str, b: &str) -> Option<Rc<LinkState>> {
        self.inner.links.borrow().get(&link_key(a, b)).cloned()
    }

    fn spawn_delivery_task(&self, dir: Rc<DirState>) {
        let sim = self.inner.sim.clone();
        let net = self.clone();
        self.inner.sim.spawn(async move {
            loop {
                let Some((arrival, conn, size, delivery)) = dir.queue.recv().await else {
                    return;
                };
                sim.sleep_until(arrival).await;
                dir.stats.delivered.set(dir.stats.delivered.get() + 1);
                for tap in dir.dst_taps.borrow().iter() {
                    tap.record(arrival, size, TrafficDir::In, conn);
                }
                match delivery {
                    Delivery::Data { inbound, bytes } => {
                        inbound.send(bytes);
                    }
                    Delivery::Fin { inbound } => {
                        inbound.close();
                    }
                    Delivery::Ack { ack, accepted } => {
                        ack.send(accepted);
                    }
                    Delivery::Open {
                        port,
                        to,
                        server_end,
                        ack,
                    } => {
                        let accepted = {
                            let nodes = net.inner.nodes.borrow();
                            nodes
                                .get(&to)
                                .and_then(|n| n.listeners.get(&port).cloned())
                        };
                        match accepted {
                            Some(accepts) => {
                                // ACK first so FIFO ordering puts the ACK ahead
                                // of any data the server sends after accept().
                                server_end.transmit(ACK_SIZE, Delivery::Ack { ack, accepted: true });
                                accepts.send(server_end);
                            }
                            None => {
                                server_end.transmit(ACK_SIZE, Delivery::Ack { ack, accepted: false });
                            }
                        }
                    }
                }
            }
        });
    }

    /// Listen on `(node, port)`; connections arrive on the returned handle.
    pub fn listen(&self, node: &str, port: u16) -> Listener {
        let mut nodes = self.inner.nodes.borrow_mut();
        let entry = nodes.get_mut(node).expect("unknown node");
        let accepts = Mailbox::new();
        entry.listeners.insert(port, accepts.clone());
        Listener { accepts }
    }

    /// Dial `(to, port)` from `from`. Costs one round trip unless loopback.
    pub async fn connect(&self, from: &str, to: &str, port: u16) -> Result<ConnEnd, NetError> {
        if !self.has_node(from) {
            return Err(NetError::UnknownNode(from.to_string()));
        }
        if !self.has_node(to) {
            return Err(NetError::UnknownNode(to.to_string()));
        }
        let conn_id = self.inner.next_conn.get();
        self.inner.next_conn.set(conn_id + 1);

        if from == to {
            let (client, server) = self.conn_pair_loopback(conn_id, from);
            let accepts = {
                let nodes = self.inner.nodes.borrow();
                nodes.get(to).and_then(|n| n.listeners.get(&port).cloned())
            };
            let Some(accepts) = accepts else {
                return Err(NetError::Refused(to.to_string(), port));
            };
            accepts.send(server);
            return Ok(client);
        }

        let Some(link) = self.link(from, to) else {
            return Err(NetError::NoRoute(from.to_string(), to.to_string()));
        };
        let (client, server) = self.conn_pair_linked(conn_id, from, to, &link);
        let ack: Mailbox<bool> = Mailbox::new();
        client.transmit(
            SYN_SIZE,
            Delivery::Open {
                port,
                to: to.to_string(),
                server_end: server,
                ack: ack.clone(),
            },
        );
        match ack.recv().await {
            Some(true) => Ok(client),
            _ => Err(NetError::Refused(to.to_string(), port)),
        }
    }

    fn conn_pair_loopback(&self, conn_id: u64, node: &str) -> (ConnEnd, ConnEnd) {
        let ma = Mailbox::new();
        let mb = Mailbox::new();
        let mk = |local: &str, inbound: &Mailbox<Vec<u8>>, peer: &Mailbox<Vec<u8>>| ConnEnd {
            sim: self.inner.sim.clone(),
            conn_id,
            local: local.to_string(),
            peer_node: local.to_string(),
            path: None,
            inbound: inbound.clone(),
            peer_inbound: peer.clone(),
            closed: Rc::new(Cell::new(false)),
        };
        (mk(node, &ma, &mb), mk(node, &mb, &ma))
    }

    fn conn_pair_linked(
        &self,
        conn_id: u64,
        from: &str,
        to: &str,
        link: &Rc<LinkState>,
    ) -> (ConnEnd, ConnEnd) {
        let ma = Mailbox::new();
        let mb = Mailbox::new();
        let client = ConnEnd {
            sim: self.inner.sim.clone(),
            conn_id,
            local: from.to_string(),
            peer_node: to.to_string(),
            path: Some(link.dir_from(from)),
            inbound: ma.clone(),
            peer_inbound: mb.clone(),
            closed: Rc::new(Cell::new(false)),
        };
        let server = ConnEnd {
            sim: self.inner.sim.clone(),
            conn_id,
            local: to.to_string(),
            peer_node: from.to_string(),
            path: Some(link.dir_from(to)),
            inbound: mb,
            peer_inbound: ma,
            closed: Rc::new(Cell::new(false)),
        };
        (client, server)
    }

    /// Passive capture at `at`'s end of the `at`<->`other` link. `Out`
    /// records carry send timestamps, `In` records delivery timestamps.
    pub fn tap(&self, at: &str, other: &str, conn_filter: Option<u64>) -> Tap {
        let link = self.link(at, other).expect("tap on missing link");
        let state = Rc::new(TapState {
            records: RefCell::new(Vec::new()),
            conn_filter,
        });
        link.dir_from(at).src_taps.borrow_mut().push(Rc::clone(&state));
        link.dir_from(other).dst_taps.borrow_mut().push(Rc::clone(&state));
        Tap { state }
    }

    /// Install (or clear) an active temporal mark on packets leaving `at`
    /// toward `other`.
    pub fn set_mark(&self, at: &str, other: &str, mark: Option<MarkSpec>) {
        let link = self.link(at, other).expect("mark on missing link");
        *link.dir_from(at).mark.borrow_mut() = mark;
    }

    /// (sent, delivered, dropped) counters for the direction `from` -> `to`.
    pub fn dir_stats(&self, from: &str, to: &str) -> (u64, u64, u64) {
        let link = self.link(from, to).expect("stats on missing link");
        let d = link.dir_from(from);
        (
            d.stats.sent.get(),
            d.stats.delivered.get(),
            d.stats.dropped.get(),
        )
    }
}

/// Accept side of [`Network::listen`].
pub struct Listener {
    accepts: Mailbox<ConnEnd>,
}

impl Listener {
    pub async fn accept(&self) -> Option<ConnEnd> {
        self.accepts.recv().await
    }
}

/// One endpoint of an emulated connection. Message-oriented: each `send`
/// crosses the network as a single packet.
#[derive(Clone)]
pub struct ConnEnd {
    sim: Sim,
    conn_id: u64,
    local: String,
    peer_node: String,
    path: Option<Rc<DirState>>,
    inbound: Mailbox<Vec<u8>>,
    peer_inbound: Mailbox<Vec<u8>>,
    closed: Rc<Cell<bool>>,
}

impl std::fmt::Debug for ConnEnd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ConnEnd")
            .field("conn_id", &self.conn_id)
            .field("local", &self.local)
            .field("peer", &self.peer_node)
            .finish()
    }
}

impl ConnEnd {
    pub fn conn_id(&self) -> u64 {
        self.conn_id
    }

    pub fn local_node(&self) -> &str {
        &self.local
    }

    pub fn peer_node(&self) -> &str {
        &self.peer_node
    }

    /// Send one packet. Silently drops if this end already closed.
    pub fn send(&self, bytes: Vec<u8>) {
        if self.closed.get() {
            return;
        }
        match &self.path {
            None => {
                self.peer_inbound.send(bytes);
            }
            Some(_) => {
                let inbound = self.peer_inbound.clone();
                let size = bytes.len() as u32;
                self.transmit(size, Delivery::Data { inbound, bytes });
            }
        }
    }

    /// Receive the next packet; `None` after the peer closed.
    pub async fn recv(&self) -> Option<Vec<u8>> {
        self.inbound.recv().await
    }

    pub async fn recv_deadline(&self, deadline: VirtualTime) -> RecvOutcome<Vec<u8>> {
        self.inbound.recv_deadline(&self.sim, deadline).await
    }

    pub fn try_recv(&self) -> Option<Vec<u8>> {
        self.inbound.try_recv()
    }

    /// Half-independent close: signals FIN to the peer and stops sending.
    pub fn close(&self) {
        if self.closed.replace(true) {
            return;
        }
        match &self.path {
            None => self.peer_inbound.close(),
            Some(_) => {
                let inbound = self.peer_inbound.clone();
                self.transmit(FIN_SIZE, Delivery::Fin { inbound });
            }
        }
    }

    pub fn is_closed(&self) -> bool {
        self.closed.get()
    }

    /// Egress processing: taps, active mark, loss, serialization, delay.
    fn transmit(&self, size: u32, delivery: Delivery) {
        let dir = self.path.as_ref().expect("transmit on loopback");
        let now = self.sim.now();
        for tap in dir.src_taps.borrow().iter() {
            tap.record(now, size, TrafficDir::Out, self.conn_id);
        }
        let mark_delay = dir
            .mark
            .borrow()
            .as_ref()
            .map(|m| m.delay_for(now))
            .unwrap_or(0);
        let depart = now + mark_delay;

        dir.stats.sent.set(dir.stats.sent.get() + 1);
        if dir.params.loss_rate > 0.0 {
            let draw: f64 = dir.rng.borrow_mut().random();
            if draw < dir.params.loss_rate {
                dir.stats.dropped.set(dir.stats.dropped.get() + 1);
                return;
            }
        }

        let tx_time = match dir.params.bandwidth_kbps {
            Some(kbps) => (u64::from(size) * 8 * SECOND) / (kbps * 1_000),
            None => 0,
        };
        let start = dir.busy_until.get().max(depart);
        let serialized = start + tx_time;
        dir.busy_until.set(serialized);

        let jitter = if dir.params.jitter_us > 0 {
            dir.rng.borrow_mut().random_range(0..=dir.params.jitter_us)
        } else {
            0
        };
        let mut arrival = serialized + dir.params.delay_us + jitter;
        if arrival < dir.last_arrival.get() {
            arrival = dir.last_arrival.get();
        }
        dir.last_arrival.set(arrival);
        dir.queue.send((arrival, self.conn_id, size, delivery));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_node_net(sim: &Sim, params: LinkParams) -> Network {
        let net = Network::new(sim, 1234);
        net.add_node("a");
        net.add_node("b");
        net.add_link("a", "b", params);
        net
    }

    #[test]
    fn fixed_delay_delivery() {
        Sim::execute(|sim| async move {
            let net = two_node_net(&sim, LinkParams::delay_ms(50));
            let listener = net.listen("b", 80);
            let net2 = net.clone();
            let server = sim.spawn(async move {
                let conn = listener.accept().await.unwrap();
                let mut arrivals = Vec::new();
                for _ in 0..3 {
                    let pkt = conn.recv().await.unwrap();
                    arrivals.push((net2.sim().now(), pkt.len()));
                }
                arrivals
            });
            let conn = net.connect("a", "b", 80).await.unwrap();
            let t0 = sim.now();
            assert_eq!(t0, 100_000, "connect costs one RTT");
            for i in 0..3u8 {
                conn.send(vec![i; 100]);
            }
            let arrivals = server.await;
            for (ts, len) in &arrivals {
                assert_eq!(*ts, t0 + 50_000);
                assert_eq!(*len, 100);
            }
        });
    }

    #[test]
    fn bandwidth_cap_paces_throughput() {
        Sim::execute(|sim| async move {
            // 2 Mbps cap, offered ~10 Mbps of 1250-byte packets.
            let params = LinkParams {
                delay_us: 0,
                jitter_us: 0,
                bandwidth_kbps: Some(2_000),
                loss_rate: 0.0,
            };
            let net = two_node_net(&sim, params);
            let listener = net.listen("b", 9);
            let sim2 = sim.clone();
            let server = sim.spawn(async move {
                let conn = listener.accept().await.unwrap();
                let mut bytes = 0u64;
                while let Some(pkt) = conn.recv().await {
                    bytes += pkt.len() as u64;
                }
                (bytes, sim2.now())
            });
            let conn = net.connect("a", "b", 9).await.unwrap();
            let start = sim.now();
            let total_packets = 2_000u64;
            for _ in 0..total_packets {
                conn.send(vec![0u8; 1250]);
                sim.sleep(1_000).await; // 10 Mbps offered
            }
            conn.close();
            let (bytes, end) = server.await;
            assert_eq!(bytes, total_packets * 1250);
            let kbps = bytes as f64 * 8.0 / ((end - start) as f64 / SECOND as f64) / 1_000.0;
            assert!((kbps - 2_000.0).abs() / 2_000.0 < 0.01, "sustained {kbps} kbps");
        });
    }

    #[test]
    fn seeded_loss_rate_within_binomial_bound() {
        Sim::execute(|sim| async move {
            let params = LinkParams {
                delay_us: 1_000,
                jitter_us: 0,
                bandwidth_kbps: None,
                loss_rate: 0.01,
            };
            let net = two_node_net(&sim, params);
            let listener = net.listen("b", 9);
            sim.spawn(async move {
                let conn = listener.accept().await.unwrap();
                while conn.recv().await.is_some() {}
            });
            let conn = net.connect("a", "b", 9).await.unwrap();
            for _ in 0..100_000 {
                conn.send(vec![0u8; 64]);
            }
            sim.sleep(10_000).await;
            let (sent, _delivered, dropped) = net.dir_stats("a", "b");
            assert!(sent >= 100_000);
            assert!(
                (880..=1120).contains(&dropped),
                "dropped {dropped} outside binomial band"
            );
        });
    }

    #[test]
    fn conservation_packets_in_equals_out_plus_dropped() {
        Sim::execute(|sim| async move {
            let params = LinkParams {
                delay_us: 500,
                jitter_us: 200,
                bandwidth_kbps: Some(5_000),
                loss_rate: 0.05,
            };
            let net = two_node_net(&sim, params);
            let listener = net.listen("b", 9);
            sim.spawn(async move {
                let conn = listener.accept().await.unwrap();
                while conn.recv().await.is_some() {}
            });
            let conn = net.connect("a", "b", 9).await.unwrap();
            for _ in 0..5_000 {
                conn.send(vec![0u8; 200]);
            }
            sim.sleep(5 * SECOND).await;
            let (sent, delivered, dropped) = net.dir_stats("a", "b");
            assert_eq!(sent, delivered + dropped);
        });
    }

    #[test]
    fn taps_on_same_link_see_identical_traces() {
        Sim::execute(|sim| async move {
            let net = two_node_net(&sim, LinkParams::delay_ms(10));
            let t1 = net.tap("a", "b", None);
            let t2 = net.tap("a", "b", None);
            let listener = net.listen("b", 9);
            sim.spawn(async move {
                let conn = listener.accept().await.unwrap();
                while let Some(pkt) = conn.recv().await {
                    conn.send(pkt);
                }
            });
            let conn = net.connect("a", "b", 9).await.unwrap();
            for i in 1..=100u32 {
                conn.send(vec![0u8; i as usize]);
            }
            sim.sleep(SECOND).await;
            let (r1, r2) = (t1.snapshot(), t2.snapshot());
            assert_eq!(r1, r2);
            assert!(r1.len() >= 200, "both directions observed");
            let mut last_out = 0;
            for r in r1.iter().filter(|r| r.dir == TrafficDir::Out) {
                assert!(r.ts_us >= last_out, "monotone send timestamps");
                last_out = r.ts_us;
            }
        });
    }

    #[test]
    fn refused_when_no_listener() {
        Sim::execute(|sim| async move {
            let net = two_node_net(&sim, LinkParams::delay_ms(5));
            let err = net.connect("a", "b", 81).await.unwrap_err();
            assert_eq!(err, NetError::Refused("b".into(), 81));
        });
    }

    #[test]
    fn fin_closes_peer_recv() {
        Sim::execute(|sim| async move {
            let net = two_node_net(&sim, LinkParams::delay_ms(5));
            let listener = net.listen("b", 9);
            let server = sim.spawn(async move {
                let conn = listener.accept().await.unwrap();
                let mut got = Vec::new();
                while let Some(pkt) = conn.recv().await {
                    got.push(pkt);
                }
                got
            });
            let conn = net.connect("a", "b", 9).await.unwrap();
            conn.send(b"x".to_vec());
            conn.close();
            let got = server.await;
            assert_eq!(got, vec![b"x".to_vec()]);
        });
    }

    #[test]
    fn mark_delays_only_marked_slots() {
        Sim::execute(|sim| async move {
            let net = two_node_net(&sim, LinkParams::delay_ms(10));
            let tap = net.tap("b", "a", None); // observe arrivals at b
            let listener = net.listen("b", 9);
            sim.spawn(async move {
                let conn = listener.accept().await.unwrap();
                while conn.recv().await.is_some() {}
            });
            let conn = net.connect("a", "b", 9).await.unwrap();
            let epoch = sim.now();
            net.set_mark(
                "a",
                "b",
                Some(MarkSpec {
                    slots: vec![true, false],
                    slot_us: 100_000,
                    delay_us: 30_000,
                    epoch_us: epoch,
                }),
            );
            // One packet inside each slot.
            conn.send(vec![0u8; 10]); // slot 0 (marked)
            sim.sleep(100_000).await;
            conn.send(vec![0u8; 10]); // slot 1 (clear)
            sim.sleep(SECOND).await;
            let recs: Vec<_> = tap
                .snapshot()
                .into_iter()
                .filter(|r| r.dir == TrafficDir::In && r.size == 10)
                .collect();
            assert_eq!(recs.len(), 2);
            assert_eq!(recs[0].ts_us, epoch + 30_000 + 10_000);
            assert_eq!(recs[1].ts_us, epoch + 100_000 + 10_000);
        });
    }
}
