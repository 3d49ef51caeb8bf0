//! The three runnable node kinds and the control protocol chaining them.
//!
//! A **gateway** fronts user applications with SOCKS5 (plus a plain
//! pass-through listener) and dispatches each accepted connection as a
//! stream over one or more covert paths. A **proxy** relays: it accepts
//! inbound covert channels, opens (or reuses) onward channels hop by hop,
//! and splices streams across; the shared final hop of a multipath circuit
//! additionally re-joins branch block streams in order. A **bridge** is the
//! terminus: it decapsulates and forwards to its upstream target (or to the
//! explicit destination carried by the stream's route).
//!
//! One covert channel per (node, peer) pair carries all streams between
//! them, multiplexed by stream id.

mod control;
mod mux;
mod socks;

pub use control::{
    ControlError, ControlFramer, ControlMessage, ExitSpec, JoinSpec, Route, OPEN_OK,
    REASON_CHANNEL_LOST, REASON_GAP_TIMEOUT, REASON_NORMAL, REASON_NO_ROUTE, REASON_OVERFLOW,
    REASON_REFUSED,
};
pub use mux::{splice, ChannelMux, Duplex, MuxStream, DEAD_PEER_US, KEEPALIVE_INTERVAL_US};
pub use socks::{
    client_connect, reply as socks_reply, server_handshake, ConnReader, SocksError, SocksRequest,
    REP_CONNECTION_REFUSED, REP_GENERAL_FAILURE, REP_HOST_UNREACHABLE, REP_NETWORK_UNREACHABLE,
    REP_SUCCESS,
};

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::rc::Rc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channels::{
    establish_channel_with, establish_media_receiver_resumed, Carrier, ChannelConfig, ChannelError,
    ChannelTransport, MediaBinding, ReceiverPolicy, Role, SignalingMessage, SignalingType,
};
use crate::codec::DataBlock;
use crate::multipath::{Joiner, MultipathError, PathSpec, SplitPolicy, Splitter};
use crate::sim::{timeout, ConnEnd, Mailbox, NetError, Network, RecvOutcome, Sim, SECOND};

/// Well-known covert listen ports inside the emulation.
pub const SIGNALING_PORT: u16 = 7070;
pub const MEDIA_PORT: u16 = 7071;
pub const TUNNEL_PORT: u16 = 7443;

/// How long an opener waits for the terminus to confirm a stream.
pub const OPEN_RESULT_TIMEOUT_US: u64 = 30 * SECOND;

#[derive(Debug, Error)]
pub enum NodeError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Multipath(#[from] MultipathError),
    #[error("node {0} not in deployment")]
    UnknownNode(u32),
    #[error("stream open refused (reason {0})")]
    OpenRefused(u8),
    #[error("bad node configuration: {0}")]
    Config(String),
}

/// One node record in a deployment file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeIdentity {
    pub node_id: u32,
    /// Network name the node answers on.
    pub name: String,
}

/// The set of nodes a gateway can route through.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Deployment {
    #[serde(default)]
    pub nodes: Vec<NodeIdentity>,
}

impl Deployment {
    pub fn name_of(&self, node_id: u32) -> Option<&str> {
        self.nodes
            .iter()
            .find(|n| n.node_id == node_id)
            .map(|n| n.name.as_str())
    }

    pub fn ids(&self) -> Vec<u32> {
        self.nodes.iter().map(|n| n.node_id).collect()
    }
}

/// Counters surfaced by a node.
#[derive(Debug, Default)]
pub struct NodeStats {
    pub streams_relayed: Cell<u64>,
    pub streams_exited: Cell<u64>,
    pub streams_refused: Cell<u64>,
    pub gap_timeouts: Cell<u64>,
    pub blocks_lost: Cell<u64>,
    pub circuits_joined: Cell<u64>,
}

pub struct NodeConfig {
    pub identity: NodeIdentity,
    /// Template for outbound dials; receivers adopt the dialer's geometry.
    pub channel_template: ChannelConfig,
    /// Bridge upstream target for `ExitSpec::Upstream` streams.
    pub upstream: Option<(String, u16)>,
    /// Listen for inbound covert channels (proxies and bridges do).
    pub accept_covert: bool,
}

enum ChanEntry {
    Ready(Rc<ChannelMux>),
    Pending(Mailbox<()>),
}

/// A running node: relay/terminus machinery shared by every node kind.
pub struct Node {
    sim: Sim,
    net: Network,
    deployment: Rc<Deployment>,
    identity: NodeIdentity,
    template: ChannelConfig,
    upstream: Option<(String, u16)>,
    channels: RefCell<BTreeMap<u32, ChanEntry>>,
    circuits: RefCell<BTreeMap<u32, Rc<Circuit>>>,
    pending_media: RefCell<BTreeMap<u64, Mailbox<ConnEnd>>>,
    dial_seq: Cell<u64>,
    circuit_seq: Cell<u32>,
    pub stats: Rc<NodeStats>,
}

impl Node {
    /// Bring a node up; when `accept_covert` is set, the covert listeners
    /// start immediately.
    pub fn start(sim: &Sim, net: &Network, deployment: &Rc<Deployment>, cfg: NodeConfig) -> Rc<Node> {
        let node = Rc::new(Node {
            sim: sim.clone(),
            net: net.clone(),
            deployment: Rc::clone(deployment),
            identity: cfg.identity,
            template: cfg.channel_template,
            upstream: cfg.upstream,
            channels: RefCell::new(BTreeMap::new()),
            circuits: RefCell::new(BTreeMap::new()),
            pending_media: RefCell::new(BTreeMap::new()),
            dial_seq: Cell::new(0),
            circuit_seq: Cell::new(1),
            stats: Rc::new(NodeStats::default()),
        });
        if cfg.accept_covert {
            node.spawn_covert_listeners();
        }
        node
    }

    pub fn identity(&self) -> &NodeIdentity {
        &self.identity
    }

    pub fn net_name(&self) -> &str {
        &self.identity.name
    }

    pub fn template(&self) -> &ChannelConfig {
        &self.template
    }

    /// Circuit ids must be unique across every gateway sharing a
    /// rendezvous, so the low half is a local counter and the high half is
    /// this node's id.
    fn fresh_circuit_id(&self) -> u32 {
        let seq = self.circuit_seq.get();
        self.circuit_seq.set(seq + 1);
        ((self.identity.node_id & 0xFFFF) << 16) | (seq & 0xFFFF)
    }

    /// Channel reuse: one covert channel per (node, peer). Concurrent
    /// callers coalesce onto a single dial.
    pub async fn channel_to(self: &Rc<Self>, peer: u32) -> Result<Rc<ChannelMux>, NodeError> {
        loop {
            enum Plan {
                Use(Rc<ChannelMux>),
                Wait(Mailbox<()>),
                Dial,
            }
            let plan = {
                let mut tbl = self.channels.borrow_mut();
                match tbl.get(&peer) {
                    Some(ChanEntry::Ready(mux)) if !mux.is_down() => Plan::Use(Rc::clone(mux)),
                    Some(ChanEntry::Pending(mb)) => Plan::Wait(mb.clone()),
                    _ => {
                        let mb = Mailbox::new();
                        tbl.insert(peer, ChanEntry::Pending(mb));
                        Plan::Dial
                    }
                }
            };
            match plan {
                Plan::Use(mux) => return Ok(mux),
                Plan::Wait(mb) => {
                    let _ = mb.recv().await;
                }
                Plan::Dial => {
                    let outcome = self.dial_channel(peer).await;
                    let mut tbl = self.channels.borrow_mut();
                    let waiters = match tbl.remove(&peer) {
                        Some(ChanEntry::Pending(mb)) => Some(mb),
                        other => {
                            if let Some(e) = other {
                                tbl.insert(peer, e);
                            }
                            None
                        }
                    };
                    let out = match outcome {
                        Ok(mux) => {
                            tbl.insert(peer, ChanEntry::Ready(Rc::clone(&mux)));
                            Ok(mux)
                        }
                        Err(e) => Err(e),
                    };
                    drop(tbl);
                    if let Some(mb) = waiters {
                        mb.close();
                    }
                    return out;
                }
            }
        }
    }

    async fn dial_channel(self: &Rc<Self>, peer: u32) -> Result<Rc<ChannelMux>, NodeError> {
        let peer_name = self
            .deployment
            .name_of(peer)
            .ok_or(NodeError::UnknownNode(peer))?
            .to_string();
        let seq = self.dial_seq.get();
        self.dial_seq.set(seq + 1);
        let mut cfg = self.template.clone();
        cfg.prng_seed = crate::sim::label_seed(
            self.template.prng_seed,
            &format!("chan:{}->{}:{}", self.identity.node_id, peer, seq),
        );
        let channel = match cfg.carrier {
            Carrier::Tunnel => {
                let conn = self.net.connect(self.net_name(), &peer_name, TUNNEL_PORT).await?;
                establish_channel_with(
                    &self.sim,
                    Role::Initiator,
                    &cfg,
                    ChannelTransport::Tunnel(conn),
                    ReceiverPolicy::Strict,
                )
                .await?
            }
            Carrier::Media => {
                let signaling = self
                    .net
                    .connect(self.net_name(), &peer_name, SIGNALING_PORT)
                    .await?;
                let media = self.net.connect(self.net_name(), &peer_name, MEDIA_PORT).await?;
                establish_channel_with(
                    &self.sim,
                    Role::Initiator,
                    &cfg,
                    ChannelTransport::Media {
                        signaling,
                        media: MediaBinding::Raw(media),
                    },
                    ReceiverPolicy::Strict,
                )
                .await?
            }
        };
        let mux = ChannelMux::start(&self.sim, channel, true);
        self.clone().drive_mux(Rc::clone(&mux));
        Ok(mux)
    }

    fn spawn_covert_listeners(self: &Rc<Self>) {
        // Tunnel channels.
        {
            let node = Rc::clone(self);
            let listener = self.net.listen(self.net_name(), TUNNEL_PORT);
            self.sim.spawn(async move {
                while let Some(conn) = listener.accept().await {
                    let node = Rc::clone(&node);
                    node.sim.clone().spawn(async move {
                        let mut cfg = node.template.clone();
                        cfg.carrier = Carrier::Tunnel;
                        cfg.prng_seed = crate::sim::label_seed(
                            node.template.prng_seed,
                            &format!("accept:{}", conn.conn_id()),
                        );
                        if let Ok(channel) = establish_channel_with(
                            &node.sim,
                            Role::Receiver,
                            &cfg,
                            ChannelTransport::Tunnel(conn),
                            ReceiverPolicy::Adopt,
                        )
                        .await
                        {
                            let mux = ChannelMux::start(&node.sim, channel, false);
                            node.drive_mux(mux);
                        }
                    });
                }
            });
        }
        // Media flows: park each by its BIND session until signaling claims it.
        {
            let node = Rc::clone(self);
            let listener = self.net.listen(self.net_name(), MEDIA_PORT);
            self.sim.spawn(async move {
                while let Some(conn) = listener.accept().await {
                    let node = Rc::clone(&node);
                    node.sim.clone().spawn(async move {
                        let Ok(Some(first)) = timeout(&node.sim, 5 * SECOND, conn.recv()).await
                        else {
                            conn.close();
                            return;
                        };
                        if first.len() != 12 || &first[..4] != b"BIND" {
                            conn.close();
                            return;
                        }
                        let session = u64::from_be_bytes(first[4..12].try_into().unwrap());
                        node.media_registry(session).send(conn);
                    });
                }
            });
        }
        // Media signaling.
        {
            let node = Rc::clone(self);
            let listener = self.net.listen(self.net_name(), SIGNALING_PORT);
            self.sim.spawn(async move {
                while let Some(sig) = listener.accept().await {
                    let node = Rc::clone(&node);
                    node.sim.clone().spawn(async move {
                        let Ok(Some(pkt)) = timeout(&node.sim, 5 * SECOND, sig.recv()).await
                        else {
                            sig.close();
                            return;
                        };
                        let Ok(hello) = SignalingMessage::decode(&pkt) else {
                            sig.close();
                            return;
                        };
                        if hello.msg_type != SignalingType::Hello {
                            sig.close();
                            return;
                        }
                        let session = hello.session_id;
                        let claimed = node.media_registry(session);
                        let media = match timeout(&node.sim, 5 * SECOND, claimed.recv()).await {
                            Ok(Some(conn)) => conn,
                            _ => {
                                sig.close();
                                return;
                            }
                        };
                        node.pending_media.borrow_mut().remove(&session);
                        let mut cfg = node.template.clone();
                        cfg.carrier = Carrier::Media;
                        cfg.prng_seed = crate::sim::label_seed(
                            node.template.prng_seed,
                            &format!("accept:{session}"),
                        );
                        if let Ok(channel) = establish_media_receiver_resumed(
                            &node.sim,
                            &cfg,
                            ReceiverPolicy::Adopt,
                            sig,
                            MediaBinding::Bound(media),
                            hello,
                        )
                        .await
                        {
                            let mux = ChannelMux::start(&node.sim, channel, false);
                            node.drive_mux(mux);
                        }
                    });
                }
            });
        }
    }

    fn media_registry(&self, session: u64) -> Mailbox<ConnEnd> {
        self.pending_media
            .borrow_mut()
            .entry(session)
            .or_default()
            .clone()
    }

    /// Serve every stream arriving on one channel.
    fn drive_mux(self: Rc<Self>, mux: Rc<ChannelMux>) {
        let sim = self.sim.clone();
        sim.spawn(async move {
            while let Some((stream, route)) = mux.accept().await {
                let node = Rc::clone(&self);
                node.sim.clone().spawn(async move {
                    node.dispatch_stream(stream, route).await;
                });
            }
        });
    }

    async fn dispatch_stream(self: Rc<Self>, stream: MuxStream, route: Route) {
        if !route.hops.is_empty() {
            // Relay toward the next hop.
            let next = route.hops[0];
            let rest = Route {
                hops: route.hops[1..].to_vec(),
                join: route.join.clone(),
                exit: route.exit.clone(),
            };
            match self.channel_to(next).await {
                Ok(onward_mux) => {
                    self.stats.streams_relayed.set(self.stats.streams_relayed.get() + 1);
                    let downstream = onward_mux.open_stream(rest);
                    let status = downstream.open_result(&self.sim, OPEN_RESULT_TIMEOUT_US).await;
                    stream.report_open(status);
                    if status != OPEN_OK {
                        downstream.close(status);
                        stream.close(status);
                        return;
                    }
                    splice(&self.sim, Duplex::Stream(stream), Duplex::Stream(downstream));
                }
                Err(_) => {
                    self.stats.streams_refused.set(self.stats.streams_refused.get() + 1);
                    stream.report_open(REASON_NO_ROUTE);
                    stream.close(REASON_NO_ROUTE);
                }
            }
            return;
        }
        if route.join.is_some() {
            self.rendezvous_branch(stream, route).await;
            return;
        }
        // Terminus: decapsulate and forward upstream.
        let target = match &route.exit {
            ExitSpec::Target { host, port } => Some((host.clone(), *port)),
            ExitSpec::Upstream => self.upstream.clone(),
        };
        let Some((host, port)) = target else {
            self.stats.streams_refused.set(self.stats.streams_refused.get() + 1);
            stream.report_open(REASON_REFUSED);
            stream.close(REASON_REFUSED);
            return;
        };
        match self.net.connect(self.net_name(), &host, port).await {
            Ok(conn) => {
                self.stats.streams_exited.set(self.stats.streams_exited.get() + 1);
                stream.report_open(OPEN_OK);
                splice(&self.sim, Duplex::Stream(stream), Duplex::Conn(conn));
            }
            Err(_) => {
                self.stats.streams_refused.set(self.stats.streams_refused.get() + 1);
                stream.report_open(REASON_REFUSED);
                stream.close(REASON_REFUSED);
            }
        }
    }

    /// Open the remainder of a route from this node: either a local exit or
    /// a stream through the next covert hop.
    async fn open_route(self: &Rc<Self>, route: Route) -> (Option<Duplex>, u8) {
        if route.hops.is_empty() {
            let target = match &route.exit {
                ExitSpec::Target { host, port } => Some((host.clone(), *port)),
                ExitSpec::Upstream => self.upstream.clone(),
            };
            let Some((host, port)) = target else {
                return (None, REASON_REFUSED);
            };
            match self.net.connect(self.net_name(), &host, port).await {
                Ok(conn) => (Some(Duplex::Conn(conn)), OPEN_OK),
                Err(_) => (None, REASON_REFUSED),
            }
        } else {
            let next = route.hops[0];
            let rest = Route {
                hops: route.hops[1..].to_vec(),
                join: None,
                exit: route.exit.clone(),
            };
            match self.channel_to(next).await {
                Ok(mux) => {
                    let stream = mux.open_stream(rest);
                    let status = stream.open_result(&self.sim, OPEN_RESULT_TIMEOUT_US).await;
                    if status == OPEN_OK {
                        (Some(Duplex::Stream(stream)), OPEN_OK)
                    } else {
                        stream.close(status);
                        (None, status)
                    }
                }
                Err(_) => (None, REASON_NO_ROUTE),
            }
        }
    }

    async fn rendezvous_branch(self: Rc<Self>, stream: MuxStream, route: Route) {
        let join = route.join.clone().expect("caller checked");
        let circuit = {
            let existing = self.circuits.borrow().get(&join.circuit_id).cloned();
            match existing {
                Some(c) => c,
                None => {
                    let c = Circuit::new(&join);
                    self.circuits
                        .borrow_mut()
                        .insert(join.circuit_id, Rc::clone(&c));
                    self.stats.circuits_joined.set(self.stats.circuits_joined.get() + 1);
                    let node = Rc::clone(&self);
                    let onward_route = Route {
                        hops: join.onward_hops.clone(),
                        join: None,
                        exit: route.exit.clone(),
                    };
                    let circuit = Rc::clone(&c);
                    self.sim.clone().spawn(async move {
                        circuit.drive(node, onward_route).await;
                    });
                    c
                }
            }
        };
        circuit.register_branch(&self.sim, join.path_id, stream);
    }
}

/// Re-frames a branch byte stream into `[seq:u32][payload]` block records.
pub struct BranchFramer {
    block_size: usize,
    buf: Vec<u8>,
}

impl BranchFramer {
    pub fn new(block_size: usize) -> Self {
        BranchFramer {
            block_size,
            buf: Vec::new(),
        }
    }

    pub fn push(&mut self, bytes: &[u8], stream_id: u32) -> Vec<DataBlock> {
        self.buf.extend_from_slice(bytes);
        let record = 4 + self.block_size;
        let mut out = Vec::new();
        while self.buf.len() >= record {
            let rest = self.buf.split_off(record);
            let rec = std::mem::replace(&mut self.buf, rest);
            let seq = u32::from_be_bytes(rec[..4].try_into().unwrap());
            out.push(DataBlock::new(stream_id, seq, rec[4..].to_vec()));
        }
        out
    }
}

pub fn encode_branch_block(block: &DataBlock) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + block.payload.len());
    out.extend_from_slice(&block.block_seq.to_be_bytes());
    out.extend_from_slice(&block.payload);
    out
}

/// Rendezvous-side state for one multipath circuit.
struct Circuit {
    circuit_id: u32,
    k: u16,
    block_size: usize,
    feed: Mailbox<DataBlock>,
    branches: RefCell<BTreeMap<u16, Rc<MuxStream>>>,
    registered: Cell<u16>,
    all_registered: Mailbox<()>,
    ack_status: Cell<Option<u8>>,
    splitter: RefCell<Splitter>,
    down: Cell<bool>,
}

impl Circuit {
    fn new(join: &JoinSpec) -> Rc<Circuit> {
        let paths: Vec<PathSpec> = (0..join.path_count)
            .map(|i| PathSpec::new(i, vec![0]))
            .collect();
        let circuit_spec = crate::multipath::MultipathCircuit::new(
            join.circuit_id,
            paths,
            SplitPolicy::RoundRobin,
        )
        .expect("synthetic circuit is valid");
        Rc::new(Circuit {
            circuit_id: join.circuit_id,
            k: join.path_count,
            block_size: join.block_size as usize,
            feed: Mailbox::new(),
            branches: RefCell::new(BTreeMap::new()),
            registered: Cell::new(0),
            all_registered: Mailbox::new(),
            ack_status: Cell::new(None),
            splitter: RefCell::new(Splitter::new(&circuit_spec)),
            down: Cell::new(false),
        })
    }

    fn register_branch(self: &Rc<Self>, sim: &Sim, path_id: u16, stream: MuxStream) {
        let stream = Rc::new(stream);
        self.branches
            .borrow_mut()
            .insert(path_id, Rc::clone(&stream));
        self.registered.set(self.registered.get() + 1);
        if self.registered.get() >= self.k {
            self.all_registered.close();
        }
        if let Some(status) = self.ack_status.get() {
            stream.report_open(status);
        }
        // Branch reader: block records feed the joiner.
        let circuit = Rc::clone(self);
        let reader = Rc::clone(&stream);
        sim.spawn(async move {
            let mut framer = BranchFramer::new(circuit.block_size);
            while let Some(bytes) = reader.recv().await {
                for block in framer.push(&bytes, circuit.circuit_id) {
                    circuit.feed.send(block);
                }
            }
            circuit
                .splitter
                .borrow_mut()
                .mark_path_down(path_id as usize);
            let all_down = circuit
                .branches
                .borrow()
                .values()
                .all(|s| s.close_reason().is_some());
            if all_down {
                circuit.feed.close();
            }
        });
    }

    fn teardown(&self, reason: u8) {
        if self.down.replace(true) {
            return;
        }
        self.feed.close();
        for (_, branch) in self.branches.borrow().iter() {
            branch.close(reason);
        }
    }

    async fn drive(self: Rc<Self>, node: Rc<Node>, onward_route: Route) {
        let (duplex, status) = node.open_route(onward_route).await;
        self.ack_status.set(Some(status));
        for (_, branch) in self.branches.borrow().iter() {
            branch.report_open(status);
        }
        let Some(onward) = duplex else {
            self.teardown(status);
            node.circuits.borrow_mut().remove(&self.circuit_id);
            return;
        };
        let onward = Rc::new(onward);

        // Joined direction: branch arrivals -> ordered blocks -> upstream.
        {
            let circuit = Rc::clone(&self);
            let onward = Rc::clone(&onward);
            let node2 = Rc::clone(&node);
            let sim = node.sim.clone();
            sim.clone().spawn(async move {
                let mut joiner = Joiner::new();
                let mut unpacker = crate::channels::BlockUnpacker::new();
                loop {
                    let deadline = joiner.next_deadline().unwrap_or(u64::MAX);
                    let outcome = circuit.feed.recv_deadline(&sim, deadline).await;
                    let blocks = match outcome {
                        RecvOutcome::Item(block) => match joiner.push(sim.now(), block) {
                            Ok(blocks) => blocks,
                            Err(_) => {
                                circuit.teardown(REASON_OVERFLOW);
                                onward.close();
                                return;
                            }
                        },
                        RecvOutcome::TimedOut => joiner.on_timer(sim.now()),
                        RecvOutcome::Closed => {
                            onward.close();
                            return;
                        }
                    };
                    for ev in joiner.take_events() {
                        let crate::multipath::JoinEvent::GapTimeout { from, to } = ev;
                        node2.stats.gap_timeouts.set(node2.stats.gap_timeouts.get() + 1);
                        node2
                            .stats
                            .blocks_lost
                            .set(node2.stats.blocks_lost.get() + u64::from(to - from + 1));
                    }
                    for block in blocks {
                        let bytes = unpacker.push(block);
                        if !bytes.is_empty() {
                            onward.send(&bytes);
                        }
                    }
                }
            });
        }

        // Return direction: upstream bytes -> blocks -> round-robin over
        // surviving branches.
        {
            let circuit = Rc::clone(&self);
            let onward = Rc::clone(&onward);
            let sim = node.sim.clone();
            sim.clone().spawn(async move {
                // Give the remaining branches a moment to arrive.
                let _ = timeout(&sim, 5 * SECOND, circuit.all_registered.recv()).await;
                let mut packer =
                    crate::channels::BlockPacker::new(circuit.circuit_id, circuit.block_size);
                while let Some(bytes) = onward.recv().await {
                    for block in packer.pack(&bytes) {
                        let target = circuit.splitter.borrow_mut().assign(block.block_seq);
                        let Some(idx) = target else {
                            circuit.teardown(REASON_CHANNEL_LOST);
                            return;
                        };
                        let branch = circuit.branches.borrow().get(&(idx as u16)).cloned();
                        if let Some(branch) = branch {
                            branch.send(&encode_branch_block(&block));
                        }
                    }
                }
                circuit.teardown(REASON_NORMAL);
            });
        }
    }
}

/// Gateway front-end parameters.
pub struct GatewayConfig {
    pub socks_port: u16,
    /// Plain pass-through listener ("default sockets"); `None` disables.
    pub plain_port: Option<u16>,
    pub paths: Vec<PathSpec>,
    pub policy: SplitPolicy,
    /// Terminus node every route ends at (the bridge stand-in).
    pub terminus: u32,
}

/// Start the SOCKS5 (and optional plain) front-ends on an existing node.
pub fn gateway_serve(node: &Rc<Node>, cfg: GatewayConfig) -> Result<(), NodeError> {
    if cfg.paths.is_empty() {
        return Err(NodeError::Config("gateway needs at least one path".into()));
    }
    crate::multipath::validate_paths(&cfg.paths, &node.deployment.ids())?;
    if node.deployment.name_of(cfg.terminus).is_none() {
        return Err(NodeError::UnknownNode(cfg.terminus));
    }
    if cfg.paths.len() > 1 {
        // Multipath circuits need the shared-rendezvous invariant.
        crate::multipath::MultipathCircuit::new(0, cfg.paths.clone(), cfg.policy)?;
    }
    let cfg = Rc::new(cfg);

    // SOCKS5 listener.
    {
        let node = Rc::clone(node);
        let cfg = Rc::clone(&cfg);
        let listener = node.net.listen(node.net_name(), cfg.socks_port);
        node.sim.clone().spawn(async move {
            while let Some(conn) = listener.accept().await {
                let node = Rc::clone(&node);
                let cfg = Rc::clone(&cfg);
                node.sim.clone().spawn(async move {
                    let mut reader = ConnReader::new(conn);
                    let request = match server_handshake(&mut reader).await {
                        Ok(req) => req,
                        Err(_) => return,
                    };
                    let exit = ExitSpec::Target {
                        host: request.host,
                        port: request.port,
                    };
                    let (conn, leftover) = reader.leftover();
                    match open_app_path(&node, &cfg, exit).await {
                        Ok(path) => {
                            socks_reply(&conn, REP_SUCCESS);
                            attach_app(&node, conn, leftover, path);
                        }
                        Err(reason) => {
                            socks_reply(&conn, map_reason_to_socks(reason));
                            conn.close();
                        }
                    }
                });
            }
        });
    }

    // Plain pass-through listener.
    if let Some(plain_port) = cfg.plain_port {
        let node = Rc::clone(node);
        let cfg = Rc::clone(&cfg);
        let listener = node.net.listen(node.net_name(), plain_port);
        node.sim.clone().spawn(async move {
            while let Some(conn) = listener.accept().await {
                let node = Rc::clone(&node);
                let cfg = Rc::clone(&cfg);
                node.sim.clone().spawn(async move {
                    match open_app_path(&node, &cfg, ExitSpec::Upstream).await {
                        Ok(path) => attach_app(&node, conn, Vec::new(), path),
                        Err(_) => conn.close(),
                    }
                });
            }
        });
    }
    Ok(())
}

fn map_reason_to_socks(reason: u8) -> u8 {
    match reason {
        REASON_NO_ROUTE => REP_HOST_UNREACHABLE,
        REASON_REFUSED => REP_CONNECTION_REFUSED,
        _ => REP_GENERAL_FAILURE,
    }
}

/// An opened application path: a single spliced stream or a multipath set.
enum AppPath {
    Single(MuxStream),
    Multi {
        branches: Vec<Rc<MuxStream>>,
        block_size: usize,
        splitter: Splitter,
        circuit_id: u32,
    },
}

/// Route hops for a path: its proxy hops plus the terminus (unless the
/// path already ends there).
fn full_hops(path: &PathSpec, terminus: u32) -> Vec<u32> {
    let mut hops = path.hops.clone();
    if hops.last() != Some(&terminus) {
        hops.push(terminus);
    }
    hops
}

async fn open_app_path(node: &Rc<Node>, cfg: &GatewayConfig, exit: ExitSpec) -> Result<AppPath, u8> {
    if cfg.paths.len() == 1 {
        let hops = full_hops(&cfg.paths[0], cfg.terminus);
        let mux = node.channel_to(hops[0]).await.map_err(|_| REASON_NO_ROUTE)?;
        let stream = mux.open_stream(Route::direct(hops[1..].to_vec(), exit));
        let status = stream.open_result(&node.sim, OPEN_RESULT_TIMEOUT_US).await;
        if status != OPEN_OK {
            stream.close(status);
            return Err(status);
        }
        return Ok(AppPath::Single(stream));
    }

    // Multipath: one branch per path, joined at the shared rendezvous.
    let circuit_id = node.fresh_circuit_id();
    let k = cfg.paths.len() as u16;
    let block_size = node.template.block_size;
    let rendezvous = cfg.paths[0].hops.last().copied().expect("validated");
    let onward_hops = if rendezvous == cfg.terminus {
        Vec::new()
    } else {
        vec![cfg.terminus]
    };
    let circuit_spec =
        crate::multipath::MultipathCircuit::new(circuit_id, cfg.paths.clone(), cfg.policy)
            .map_err(|_| REASON_REFUSED)?;
    let splitter = Splitter::new(&circuit_spec);

    let mut branches = Vec::with_capacity(cfg.paths.len());
    for (idx, path) in cfg.paths.iter().enumerate() {
        let mux = node
            .channel_to(path.hops[0])
            .await
            .map_err(|_| REASON_NO_ROUTE)?;
        let route = Route {
            hops: path.hops[1..].to_vec(),
            join: Some(JoinSpec {
                circuit_id,
                path_id: idx as u16,
                path_count: k,
                block_size: block_size as u32,
                onward_hops: onward_hops.clone(),
            }),
            exit: exit.clone(),
        };
        branches.push(Rc::new(mux.open_stream(route)));
    }
    for branch in &branches {
        let status = branch.open_result(&node.sim, OPEN_RESULT_TIMEOUT_US).await;
        if status != OPEN_OK {
            for b in &branches {
                b.close(status);
            }
            return Err(status);
        }
    }
    Ok(AppPath::Multi {
        branches,
        block_size,
        splitter,
        circuit_id,
    })
}

/// Wire the application connection to the opened path.
fn attach_app(node: &Rc<Node>, conn: ConnEnd, leftover: Vec<u8>, path: AppPath) {
    match path {
        AppPath::Single(stream) => {
            if !leftover.is_empty() {
                stream.send(&leftover);
            }
            splice(&node.sim, Duplex::Conn(conn), Duplex::Stream(stream));
        }
        AppPath::Multi {
            branches,
            block_size,
            splitter,
            circuit_id,
        } => {
            let sim = node.sim.clone();
            let splitter = Rc::new(RefCell::new(splitter));
            let conn = Rc::new(conn);

            // Outgoing: app bytes -> blocks -> branch assignment.
            {
                let conn = Rc::clone(&conn);
                let branches = branches.clone();
                let splitter = Rc::clone(&splitter);
                let leftover = leftover.clone();
                sim.clone().spawn(async move {
                    let mut packer = crate::channels::BlockPacker::new(circuit_id, block_size);
                    let mut ship = |data: &[u8]| {
                        for block in packer.pack(data) {
                            let Some(idx) = splitter.borrow_mut().assign(block.block_seq) else {
                                return false;
                            };
                            branches[idx].send(&encode_branch_block(&block));
                        }
                        true
                    };
                    if !leftover.is_empty() && !ship(&leftover) {
                        conn.close();
                        return;
                    }
                    while let Some(bytes) = conn.recv().await {
                        if !ship(&bytes) {
                            break;
                        }
                    }
                    for b in &branches {
                        b.close(REASON_NORMAL);
                    }
                });
            }

            // Incoming: branch block records -> joiner -> app bytes.
            {
                let node = Rc::clone(node);
                let feed: Mailbox<DataBlock> = Mailbox::new();
                for (idx, branch) in branches.iter().enumerate() {
                    let feed = feed.clone();
                    let branch = Rc::clone(branch);
                    let splitter = Rc::clone(&splitter);
                    let branches_all = branches.clone();
                    sim.clone().spawn(async move {
                        let mut framer = BranchFramer::new(block_size);
                        while let Some(bytes) = branch.recv().await {
                            for block in framer.push(&bytes, circuit_id) {
                                feed.send(block);
                            }
                        }
                        splitter.borrow_mut().mark_path_down(idx);
                        if branches_all.iter().all(|b| b.close_reason().is_some()) {
                            feed.close();
                        }
                    });
                }
                let sim2 = sim.clone();
                sim.clone().spawn(async move {
                    let mut joiner = Joiner::new();
                    let mut unpacker = crate::channels::BlockUnpacker::new();
                    loop {
                        let deadline = joiner.next_deadline().unwrap_or(u64::MAX);
                        let blocks = match feed.recv_deadline(&sim2, deadline).await {
                            RecvOutcome::Item(block) => match joiner.push(sim2.now(), block) {
                                Ok(blocks) => blocks,
                                Err(_) => {
                                    conn.close();
                                    return;
                                }
                            },
                            RecvOutcome::TimedOut => joiner.on_timer(sim2.now()),
                            RecvOutcome::Closed => {
                                conn.close();
                                return;
                            }
                        };
                        for ev in joiner.take_events() {
                            let crate::multipath::JoinEvent::GapTimeout { from, to } = ev;
                            node.stats.gap_timeouts.set(node.stats.gap_timeouts.get() + 1);
                            node.stats
                                .blocks_lost
                                .set(node.stats.blocks_lost.get() + u64::from(to - from + 1));
                        }
                        for block in blocks {
                            let bytes = unpacker.push(block);
                            if !bytes.is_empty() {
                                conn.send(bytes);
                            }
                        }
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests;
