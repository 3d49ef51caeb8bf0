//! Stream multiplexing over one covert channel.
//!
//! One channel per node pair carries many streams, identified by
//! `stream_id` (odd ids for the channel initiator, even for the responder).
//! KEEPALIVEs flow every 15 s on idle channels; a peer silent for 60 s gets
//! the channel torn down, closing all its streams.

use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;
use std::rc::Rc;

use crate::channels::Channel;
use crate::sim::{timeout, Mailbox, Sim, SECOND};

use super::control::{
    ControlFramer, ControlMessage, Route, REASON_CHANNEL_LOST, REASON_NORMAL,
};

pub const KEEPALIVE_INTERVAL_US: u64 = 15 * SECOND;
pub const DEAD_PEER_US: u64 = 60 * SECOND;

/// Largest STREAM_DATA body; larger sends are chunked.
pub const MAX_DATA_CHUNK: usize = 32 * 1024;

struct StreamState {
    inbound: Mailbox<Vec<u8>>,
    open_result: Mailbox<u8>,
    close_reason: Cell<Option<u8>>,
}

impl StreamState {
    fn new() -> Rc<Self> {
        Rc::new(StreamState {
            inbound: Mailbox::new(),
            open_result: Mailbox::new(),
            close_reason: Cell::new(None),
        })
    }
}

/// One end of one multiplexed stream.
pub struct MuxStream {
    mux: Rc<ChannelMux>,
    id: u32,
    state: Rc<StreamState>,
}

impl MuxStream {
    pub fn id(&self) -> u32 {
        self.id
    }

    /// The multiplexer this stream belongs to.
    pub fn mux_handle(&self) -> &Rc<ChannelMux> {
        &self.mux
    }

    /// Report an open outcome for this accepted stream back to its opener.
    pub fn report_open(&self, status: u8) {
        self.mux.send_open_result(self.id, status);
    }

    /// Send application bytes down the stream (chunked as needed).
    pub fn send(&self, bytes: &[u8]) {
        if self.state.close_reason.get().is_some() {
            return;
        }
        for chunk in bytes.chunks(MAX_DATA_CHUNK) {
            self.mux.send_msg(&ControlMessage::StreamData {
                stream_id: self.id,
                bytes: chunk.to_vec(),
            });
        }
    }

    pub async fn recv(&self) -> Option<Vec<u8>> {
        self.state.inbound.recv().await
    }

    /// Wait for the far terminus to confirm (or refuse) the open.
    pub async fn open_result(&self, sim: &Sim, budget_us: u64) -> u8 {
        match timeout(sim, budget_us, self.state.open_result.recv()).await {
            Ok(Some(status)) => status,
            Ok(None) => self.state.close_reason.get().unwrap_or(REASON_CHANNEL_LOST),
            Err(_) => REASON_CHANNEL_LOST,
        }
    }

    /// Close the stream toward the peer with a reason code.
    pub fn close(&self, reason: u8) {
        if self.state.close_reason.replace(Some(reason)).is_some() {
            return;
        }
        self.state.inbound.close();
        self.mux.streams.borrow_mut().remove(&self.id);
        self.mux.send_msg(&ControlMessage::StreamClose {
            stream_id: self.id,
            reason,
        });
    }

    pub fn close_reason(&self) -> Option<u8> {
        self.state.close_reason.get()
    }
}

/// Multiplexer over one established channel.
pub struct ChannelMux {
    sim: Sim,
    channel: Rc<Channel>,
    streams: RefCell<BTreeMap<u32, Rc<StreamState>>>,
    accepts: Mailbox<(MuxStream, Route)>,
    next_stream: Cell<u32>,
    down: Cell<bool>,
    last_peer_msg: Cell<u64>,
    last_sent: Cell<u64>,
}

impl ChannelMux {
    /// Wrap an established channel and start the reader and keepalive
    /// tasks. `initiator` decides stream-id parity.
    pub fn start(sim: &Sim, channel: Channel, initiator: bool) -> Rc<ChannelMux> {
        let mux = Rc::new(ChannelMux {
            sim: sim.clone(),
            channel: Rc::new(channel),
            streams: RefCell::new(BTreeMap::new()),
            accepts: Mailbox::new(),
            next_stream: Cell::new(if initiator { 1 } else { 2 }),
            down: Cell::new(false),
            last_peer_msg: Cell::new(sim.now()),
            last_sent: Cell::new(sim.now()),
        });
        spawn_reader(Rc::clone(&mux));
        spawn_keepalive(Rc::clone(&mux));
        mux
    }

    pub fn is_down(&self) -> bool {
        self.down.get() || self.channel.is_closed()
    }

    pub fn channel(&self) -> &Channel {
        &self.channel
    }

    /// Open a stream toward the route's terminus.
    pub fn open_stream(self: &Rc<Self>, route: Route) -> MuxStream {
        let id = self.next_stream.get();
        self.next_stream.set(id + 2);
        let state = StreamState::new();
        self.streams.borrow_mut().insert(id, Rc::clone(&state));
        self.send_msg(&ControlMessage::OpenStream {
            stream_id: id,
            route,
        });
        MuxStream {
            mux: Rc::clone(self),
            id,
            state,
        }
    }

    /// Next inbound stream, with the route it asked for.
    pub async fn accept(&self) -> Option<(MuxStream, Route)> {
        self.accepts.recv().await
    }

    pub fn send_open_result(&self, stream_id: u32, status: u8) {
        self.send_msg(&ControlMessage::OpenResult { stream_id, status });
    }

    fn send_msg(&self, msg: &ControlMessage) {
        if self.is_down() {
            return;
        }
        self.last_sent.set(self.sim.now());
        let _ = self.channel.send(&msg.encode());
    }

    /// Tear the whole channel down, closing every stream.
    pub fn teardown(&self) {
        if self.down.replace(true) {
            return;
        }
        self.channel.close();
        self.accepts.close();
        let streams = std::mem::take(&mut *self.streams.borrow_mut());
        for (_, state) in streams {
            state.close_reason.set(Some(REASON_CHANNEL_LOST));
            state.open_result.send(REASON_CHANNEL_LOST);
            state.inbound.close();
        }
    }
}

fn spawn_reader(mux: Rc<ChannelMux>) {
    let sim = mux.sim.clone();
    sim.clone().spawn(async move {
        let mut framer = ControlFramer::new();
        loop {
            let Some(chunk) = mux.channel.recv().await else {
                mux.teardown();
                return;
            };
            mux.last_peer_msg.set(sim.now());
            framer.push(&chunk);
            while let Some(parsed) = framer.next_message() {
                let Ok(msg) = parsed else {
                    // Corrupt control stream: drop the channel.
                    mux.teardown();
                    return;
                };
                match msg {
                    ControlMessage::OpenStream { stream_id, route } => {
                        let state = StreamState::new();
                        mux.streams.borrow_mut().insert(stream_id, Rc::clone(&state));
                        let stream = MuxStream {
                            mux: Rc::clone(&mux),
                            id: stream_id,
                            state,
                        };
                        mux.accepts.send((stream, route));
                    }
                    ControlMessage::StreamData { stream_id, bytes } => {
                        let state = mux.streams.borrow().get(&stream_id).cloned();
                        if let Some(state) = state {
                            state.inbound.send(bytes);
                        }
                    }
                    ControlMessage::StreamClose { stream_id, reason } => {
                        let state = mux.streams.borrow_mut().remove(&stream_id);
                        if let Some(state) = state {
                            if state.close_reason.get().is_none() {
                                state.close_reason.set(Some(reason));
                            }
                            state.open_result.send(if reason == REASON_NORMAL {
                                REASON_CHANNEL_LOST
                            } else {
                                reason
                            });
                            state.inbound.close();
                        }
                    }
                    ControlMessage::OpenResult { stream_id, status } => {
                        let state = mux.streams.borrow().get(&stream_id).cloned();
                        if let Some(state) = state {
                            state.open_result.send(status);
                        }
                    }
                    ControlMessage::Keepalive => {}
                }
            }
        }
    });
}

fn spawn_keepalive(mux: Rc<ChannelMux>) {
    let sim = mux.sim.clone();
    sim.clone().spawn(async move {
        loop {
            sim.sleep(KEEPALIVE_INTERVAL_US).await;
            if mux.is_down() {
                return;
            }
            let now = sim.now();
            if now.saturating_sub(mux.last_peer_msg.get()) >= DEAD_PEER_US {
                mux.teardown();
                return;
            }
            if now.saturating_sub(mux.last_sent.get()) >= KEEPALIVE_INTERVAL_US {
                mux.send_msg(&ControlMessage::Keepalive);
            }
        }
    });
}

/// Either side of a relay splice: a raw emulated socket or a mux stream.
pub enum Duplex {
    Conn(crate::sim::ConnEnd),
    Stream(MuxStream),
}

impl Duplex {
    pub fn send(&self, bytes: &[u8]) {
        match self {
            Duplex::Conn(c) => c.send(bytes.to_vec()),
            Duplex::Stream(s) => s.send(bytes),
        }
    }

    pub async fn recv(&self) -> Option<Vec<u8>> {
        match self {
            Duplex::Conn(c) => c.recv().await,
            Duplex::Stream(s) => s.recv().await,
        }
    }

    pub fn close(&self) {
        match self {
            Duplex::Conn(c) => c.close(),
            Duplex::Stream(s) => s.close(REASON_NORMAL),
        }
    }
}

/// Pump bytes in both directions until either side closes.
pub fn splice(sim: &Sim, a: Duplex, b: Duplex) {
    let a = Rc::new(a);
    let b = Rc::new(b);
    for (from, to) in [(Rc::clone(&a), Rc::clone(&b)), (b, a)] {
        sim.spawn(async move {
            while let Some(chunk) = from.recv().await {
                to.send(&chunk);
            }
            to.close();
        });
    }
}
