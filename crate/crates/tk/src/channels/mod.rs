//! The two covert carriers and the handshake that establishes them.
//!
//! A [`Channel`] is a full-duplex byte pipe riding either an emulated
//! video-conference stream (MEDIA — cover frames at a fixed rate with
//! covert blocks embedded via `ADD` or `REPLACE`) or an encrypted stream
//! tunnel (TUNNEL — length-prefixed authenticated records under a
//! pre-shared key). Both carriers pack the application byte stream into
//! fixed-size [`DataBlock`](crate::codec::DataBlock)s first, so the wire
//! only ever sees block-shaped covert payloads.
//!
//! MEDIA establishment runs the signaling handshake
//! (HELLO → OFFER → ANSWER → READY) on a dedicated plaintext control
//! connection; cover frames start flowing the instant READY lands, data or
//! not.

mod packing;
mod record;
mod signaling;
mod source;

pub use packing::{BlockPacker, BlockUnpacker, StreamingUnpacker};
pub use record::{
    RecordOpener, RecordSealer, DIR_INITIATOR, DIR_RESPONDER, TUNNEL_PLAINTEXT_MAX,
    TUNNEL_RECORD_MAX,
};
pub use signaling::{SignalingMessage, SignalingType};
pub use source::{
    decode_media_packet, encode_audio_packet, encode_video_packet, FrameSource, MediaPacket,
    AUDIO_PACKETS_PER_SECOND, AUDIO_PACKET_LEN, MEDIA_ENVELOPE_LEN, TRACK_AUDIO, TRACK_VIDEO,
};

use std::cell::Cell;
use std::rc::Rc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{
    decode_frame, encode_add, encode_replace, fragment, BlockQueue, EmbedMode, FragmentHeader,
    DEFAULT_BLOCK_SIZES, FRAGMENT_HEADER_LEN,
};
use crate::sim::{timeout, ConnEnd, Mailbox, Sim, SECOND};

/// Signaling and auth steps abort after this long (virtual time).
pub const SIGNALING_STEP_TIMEOUT_US: u64 = 5 * SECOND;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Carrier {
    Media,
    Tunnel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Initiator,
    Receiver,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ChannelError {
    #[error("signaling step timed out")]
    SignalingTimeout,
    #[error("peer parameters do not match ({0})")]
    ParameterMismatch(&'static str),
    #[error("authentication failure")]
    AuthFailure,
    #[error("channel closed")]
    Closed,
    #[error("protocol violation: {0}")]
    Protocol(&'static str),
    #[error("invalid channel config: {0}")]
    InvalidConfig(&'static str),
}

/// Everything needed to drive one covert channel.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ChannelConfig {
    pub carrier: Carrier,
    /// Embedding mode; MEDIA only.
    pub mode: EmbedMode,
    /// Covert payload unit in bytes; must be one of the configured sizes.
    pub block_size: usize,
    pub fps: u32,
    pub key_frame_interval: u32,
    pub key_frame_size: usize,
    pub frame_header_len: usize,
    pub delta_frame_mean: f64,
    pub delta_frame_stddev: f64,
    pub delta_frame_min: usize,
    pub delta_frame_max: usize,
    pub prng_seed: u64,
    /// Pre-shared key: TUNNEL confidentiality and peer authentication.
    #[serde(with = "psk_hex")]
    pub psk: [u8; 32],
}

impl Default for ChannelConfig {
    fn default() -> Self {
        ChannelConfig {
            carrier: Carrier::Tunnel,
            mode: EmbedMode::Replace,
            block_size: 536,
            fps: 30,
            key_frame_interval: 150,
            key_frame_size: 12_000,
            frame_header_len: 12,
            delta_frame_mean: 1_200.0,
            delta_frame_stddev: 300.0,
            delta_frame_min: 100,
            delta_frame_max: 4_000,
            prng_seed: 0,
            psk: [0u8; 32],
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<(), ChannelError> {
        if self.fps == 0 {
            return Err(ChannelError::InvalidConfig("fps must be positive"));
        }
        if !DEFAULT_BLOCK_SIZES.contains(&self.block_size) {
            return Err(ChannelError::InvalidConfig("block_size not in configured set"));
        }
        if self.delta_frame_min > self.delta_frame_max {
            return Err(ChannelError::InvalidConfig("delta size bounds inverted"));
        }
        if self.frame_header_len + 1 > self.delta_frame_min {
            return Err(ChannelError::InvalidConfig("frame header exceeds minimum frame"));
        }
        Ok(())
    }

    fn offer_params(&self) -> [(&'static str, String); 4] {
        let carrier = match self.carrier {
            Carrier::Media => "media",
            Carrier::Tunnel => "tunnel",
        };
        let mode = match self.mode {
            EmbedMode::Add => "add",
            EmbedMode::Replace => "replace",
        };
        [
            ("carrier", carrier.to_string()),
            ("mode", mode.to_string()),
            ("block_size", self.block_size.to_string()),
            ("fps", self.fps.to_string()),
        ]
    }
}

mod psk_hex {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(psk: &[u8; 32], ser: S) -> Result<S::Ok, S::Error> {
        let mut s = String::with_capacity(64);
        for b in psk {
            s.push_str(&format!("{b:02x}"));
        }
        ser.serialize_str(&s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<[u8; 32], D::Error> {
        let s = String::deserialize(de)?;
        if s.len() != 64 {
            return Err(serde::de::Error::custom("psk must be 64 hex chars"));
        }
        let mut out = [0u8; 32];
        for (i, slot) in out.iter_mut().enumerate() {
            *slot = u8::from_str_radix(&s[2 * i..2 * i + 2], 16)
                .map_err(|_| serde::de::Error::custom("invalid hex in psk"))?;
        }
        Ok(out)
    }
}

/// Counters a channel maintains while running.
#[derive(Debug, Default)]
pub struct ChannelStats {
    pub frames_sent: Cell<u64>,
    pub frames_received: Cell<u64>,
    pub audio_sent: Cell<u64>,
    pub audio_received: Cell<u64>,
    pub blocks_sent: Cell<u64>,
    pub blocks_received: Cell<u64>,
    pub checksum_drops: Cell<u64>,
    pub blocks_abandoned: Cell<u64>,
    pub records_sent: Cell<u64>,
    pub records_received: Cell<u64>,
}

/// How the receiver treats offered parameters: `Strict` requires them to
/// match its own config; `Adopt` accepts any valid offer and mirrors it.
/// Relay nodes adopt, since every dialer chooses its own geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReceiverPolicy {
    Strict,
    Adopt,
}

/// The media flow handed to a receiver: either a raw connection (the BIND
/// preamble is still in it) or one already matched to the session by the
/// caller's intake loop.
pub enum MediaBinding {
    Raw(ConnEnd),
    Bound(ConnEnd),
}

/// Transport legs handed to [`establish_channel`].
pub enum ChannelTransport {
    /// MEDIA: dedicated plaintext signaling connection plus the media flow.
    Media {
        signaling: ConnEnd,
        media: MediaBinding,
    },
    Tunnel(ConnEnd),
}

/// A full-duplex covert byte channel. `send` preserves the application
/// byte stream; chunk boundaries on `recv` are arbitrary.
pub struct Channel {
    cfg: ChannelConfig,
    outbound: Mailbox<Vec<u8>>,
    inbound: Mailbox<Vec<u8>>,
    closed: Rc<Cell<bool>>,
    stats: Rc<ChannelStats>,
    last_activity: Rc<Cell<u64>>,
    conns: Vec<ConnEnd>,
}

impl std::fmt::Debug for Channel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Channel")
            .field("carrier", &self.cfg.carrier)
            .field("block_size", &self.cfg.block_size)
            .field("closed", &self.closed.get())
            .finish()
    }
}

impl Channel {
    /// Queue bytes for the carrier. Zero-length sends are no-ops.
    pub fn send(&self, bytes: &[u8]) -> Result<(), ChannelError> {
        if self.closed.get() {
            return Err(ChannelError::Closed);
        }
        if bytes.is_empty() {
            return Ok(());
        }
        self.outbound.send(bytes.to_vec());
        Ok(())
    }

    /// Next chunk of the peer's byte stream; `None` once the channel is
    /// down and drained.
    pub async fn recv(&self) -> Option<Vec<u8>> {
        self.inbound.recv().await
    }

    pub fn try_recv(&self) -> Option<Vec<u8>> {
        self.inbound.try_recv()
    }

    /// Quiesce both directions.
    pub fn close(&self) {
        self.closed.set(true);
        self.outbound.close();
        self.inbound.close();
        for conn in &self.conns {
            conn.close();
        }
    }

    pub fn is_closed(&self) -> bool {
        self.closed.get()
    }

    pub fn cfg(&self) -> &ChannelConfig {
        &self.cfg
    }

    pub fn stats(&self) -> &ChannelStats {
        &self.stats
    }

    /// Virtual timestamp of the last packet received from the peer.
    pub fn last_activity_us(&self) -> u64 {
        self.last_activity.get()
    }
}

/// Run the establishment protocol for the configured carrier and start the
/// carrier loops. MEDIA signaling completes HELLO → OFFER → ANSWER → READY
/// (one round trip when both sides agree); TUNNEL performs a PSK auth
/// exchange. Returns the live channel.
pub async fn establish_channel(
    sim: &Sim,
    role: Role,
    cfg: &ChannelConfig,
    transport: ChannelTransport,
) -> Result<Channel, ChannelError> {
    establish_channel_with(sim, role, cfg, transport, ReceiverPolicy::Strict).await
}

/// [`establish_channel`] with an explicit receiver-side parameter policy.
pub async fn establish_channel_with(
    sim: &Sim,
    role: Role,
    cfg: &ChannelConfig,
    transport: ChannelTransport,
    policy: ReceiverPolicy,
) -> Result<Channel, ChannelError> {
    cfg.validate()?;
    match transport {
        ChannelTransport::Media { signaling, media } => {
            if cfg.carrier != Carrier::Media {
                return Err(ChannelError::InvalidConfig("media transport for tunnel config"));
            }
            establish_media(sim, role, cfg, policy, signaling, media).await
        }
        ChannelTransport::Tunnel(conn) => {
            if cfg.carrier != Carrier::Tunnel {
                return Err(ChannelError::InvalidConfig("tunnel transport for media config"));
            }
            establish_tunnel(sim, role, cfg, policy, conn).await
        }
    }
}

/// Derive the channel config a receiver adopts from an OFFER.
fn adopt_from_offer(
    template: &ChannelConfig,
    msg: &SignalingMessage,
) -> Result<ChannelConfig, ChannelError> {
    let mut cfg = template.clone();
    let get = |key: &str| -> Result<&String, ChannelError> {
        msg.params
            .get(key)
            .ok_or(ChannelError::ParameterMismatch("missing offer parameter"))
    };
    cfg.carrier = match get("carrier")?.as_str() {
        "media" => Carrier::Media,
        "tunnel" => Carrier::Tunnel,
        _ => return Err(ChannelError::ParameterMismatch("carrier")),
    };
    cfg.mode = match get("mode")?.as_str() {
        "add" => EmbedMode::Add,
        "replace" => EmbedMode::Replace,
        _ => return Err(ChannelError::ParameterMismatch("mode")),
    };
    cfg.block_size = get("block_size")?
        .parse()
        .map_err(|_| ChannelError::ParameterMismatch("block_size"))?;
    cfg.fps = get("fps")?
        .parse()
        .map_err(|_| ChannelError::ParameterMismatch("fps"))?;
    cfg.validate()
        .map_err(|_| ChannelError::ParameterMismatch("offer fails validation"))?;
    Ok(cfg)
}

async fn recv_signal(
    sim: &Sim,
    conn: &ConnEnd,
    expect: SignalingType,
) -> Result<SignalingMessage, ChannelError> {
    let pkt = timeout(sim, SIGNALING_STEP_TIMEOUT_US, conn.recv())
        .await
        .map_err(|_| ChannelError::SignalingTimeout)?
        .ok_or(ChannelError::Closed)?;
    let msg = SignalingMessage::decode(&pkt)?;
    if msg.msg_type != expect {
        if msg.msg_type == SignalingType::Close {
            return Err(ChannelError::Closed);
        }
        return Err(ChannelError::Protocol("unexpected signaling message"));
    }
    Ok(msg)
}

fn check_params(cfg: &ChannelConfig, msg: &SignalingMessage) -> Result<(), ChannelError> {
    for (key, want) in cfg.offer_params() {
        match msg.params.get(key) {
            Some(got) if *got == want => {}
            _ => {
                return Err(ChannelError::ParameterMismatch(key));
            }
        }
    }
    Ok(())
}

async fn establish_media(
    sim: &Sim,
    role: Role,
    cfg: &ChannelConfig,
    policy: ReceiverPolicy,
    signaling: ConnEnd,
    media: MediaBinding,
) -> Result<Channel, ChannelError> {
    match role {
        Role::Initiator => {
            let media = match media {
                MediaBinding::Raw(conn) | MediaBinding::Bound(conn) => conn,
            };
            let session_id = media.conn_id();
            // Bind the media flow to the session up front so the peer's
            // intake can pair the two connections.
            let mut bind = b"BIND".to_vec();
            bind.extend_from_slice(&session_id.to_be_bytes());
            media.send(bind);
            let hello = SignalingMessage::new(SignalingType::Hello, session_id);
            signaling.send(hello.encode());
            let mut offer = SignalingMessage::new(SignalingType::Offer, session_id);
            for (k, v) in cfg.offer_params() {
                offer = offer.with_param(k, v);
            }
            signaling.send(offer.encode());

            recv_signal(sim, &signaling, SignalingType::Hello).await?;
            let answer = recv_signal(sim, &signaling, SignalingType::Answer).await?;
            if let Err(e) = check_params(cfg, &answer) {
                signaling.send(SignalingMessage::new(SignalingType::Close, session_id).encode());
                return Err(e);
            }
            signaling.send(SignalingMessage::new(SignalingType::Ready, session_id).encode());
            Ok(start_media_channel(sim, cfg, role, signaling, media))
        }
        Role::Receiver => {
            let hello = recv_signal(sim, &signaling, SignalingType::Hello).await?;
            establish_media_receiver_resumed(sim, cfg, policy, signaling, media, hello).await
        }
    }
}

/// Receiver-side media establishment when the caller has already consumed
/// the HELLO (node intake loops do, to pair the media flow by session id).
pub async fn establish_media_receiver_resumed(
    sim: &Sim,
    cfg: &ChannelConfig,
    policy: ReceiverPolicy,
    signaling: ConnEnd,
    media: MediaBinding,
    hello: SignalingMessage,
) -> Result<Channel, ChannelError> {
    {
        {
            let session_id = hello.session_id;
            signaling.send(SignalingMessage::new(SignalingType::Hello, session_id).encode());
            let offer = recv_signal(sim, &signaling, SignalingType::Offer).await?;
            let adopted = match policy {
                ReceiverPolicy::Strict => cfg.clone(),
                ReceiverPolicy::Adopt => adopt_from_offer(cfg, &offer)?,
            };
            let mut answer = SignalingMessage::new(SignalingType::Answer, session_id);
            for (k, v) in adopted.offer_params() {
                answer = answer.with_param(k, v);
            }
            signaling.send(answer.encode());
            check_params(&adopted, &offer)?;
            let media = match media {
                MediaBinding::Bound(conn) => conn,
                MediaBinding::Raw(conn) => {
                    let bind = timeout(sim, SIGNALING_STEP_TIMEOUT_US, conn.recv())
                        .await
                        .map_err(|_| ChannelError::SignalingTimeout)?
                        .ok_or(ChannelError::Closed)?;
                    if bind.len() != 12 || &bind[..4] != b"BIND" {
                        return Err(ChannelError::Protocol("bad media bind"));
                    }
                    if u64::from_be_bytes(bind[4..12].try_into().unwrap()) != session_id {
                        return Err(ChannelError::Protocol("bind session mismatch"));
                    }
                    conn
                }
            };
            recv_signal(sim, &signaling, SignalingType::Ready).await?;
            Ok(start_media_channel(
                sim,
                &adopted,
                Role::Receiver,
                signaling,
                media,
            ))
        }
    }
}

fn role_label(role: Role) -> &'static str {
    match role {
        Role::Initiator => "init",
        Role::Receiver => "resp",
    }
}

fn start_media_channel(
    sim: &Sim,
    cfg: &ChannelConfig,
    role: Role,
    signaling: ConnEnd,
    media: ConnEnd,
) -> Channel {
    let outbound: Mailbox<Vec<u8>> = Mailbox::new();
    let inbound: Mailbox<Vec<u8>> = Mailbox::new();
    let closed = Rc::new(Cell::new(false));
    let stats = Rc::new(ChannelStats::default());
    let last_activity = Rc::new(Cell::new(sim.now()));
    let queue = BlockQueue::with_default_capacity();
    let frame_interval = SECOND / u64::from(cfg.fps);

    // Packer: application bytes -> fixed-size blocks, with virtual-time
    // backpressure against the block queue.
    {
        let sim = sim.clone();
        let outbound = outbound.clone();
        let queue = queue.clone();
        let closed = Rc::clone(&closed);
        let block_size = cfg.block_size;
        sim.clone().spawn(async move {
            let mut packer = BlockPacker::new(1, block_size);
            while let Some(data) = outbound.recv().await {
                for mut block in packer.pack(&data) {
                    loop {
                        match queue.try_enqueue(block) {
                            Ok(()) => break,
                            Err(back) => {
                                if closed.get() {
                                    return;
                                }
                                block = back;
                                sim.sleep(frame_interval).await;
                            }
                        }
                    }
                }
            }
        });
    }

    // Video sender: unconditional cover cadence; covert payload rides along
    // when queued.
    {
        let sim = sim.clone();
        let media = media.clone();
        let queue = queue.clone();
        let closed = Rc::clone(&closed);
        let stats = Rc::clone(&stats);
        let mode = cfg.mode;
        let mut source = FrameSource::new(cfg, &format!("frames:{}", role_label(role)));
        let mut cursor = crate::codec::ReplaceCursor::new(crate::sim::label_seed(
            cfg.prng_seed,
            &format!("fill:{}", role_label(role)),
        ));
        let epoch = sim.now();
        sim.clone().spawn(async move {
            for tick in 0u64.. {
                sim.sleep_until(epoch + source.frame_time(tick)).await;
                if closed.get() {
                    media.close();
                    return;
                }
                let cover = source.next_frame();
                let frame = match mode {
                    EmbedMode::Add => match queue.try_dequeue() {
                        Some(block) => {
                            stats.blocks_sent.set(stats.blocks_sent.get() + 1);
                            encode_add(&cover, &block)
                        }
                        None => cover,
                    },
                    EmbedMode::Replace => {
                        let had_block = cursor.mid_block() || !queue.is_empty();
                        let out = encode_replace(&cover, &queue, &mut cursor);
                        if had_block {
                            stats.blocks_sent.set(stats.blocks_sent.get() + 1);
                        }
                        out
                    }
                };
                media.send(encode_video_packet(&frame));
                stats.frames_sent.set(stats.frames_sent.get() + 1);
            }
        });
    }

    // Audio sender: constant-rate side stream, never carries data.
    {
        let sim = sim.clone();
        let media = media.clone();
        let closed = Rc::clone(&closed);
        let stats = Rc::clone(&stats);
        let epoch = sim.now();
        let interval = SECOND / AUDIO_PACKETS_PER_SECOND;
        sim.clone().spawn(async move {
            for seq in 0u64.. {
                sim.sleep_until(epoch + seq * interval).await;
                if closed.get() {
                    return;
                }
                media.send(encode_audio_packet(seq, seq * interval));
                stats.audio_sent.set(stats.audio_sent.get() + 1);
            }
        });
    }

    // Receiver: frames -> fragments -> blocks -> byte stream.
    {
        let sim = sim.clone();
        let media = media.clone();
        let inbound = inbound.clone();
        let stats = Rc::clone(&stats);
        let last_activity = Rc::clone(&last_activity);
        let mode = cfg.mode;
        let block_size = cfg.block_size;
        sim.clone().spawn(async move {
            // The media flow is in-order, so fragments stream straight into
            // the byte pipeline without waiting for whole-block reassembly.
            let mut streamer = StreamingUnpacker::new(block_size);
            loop {
                let Some(pkt) = media.recv().await else {
                    inbound.close();
                    return;
                };
                last_activity.set(sim.now());
                match decode_media_packet(&pkt) {
                    Ok(MediaPacket::Audio { .. }) => {
                        stats.audio_received.set(stats.audio_received.get() + 1);
                    }
                    Ok(MediaPacket::Video(frame)) => {
                        stats.frames_received.set(stats.frames_received.get() + 1);
                        let decoded = decode_frame(&frame, mode, block_size);
                        stats
                            .checksum_drops
                            .set(stats.checksum_drops.get() + u64::from(decoded.checksum_drops));
                        for (header, payload) in decoded.fragments {
                            let bytes = streamer.push_fragment(&header, &payload);
                            if !bytes.is_empty() {
                                inbound.send(bytes);
                            }
                        }
                        stats.blocks_received.set(streamer.blocks_completed());
                        stats.blocks_abandoned.set(streamer.desyncs());
                    }
                    Err(_) => {
                        stats.checksum_drops.set(stats.checksum_drops.get() + 1);
                    }
                }
            }
        });
    }

    Channel {
        cfg: cfg.clone(),
        outbound,
        inbound,
        closed,
        stats,
        last_activity,
        conns: vec![signaling, media],
    }
}

fn auth_payload(tag: &[u8], block_size: usize) -> Vec<u8> {
    let mut out = tag.to_vec();
    out.extend_from_slice(&(block_size as u32).to_be_bytes());
    out
}

fn parse_auth(plain: &[u8], tag: &[u8]) -> Option<usize> {
    if plain.len() != tag.len() + 4 || &plain[..tag.len()] != tag {
        return None;
    }
    let block = u32::from_be_bytes(plain[tag.len()..].try_into().ok()?);
    Some(block as usize)
}

async fn establish_tunnel(
    sim: &Sim,
    role: Role,
    cfg: &ChannelConfig,
    policy: ReceiverPolicy,
    conn: ConnEnd,
) -> Result<Channel, ChannelError> {
    let (seal_dir, open_dir) = match role {
        Role::Initiator => (DIR_INITIATOR, DIR_RESPONDER),
        Role::Receiver => (DIR_RESPONDER, DIR_INITIATOR),
    };
    let mut sealer = RecordSealer::new(&cfg.psk, seal_dir);
    let mut opener = RecordOpener::new(&cfg.psk, open_dir);
    let mut cfg = cfg.clone();

    match role {
        Role::Initiator => {
            conn.send(sealer.seal(&auth_payload(b"TKAUTH1", cfg.block_size)));
            let reply = timeout(sim, SIGNALING_STEP_TIMEOUT_US, conn.recv())
                .await
                .map_err(|_| ChannelError::SignalingTimeout)?
                .ok_or(ChannelError::AuthFailure)?;
            let plain = opener.open(&reply)?;
            if parse_auth(&plain, b"TKAUTH2") != Some(cfg.block_size) {
                conn.close();
                return Err(ChannelError::AuthFailure);
            }
        }
        Role::Receiver => {
            let first = timeout(sim, SIGNALING_STEP_TIMEOUT_US, conn.recv())
                .await
                .map_err(|_| ChannelError::SignalingTimeout)?
                .ok_or(ChannelError::AuthFailure)?;
            let offered = match opener.open(&first).ok().and_then(|p| parse_auth(&p, b"TKAUTH1")) {
                Some(block) => block,
                None => {
                    conn.close();
                    return Err(ChannelError::AuthFailure);
                }
            };
            match policy {
                ReceiverPolicy::Adopt => {
                    cfg.block_size = offered;
                    cfg.validate()
                        .map_err(|_| ChannelError::ParameterMismatch("block_size"))?;
                }
                ReceiverPolicy::Strict => {
                    if offered != cfg.block_size {
                        conn.close();
                        return Err(ChannelError::ParameterMismatch("block_size"));
                    }
                }
            }
            conn.send(sealer.seal(&auth_payload(b"TKAUTH2", cfg.block_size)));
        }
    }
    let cfg = &cfg;

    let outbound: Mailbox<Vec<u8>> = Mailbox::new();
    let inbound: Mailbox<Vec<u8>> = Mailbox::new();
    let closed = Rc::new(Cell::new(false));
    let stats = Rc::new(ChannelStats::default());
    let last_activity = Rc::new(Cell::new(sim.now()));

    // Writer: bytes -> blocks -> one sealed record per block fragment.
    {
        let outbound = outbound.clone();
        let conn = conn.clone();
        let stats = Rc::clone(&stats);
        let closed = Rc::clone(&closed);
        let block_size = cfg.block_size;
        sim.spawn(async move {
            let mut packer = BlockPacker::new(1, block_size);
            while let Some(data) = outbound.recv().await {
                if closed.get() {
                    return;
                }
                for block in packer.pack(&data) {
                    let frags = fragment(&block, block.payload.len() + FRAGMENT_HEADER_LEN)
                        .expect("capacity above minimum");
                    for (header, payload) in frags {
                        let mut plain = Vec::with_capacity(FRAGMENT_HEADER_LEN + payload.len());
                        plain.extend_from_slice(&header.encode());
                        plain.extend_from_slice(&payload);
                        conn.send(sealer.seal(&plain));
                        stats.records_sent.set(stats.records_sent.get() + 1);
                    }
                    stats.blocks_sent.set(stats.blocks_sent.get() + 1);
                }
            }
            conn.close();
        });
    }

    // Reader: records -> fragments -> blocks -> byte stream. Any
    // authentication failure tears the tunnel down.
    {
        let sim = sim.clone();
        let conn = conn.clone();
        let inbound = inbound.clone();
        let closed = Rc::clone(&closed);
        let stats = Rc::clone(&stats);
        let last_activity = Rc::clone(&last_activity);
        sim.clone().spawn(async move {
            // Records authenticate in order, so fragments stream directly.
            let mut streamer: Option<StreamingUnpacker> = None;
            loop {
                let Some(pkt) = conn.recv().await else {
                    inbound.close();
                    return;
                };
                last_activity.set(sim.now());
                let plain = match opener.open(&pkt) {
                    Ok(p) => p,
                    Err(_) => {
                        closed.set(true);
                        conn.close();
                        inbound.close();
                        return;
                    }
                };
                stats.records_received.set(stats.records_received.get() + 1);
                if plain.len() < FRAGMENT_HEADER_LEN {
                    stats.checksum_drops.set(stats.checksum_drops.get() + 1);
                    continue;
                }
                match FragmentHeader::decode(&plain[..FRAGMENT_HEADER_LEN]) {
                    Ok(header) => {
                        if header.verify_checksum(&plain[FRAGMENT_HEADER_LEN..]).is_err() {
                            stats.checksum_drops.set(stats.checksum_drops.get() + 1);
                            continue;
                        }
                        // The peer's block size is adopted from its stream.
                        let streamer = streamer.get_or_insert_with(|| {
                            StreamingUnpacker::new(usize::from(header.payload_len))
                        });
                        let bytes =
                            streamer.push_fragment(&header, &plain[FRAGMENT_HEADER_LEN..]);
                        if !bytes.is_empty() {
                            inbound.send(bytes);
                        }
                        stats.blocks_received.set(streamer.blocks_completed());
                    }
                    Err(_) => {
                        stats.checksum_drops.set(stats.checksum_drops.get() + 1);
                    }
                }
            }
        });
    }

    Ok(Channel {
        cfg: cfg.clone(),
        outbound,
        inbound,
        closed,
        stats,
        last_activity,
        conns: vec![conn],
    })
}
