//! Deterministic conference-stream emulation: the video frame source and
//! the packetization of frames / audio onto the transport.
//!
//! Frame `i` is emitted at `i * 1_000_000 / fps` microseconds after the
//! channel epoch. Every `key_frame_interval`-th frame is a KEY frame of
//! fixed size; the rest are DELTA frames with truncated-normal sizes drawn
//! from the channel's seeded generator, so a given seed always produces the
//! same (kind, size) sequence.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::codec::{FrameKind, MediaFrame};
use crate::sim::child_rng;

use super::{ChannelConfig, ChannelError};

pub const TRACK_AUDIO: u8 = 0;
pub const TRACK_VIDEO: u8 = 1;

/// Envelope prepended to every media packet on the transport.
pub const MEDIA_ENVELOPE_LEN: usize = 24;

/// Audio packets are constant-rate and constant-size.
pub const AUDIO_PACKET_LEN: usize = 120;
pub const AUDIO_PACKETS_PER_SECOND: u64 = 50;

/// Deterministic emulated video source.
pub struct FrameSource {
    fps: u32,
    key_frame_interval: u64,
    key_frame_size: usize,
    header_len: usize,
    size_dist: Normal<f64>,
    min_size: usize,
    max_size: usize,
    rng: rand_chacha::ChaCha12Rng,
    next_id: u64,
}

impl FrameSource {
    pub fn new(cfg: &ChannelConfig, label: &str) -> Self {
        FrameSource {
            fps: cfg.fps,
            key_frame_interval: u64::from(cfg.key_frame_interval),
            key_frame_size: cfg.key_frame_size,
            header_len: cfg.frame_header_len,
            size_dist: Normal::new(cfg.delta_frame_mean, cfg.delta_frame_stddev)
                .expect("valid normal parameters"),
            min_size: cfg.delta_frame_min,
            max_size: cfg.delta_frame_max,
            rng: child_rng(cfg.prng_seed, label),
            next_id: 0,
        }
    }

    /// Emission instant of frame `idx`, relative to the channel epoch.
    pub fn frame_time(&self, idx: u64) -> u64 {
        idx * 1_000_000 / u64::from(self.fps)
    }

    pub fn next_index(&self) -> u64 {
        self.next_id
    }

    /// Produce the next cover frame.
    pub fn next_frame(&mut self) -> MediaFrame {
        let id = self.next_id;
        self.next_id += 1;
        let kind = if id % self.key_frame_interval == 0 {
            FrameKind::Key
        } else {
            FrameKind::Delta
        };
        let total = match kind {
            FrameKind::Key => self.key_frame_size,
            FrameKind::Delta => self.sample_delta_size(),
        };
        let payload_len = total.saturating_sub(self.header_len);
        let mut header_bytes = vec![0u8; self.header_len];
        if self.header_len >= 12 {
            header_bytes[0] = 0x9C;
            header_bytes[1] = match kind {
                FrameKind::Key => 1,
                FrameKind::Delta => 0,
            };
            header_bytes[2..10].copy_from_slice(&id.to_be_bytes());
        }
        let mut payload = vec![0u8; payload_len];
        self.rng.fill(&mut payload[..]);
        MediaFrame {
            frame_id: id,
            kind,
            header_bytes,
            payload,
            timestamp_us: self.frame_time(id),
        }
    }

    /// Truncated normal via rejection sampling, so the bounds hold for
    /// every generated frame.
    fn sample_delta_size(&mut self) -> usize {
        loop {
            let draw = self.size_dist.sample(&mut self.rng);
            if draw >= self.min_size as f64 && draw <= self.max_size as f64 {
                return draw.round() as usize;
            }
        }
    }
}

/// Serialize a video frame for the transport:
/// `[track:1][kind:1][frame_id:8][timestamp:8][header_len:2][payload_len:4]`
/// then header bytes and payload.
pub fn encode_video_packet(frame: &MediaFrame) -> Vec<u8> {
    let mut out = Vec::with_capacity(MEDIA_ENVELOPE_LEN + frame.total_len());
    out.push(TRACK_VIDEO);
    out.push(match frame.kind {
        FrameKind::Key => 1,
        FrameKind::Delta => 0,
    });
    out.extend_from_slice(&frame.frame_id.to_be_bytes());
    out.extend_from_slice(&frame.timestamp_us.to_be_bytes());
    out.extend_from_slice(&(frame.header_bytes.len() as u16).to_be_bytes());
    out.extend_from_slice(&(frame.payload.len() as u32).to_be_bytes());
    out.extend_from_slice(&frame.header_bytes);
    out.extend_from_slice(&frame.payload);
    out
}

/// Fixed-size audio packet (never carries covert data).
pub fn encode_audio_packet(seq: u64, timestamp_us: u64) -> Vec<u8> {
    let mut out = Vec::with_capacity(AUDIO_PACKET_LEN);
    out.push(TRACK_AUDIO);
    out.push(0);
    out.extend_from_slice(&seq.to_be_bytes());
    out.extend_from_slice(&timestamp_us.to_be_bytes());
    out.extend_from_slice(&0u16.to_be_bytes());
    out.extend_from_slice(&((AUDIO_PACKET_LEN - MEDIA_ENVELOPE_LEN) as u32).to_be_bytes());
    out.resize(AUDIO_PACKET_LEN, 0x5A);
    out
}

/// Parsed transport packet.
pub enum MediaPacket {
    Video(MediaFrame),
    Audio { seq: u64 },
}

pub fn decode_media_packet(wire: &[u8]) -> Result<MediaPacket, ChannelError> {
    if wire.len() < MEDIA_ENVELOPE_LEN {
        return Err(ChannelError::Protocol("short media packet"));
    }
    let track = wire[0];
    let kind = wire[1];
    let frame_id = u64::from_be_bytes(wire[2..10].try_into().unwrap());
    let timestamp_us = u64::from_be_bytes(wire[10..18].try_into().unwrap());
    let header_len = u16::from_be_bytes(wire[18..20].try_into().unwrap()) as usize;
    let payload_len = u32::from_be_bytes(wire[20..24].try_into().unwrap()) as usize;
    if track == TRACK_AUDIO {
        return Ok(MediaPacket::Audio { seq: frame_id });
    }
    if wire.len() != MEDIA_ENVELOPE_LEN + header_len + payload_len {
        return Err(ChannelError::Protocol("media packet length mismatch"));
    }
    let header_bytes = wire[MEDIA_ENVELOPE_LEN..MEDIA_ENVELOPE_LEN + header_len].to_vec();
    let payload = wire[MEDIA_ENVELOPE_LEN + header_len..].to_vec();
    Ok(MediaPacket::Video(MediaFrame {
        frame_id,
        kind: if kind == 1 {
            FrameKind::Key
        } else {
            FrameKind::Delta
        },
        header_bytes,
        payload,
        timestamp_us,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channels::Carrier;

    fn cfg(seed: u64) -> ChannelConfig {
        ChannelConfig {
            carrier: Carrier::Media,
            prng_seed: seed,
            ..ChannelConfig::default()
        }
    }

    #[test]
    fn same_seed_same_size_sequence() {
        let sizes = |seed| {
            let mut src = FrameSource::new(&cfg(seed), "frames");
            (0..300).map(|_| src.next_frame().total_len()).collect::<Vec<_>>()
        };
        assert_eq!(sizes(5), sizes(5));
        assert_ne!(sizes(5), sizes(6));
    }

    #[test]
    fn key_frames_at_interval_under_defaults() {
        let mut src = FrameSource::new(&cfg(1), "frames");
        let frames: Vec<MediaFrame> = (0..301).map(|_| src.next_frame()).collect();
        assert_eq!(frames[0].kind, FrameKind::Key);
        assert_eq!(frames[0].total_len(), 12_000);
        assert_eq!(frames[150].kind, FrameKind::Key);
        assert_eq!(frames[300].kind, FrameKind::Key);
        assert!(frames[1..150].iter().all(|f| f.kind == FrameKind::Delta));
    }

    #[test]
    fn delta_sizes_respect_truncation_and_mean() {
        let mut src = FrameSource::new(&cfg(99), "frames");
        let mut sum = 0f64;
        let mut count = 0u64;
        for _ in 0..10_050 {
            let f = src.next_frame();
            if f.kind == FrameKind::Delta {
                let len = f.total_len();
                assert!((100..=4000).contains(&len), "delta size {len} out of bounds");
                sum += len as f64;
                count += 1;
            }
        }
        let mean = sum / count as f64;
        assert!(
            (mean - 1200.0).abs() <= 30.0,
            "mean delta size {mean} outside 1200 +/- 30"
        );
    }

    #[test]
    fn cadence_is_exact_on_the_virtual_clock() {
        let src = FrameSource::new(&cfg(1), "frames");
        assert_eq!(src.frame_time(0), 0);
        assert_eq!(src.frame_time(30), 1_000_000);
        assert_eq!(src.frame_time(90), 3_000_000);
    }

    #[test]
    fn video_packet_round_trip_and_audio_size() {
        let mut src = FrameSource::new(&cfg(4), "frames");
        let frame = src.next_frame();
        let wire = encode_video_packet(&frame);
        match decode_media_packet(&wire).unwrap() {
            MediaPacket::Video(f) => assert_eq!(f, frame),
            _ => panic!("expected video"),
        }
        assert_eq!(encode_audio_packet(3, 60_000).len(), AUDIO_PACKET_LEN);
    }
}
