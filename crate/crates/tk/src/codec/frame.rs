//! Embedding blocks into emulated media frames.
//!
//! `ADD` appends one whole block (header + payload) behind the frame's
//! existing content, growing it by exactly `20 + block_size` bytes. `REPLACE`
//! overwrites the frame payload in place: a fragment header, as many covert
//! bytes as fit, then seeded pseudorandom cover fill — so a loaded frame and
//! an idle frame are byte-length-identical and the decoder needs no side
//! channel. REPLACE never changes a frame's total length.

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

use super::fragment::{FragmentHeader, FRAGMENT_HEADER_LEN, FRAG_COUNT_STREAMED};
use super::queue::BlockQueue;
use super::DataBlock;

/// Embedding mode for the media carrier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedMode {
    Add,
    Replace,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameKind {
    Key,
    Delta,
}

/// Emulated video-conference frame: opaque codec header plus payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MediaFrame {
    pub frame_id: u64,
    pub kind: FrameKind,
    pub header_bytes: Vec<u8>,
    pub payload: Vec<u8>,
    pub timestamp_us: u64,
}

impl MediaFrame {
    pub fn total_len(&self) -> usize {
        self.header_bytes.len() + self.payload.len()
    }
}

/// Append one whole block to the frame. ADD never fragments; the frame
/// grows by `20 + block_size` bytes and its header is untouched.
pub fn encode_add(frame: &MediaFrame, block: &DataBlock) -> MediaFrame {
    let header = FragmentHeader::sealed(block.stream_id, block.block_seq, 0, 1, &block.payload);
    let mut out = frame.clone();
    out.payload.reserve(FRAGMENT_HEADER_LEN + block.payload.len());
    out.payload.extend_from_slice(&header.encode());
    out.payload.extend_from_slice(&block.payload);
    out
}

struct InFlightBlock {
    block: DataBlock,
    offset: usize,
    next_index: u16,
}

/// Fragmentation state carried across successive REPLACE frames, plus the
/// channel's cover-fill generator.
pub struct ReplaceCursor {
    current: Option<InFlightBlock>,
    fill_rng: ChaCha12Rng,
}

impl ReplaceCursor {
    pub fn new(fill_seed: u64) -> Self {
        ReplaceCursor {
            current: None,
            fill_rng: ChaCha12Rng::seed_from_u64(fill_seed),
        }
    }

    /// True when a partially sent block is in flight.
    pub fn mid_block(&self) -> bool {
        self.current.is_some()
    }
}

/// Rewrite a frame's payload with the next covert fragment (or pure cover
/// fill when idle). The output frame has exactly the input's total length.
/// Frames too small for a header (< 21 payload bytes) pass through
/// untouched and carry no data.
pub fn encode_replace(
    frame: &MediaFrame,
    queue: &BlockQueue,
    cursor: &mut ReplaceCursor,
) -> MediaFrame {
    let payload_len = frame.payload.len();
    if payload_len < FRAGMENT_HEADER_LEN + 1 {
        return frame.clone();
    }
    let capacity = payload_len - FRAGMENT_HEADER_LEN;

    if cursor.current.is_none() {
        cursor.current = queue.try_dequeue().map(|block| InFlightBlock {
            block,
            offset: 0,
            next_index: 0,
        });
    }

    let (header, covert): (FragmentHeader, &[u8]) = match cursor.current.as_mut() {
        None => {
            // Idle: zero-length fragment, everything after the header is fill.
            let header = FragmentHeader::sealed(0, 0, 0, 1, &[]);
            (header, &[])
        }
        Some(inflight) => {
            let remaining = inflight.block.payload.len() - inflight.offset;
            let take = remaining.min(capacity);
            let bytes = &inflight.block.payload[inflight.offset..inflight.offset + take];
            let is_final = take == remaining;
            let frag_count = if is_final {
                inflight.next_index + 1
            } else {
                FRAG_COUNT_STREAMED
            };
            let header = FragmentHeader::sealed(
                inflight.block.stream_id,
                inflight.block.block_seq,
                inflight.next_index,
                frag_count,
                bytes,
            );
            inflight.offset += take;
            inflight.next_index += 1;
            (header, bytes)
        }
    };

    let mut payload = Vec::with_capacity(payload_len);
    payload.extend_from_slice(&header.encode());
    payload.extend_from_slice(covert);
    let mut fill = vec![0u8; payload_len - payload.len()];
    cursor.fill_rng.fill_bytes(&mut fill);
    payload.extend_from_slice(&fill);

    if let Some(inflight) = cursor.current.as_ref() {
        if inflight.offset == inflight.block.payload.len() {
            cursor.current = None;
        }
    }

    debug_assert_eq!(payload.len(), frame.payload.len());
    MediaFrame {
        frame_id: frame.frame_id,
        kind: frame.kind,
        header_bytes: frame.header_bytes.clone(),
        payload,
        timestamp_us: frame.timestamp_us,
    }
}

/// Result of decoding one received frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodedFrame {
    /// Extracted fragments (at most one per frame in either mode).
    pub fragments: Vec<(FragmentHeader, Vec<u8>)>,
    /// ADD mode only: the original cover frame, restored byte-exactly.
    pub cover: Option<MediaFrame>,
    /// Fragments dropped on this frame due to CRC failure.
    pub checksum_drops: u32,
}

/// Inverse of the encoders. `block_size` is the channel's configured block
/// size (needed to locate ADD attachments). Cover-fill fragments
/// (`payload_len == 0`) are swallowed.
pub fn decode_frame(frame: &MediaFrame, mode: EmbedMode, block_size: usize) -> DecodedFrame {
    match mode {
        EmbedMode::Add => decode_add(frame, block_size),
        EmbedMode::Replace => decode_replace(frame),
    }
}

fn decode_add(frame: &MediaFrame, block_size: usize) -> DecodedFrame {
    let attachment_len = FRAGMENT_HEADER_LEN + block_size;
    if frame.payload.len() >= attachment_len {
        let offset = frame.payload.len() - attachment_len;
        let header_bytes = &frame.payload[offset..offset + FRAGMENT_HEADER_LEN];
        if let Ok(header) = FragmentHeader::decode(header_bytes) {
            let payload = &frame.payload[offset + FRAGMENT_HEADER_LEN..];
            if usize::from(header.payload_len) == block_size
                && header.verify_checksum(payload).is_ok()
            {
                let mut cover = frame.clone();
                cover.payload.truncate(offset);
                return DecodedFrame {
                    fragments: vec![(header, payload.to_vec())],
                    cover: Some(cover),
                    checksum_drops: 0,
                };
            }
        }
    }
    // No valid attachment: the frame is pure cover and passes through.
    DecodedFrame {
        fragments: Vec::new(),
        cover: Some(frame.clone()),
        checksum_drops: 0,
    }
}

fn decode_replace(frame: &MediaFrame) -> DecodedFrame {
    let mut out = DecodedFrame {
        fragments: Vec::new(),
        cover: None,
        checksum_drops: 0,
    };
    if frame.payload.len() < FRAGMENT_HEADER_LEN + 1 {
        // Degenerate frame: passed through unmodified by the encoder.
        return out;
    }
    let header = match FragmentHeader::decode(&frame.payload[..FRAGMENT_HEADER_LEN]) {
        Ok(h) => h,
        Err(_) => {
            out.checksum_drops = 1;
            return out;
        }
    };
    let data_end = FRAGMENT_HEADER_LEN + usize::from(header.payload_len);
    if data_end > frame.payload.len() {
        out.checksum_drops = 1;
        return out;
    }
    let payload = &frame.payload[FRAGMENT_HEADER_LEN..data_end];
    if header.verify_checksum(payload).is_err() {
        out.checksum_drops = 1;
        return out;
    }
    if header.payload_len > 0 {
        out.fragments.push((header, payload.to_vec()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::fragment::Reassembler;
    use rand::Rng;

    fn frame(id: u64, payload_len: usize) -> MediaFrame {
        MediaFrame {
            frame_id: id,
            kind: FrameKind::Delta,
            header_bytes: vec![0xAA; 12],
            payload: (0..payload_len).map(|i| (i % 251) as u8).collect(),
            timestamp_us: id * 33_333,
        }
    }

    fn block(seq: u32, size: usize) -> DataBlock {
        DataBlock::new(7, seq, (0..size).map(|i| (i * 13 + 5) as u8).collect())
    }

    #[test]
    fn add_preserves_prefix_and_grows_exactly() {
        let f = frame(1, 8000);
        let b = block(0, 536);
        let out = encode_add(&f, &b);
        assert_eq!(out.payload.len(), 8000 + 20 + 536);
        assert_eq!(&out.payload[..8000], &f.payload[..]);
        assert_eq!(out.header_bytes, f.header_bytes);

        let big = block(1, 4134);
        let out = encode_add(&f, &big);
        assert_eq!(out.total_len() - f.total_len(), 20 + 4134);
    }

    #[test]
    fn add_round_trip_restores_cover_byte_exactly() {
        let f = frame(3, 1200);
        let b = block(9, 1050);
        let decoded = decode_frame(&encode_add(&f, &b), EmbedMode::Add, 1050);
        assert_eq!(decoded.fragments.len(), 1);
        let rebuilt = reassembleone(&decoded.fragments);
        assert_eq!(rebuilt, b);
        assert_eq!(decoded.cover.unwrap(), f);
    }

    fn reassembleone(frags: &[(FragmentHeader, Vec<u8>)]) -> DataBlock {
        crate::codec::fragment::reassemble(frags).unwrap()
    }

    #[test]
    fn add_frame_without_attachment_passes_through() {
        let f = frame(4, 2000);
        let decoded = decode_frame(&f, EmbedMode::Add, 536);
        assert!(decoded.fragments.is_empty());
        assert_eq!(decoded.cover.unwrap(), f);
    }

    #[test]
    fn replace_preserves_length_for_seeded_frame_sample() {
        let queue = BlockQueue::new(16);
        let mut cursor = ReplaceCursor::new(42);
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(1);
        for id in 0..10_000u64 {
            let len = rng.random_range(0..4000);
            let f = frame(id, len);
            if id % 3 == 0 {
                let _ = queue.try_enqueue(block(id as u32, 536));
            }
            let out = encode_replace(&f, &queue, &mut cursor);
            assert_eq!(out.total_len(), f.total_len(), "frame {id} length changed");
            assert_eq!(out.header_bytes, f.header_bytes);
        }
    }

    #[test]
    fn replace_idle_emits_zero_length_fragment() {
        let queue = BlockQueue::new(4);
        let mut cursor = ReplaceCursor::new(7);
        let f = frame(0, 1200);
        let out = encode_replace(&f, &queue, &mut cursor);
        assert_eq!(out.total_len(), f.total_len());
        let decoded = decode_frame(&out, EmbedMode::Replace, 536);
        assert!(decoded.fragments.is_empty());
        assert_eq!(decoded.checksum_drops, 0);
    }

    #[test]
    fn replace_fragments_block_across_frames_per_capacity() {
        let queue = BlockQueue::new(4);
        queue.try_enqueue(block(0, 2078)).unwrap();
        let mut cursor = ReplaceCursor::new(9);

        let f0 = frame(0, 1200);
        let out0 = encode_replace(&f0, &queue, &mut cursor);
        let d0 = decode_frame(&out0, EmbedMode::Replace, 2078);
        assert_eq!(d0.fragments[0].0.payload_len, 1180);
        assert!(!d0.fragments[0].0.declares_count());

        let f1 = frame(1, 1200);
        let out1 = encode_replace(&f1, &queue, &mut cursor);
        let d1 = decode_frame(&out1, EmbedMode::Replace, 2078);
        assert_eq!(d1.fragments[0].0.payload_len, 898);
        assert_eq!(d1.fragments[0].0.frag_count, 2);

        let mut asm = Reassembler::with_defaults();
        let (h0, p0) = d0.fragments[0].clone();
        let (h1, p1) = d1.fragments[0].clone();
        assert!(asm.push(0, h0, p0).is_empty());
        let done = asm.push(1, h1, p1);
        assert_eq!(done[0].payload, block(0, 2078).payload);
    }

    #[test]
    fn replace_small_frames_pass_through_untouched() {
        let queue = BlockQueue::new(4);
        queue.try_enqueue(block(0, 536)).unwrap();
        let mut cursor = ReplaceCursor::new(3);
        let f = frame(0, 20);
        let out = encode_replace(&f, &queue, &mut cursor);
        assert_eq!(out, f);
        assert!(queue.len() == 1 && !cursor.mid_block() || cursor.mid_block());
    }

    #[test]
    fn replace_round_trip_recovers_block_stream() {
        let queue = BlockQueue::new(2048);
        let mut cursor = ReplaceCursor::new(11);
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(2);
        let blocks: Vec<DataBlock> = (0..200).map(|i| block(i, 1050)).collect();
        for b in &blocks {
            queue.try_enqueue(b.clone()).unwrap();
        }
        let mut asm = Reassembler::with_defaults();
        let mut recovered = Vec::new();
        let mut id = 0u64;
        while recovered.len() < blocks.len() {
            let len = rng.random_range(0..3000);
            let f = frame(id, len);
            let out = encode_replace(&f, &queue, &mut cursor);
            let decoded = decode_frame(&out, EmbedMode::Replace, 1050);
            assert_eq!(decoded.checksum_drops, 0);
            for (h, p) in decoded.fragments {
                recovered.extend(asm.push(id, h, p));
            }
            id += 1;
            assert!(id < 10_000, "runaway: blocks not draining");
        }
        assert_eq!(recovered, blocks);
    }
}
