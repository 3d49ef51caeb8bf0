//! Fragment wire format, splitting, and reassembly.
//!
//! ## Wire format (20 bytes, big-endian)
//!
//! | field       | bytes | notes                                   |
//! |-------------|-------|-----------------------------------------|
//! | magic       | 2     | `0x544B` ("TK")                         |
//! | stream_id   | 4     |                                         |
//! | block_seq   | 4     |                                         |
//! | frag_index  | 2     |                                         |
//! | frag_count  | 2     | `0xFFFF` = count not yet known          |
//! | payload_len | 2     | 0 marks pure cover fill                 |
//! | checksum    | 4     | CRC-32 over header (checksum zeroed) ++ payload |
//!
//! Fixed-capacity splitting ([`fragment`]) always writes exact counts.
//! Streaming splitting across variable-size carriers (REPLACE mode) cannot
//! know the count up front, so non-final fragments carry
//! [`FRAG_COUNT_STREAMED`] and the final fragment declares the true count.

use std::collections::BTreeMap;

use super::{CodecError, DataBlock};

/// "TK" marker leading every fragment header.
pub const MAGIC: u16 = 0x544B;

/// Serialized header length.
pub const FRAGMENT_HEADER_LEN: usize = 20;

/// `frag_count` sentinel while the final count is still unknown.
pub const FRAG_COUNT_STREAMED: u16 = 0xFFFF;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FragmentHeader {
    pub stream_id: u32,
    pub block_seq: u32,
    pub frag_index: u16,
    pub frag_count: u16,
    pub payload_len: u16,
    pub checksum: u32,
}

impl FragmentHeader {
    /// Build a header with the checksum computed over itself and `payload`.
    pub fn sealed(
        stream_id: u32,
        block_seq: u32,
        frag_index: u16,
        frag_count: u16,
        payload: &[u8],
    ) -> Self {
        let mut h = FragmentHeader {
            stream_id,
            block_seq,
            frag_index,
            frag_count,
            payload_len: payload.len() as u16,
            checksum: 0,
        };
        h.checksum = h.compute_checksum(payload);
        h
    }

    pub fn encode(&self) -> [u8; FRAGMENT_HEADER_LEN] {
        let mut out = [0u8; FRAGMENT_HEADER_LEN];
        out[0..2].copy_from_slice(&MAGIC.to_be_bytes());
        out[2..6].copy_from_slice(&self.stream_id.to_be_bytes());
        out[6..10].copy_from_slice(&self.block_seq.to_be_bytes());
        out[10..12].copy_from_slice(&self.frag_index.to_be_bytes());
        out[12..14].copy_from_slice(&self.frag_count.to_be_bytes());
        out[14..16].copy_from_slice(&self.payload_len.to_be_bytes());
        out[16..20].copy_from_slice(&self.checksum.to_be_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        if bytes.len() < FRAGMENT_HEADER_LEN {
            return Err(CodecError::MalformedHeader("short header"));
        }
        let magic = u16::from_be_bytes([bytes[0], bytes[1]]);
        if magic != MAGIC {
            return Err(CodecError::MalformedHeader("bad magic"));
        }
        let h = FragmentHeader {
            stream_id: u32::from_be_bytes([bytes[2], bytes[3], bytes[4], bytes[5]]),
            block_seq: u32::from_be_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]),
            frag_index: u16::from_be_bytes([bytes[10], bytes[11]]),
            frag_count: u16::from_be_bytes([bytes[12], bytes[13]]),
            payload_len: u16::from_be_bytes([bytes[14], bytes[15]]),
            checksum: u32::from_be_bytes([bytes[16], bytes[17], bytes[18], bytes[19]]),
        };
        if h.frag_count == 0 {
            return Err(CodecError::MalformedHeader("zero frag_count"));
        }
        if h.frag_count != FRAG_COUNT_STREAMED && h.frag_index >= h.frag_count {
            return Err(CodecError::MalformedHeader("frag_index out of range"));
        }
        Ok(h)
    }

    /// CRC-32 over the header with a zeroed checksum field, then the payload.
    pub fn compute_checksum(&self, payload: &[u8]) -> u32 {
        let mut zeroed = *self;
        zeroed.checksum = 0;
        let mut hasher = crc32fast::Hasher::new();
        hasher.update(&zeroed.encode());
        hasher.update(payload);
        hasher.finalize()
    }

    pub fn verify_checksum(&self, payload: &[u8]) -> Result<(), CodecError> {
        if payload.len() != usize::from(self.payload_len) {
            return Err(self.checksum_error());
        }
        if self.compute_checksum(payload) != self.checksum {
            return Err(self.checksum_error());
        }
        Ok(())
    }

    fn checksum_error(&self) -> CodecError {
        CodecError::ChecksumMismatch {
            stream_id: self.stream_id,
            block_seq: self.block_seq,
            frag_index: self.frag_index,
        }
    }

    /// True when this header announces the block's total fragment count.
    pub fn declares_count(&self) -> bool {
        self.frag_count != FRAG_COUNT_STREAMED
    }
}

/// Split a block for carriers of fixed `capacity` bytes. Every fragment
/// except possibly the last carries `capacity - 20` payload bytes.
pub fn fragment(
    block: &DataBlock,
    capacity: usize,
) -> Result<Vec<(FragmentHeader, Vec<u8>)>, CodecError> {
    if capacity < FRAGMENT_HEADER_LEN + 1 {
        return Err(CodecError::CapacityTooSmall(capacity));
    }
    let per_fragment = capacity - FRAGMENT_HEADER_LEN;
    let count = block.payload.len().div_ceil(per_fragment).max(1);
    let count_u16 =
        u16::try_from(count).map_err(|_| CodecError::CapacityTooSmall(capacity))?;
    if count_u16 == FRAG_COUNT_STREAMED {
        return Err(CodecError::CapacityTooSmall(capacity));
    }
    let mut out = Vec::with_capacity(count);
    for (index, chunk) in block.payload.chunks(per_fragment).enumerate() {
        let header = FragmentHeader::sealed(
            block.stream_id,
            block.block_seq,
            index as u16,
            count_u16,
            chunk,
        );
        out.push((header, chunk.to_vec()));
    }
    if out.is_empty() {
        // Zero-length block still travels as one empty fragment.
        let header =
            FragmentHeader::sealed(block.stream_id, block.block_seq, 0, 1, &[]);
        out.push((header, Vec::new()));
    }
    Ok(out)
}

/// Rebuild a block from an unordered fragment set. Duplicates are ignored;
/// any checksum failure or identity mismatch is an error.
pub fn reassemble(fragments: &[(FragmentHeader, Vec<u8>)]) -> Result<DataBlock, CodecError> {
    let Some((first, _)) = fragments.first() else {
        return Err(CodecError::InconsistentFragments("empty fragment set"));
    };
    let (stream_id, block_seq) = (first.stream_id, first.block_seq);
    let mut total: Option<u16> = None;
    let mut parts: BTreeMap<u16, &[u8]> = BTreeMap::new();
    for (header, payload) in fragments {
        if header.stream_id != stream_id || header.block_seq != block_seq {
            return Err(CodecError::InconsistentFragments("mixed block identity"));
        }
        header.verify_checksum(payload)?;
        if header.declares_count() {
            let declared = header.frag_count;
            if *total.get_or_insert(declared) != declared {
                return Err(CodecError::InconsistentFragments("conflicting frag_count"));
            }
        }
        parts.entry(header.frag_index).or_insert(payload.as_slice());
    }
    let Some(total) = total else {
        return Err(CodecError::IncompleteBlock {
            stream_id,
            block_seq,
        });
    };
    if parts.len() != usize::from(total)
        || parts.keys().last() != Some(&(total - 1))
    {
        return Err(CodecError::IncompleteBlock {
            stream_id,
            block_seq,
        });
    }
    let mut payload = Vec::new();
    for part in parts.values() {
        payload.extend_from_slice(part);
    }
    Ok(DataBlock::new(stream_id, block_seq, payload))
}

/// Something the streaming reassembler wants the caller to know about.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReassemblyEvent {
    /// A block exceeded the timeout and was abandoned.
    Abandoned { stream_id: u32, block_seq: u32 },
    /// A fragment failed its CRC and was dropped.
    ChecksumDropped { stream_id: u32, block_seq: u32 },
}

struct PartialBlock {
    first_seen_us: u64,
    declared_total: Option<u16>,
    parts: BTreeMap<u16, Vec<u8>>,
}

struct StreamAssembly {
    blocks: BTreeMap<u32, PartialBlock>,
}

/// Streaming reassembler: buffers out-of-order fragments per stream, caps
/// in-flight blocks, and abandons blocks that stay incomplete too long.
pub struct Reassembler {
    max_in_flight: usize,
    timeout_us: u64,
    streams: BTreeMap<u32, StreamAssembly>,
    events: Vec<ReassemblyEvent>,
    checksum_drops: u64,
    abandoned: u64,
}

impl Reassembler {
    pub fn new(max_in_flight: usize, timeout_us: u64) -> Self {
        Reassembler {
            max_in_flight,
            timeout_us,
            streams: BTreeMap::new(),
            events: Vec::new(),
            checksum_drops: 0,
            abandoned: 0,
        }
    }

    pub fn with_defaults() -> Self {
        Self::new(super::DEFAULT_MAX_IN_FLIGHT, super::DEFAULT_REASSEMBLY_TIMEOUT_US)
    }

    pub fn checksum_drops(&self) -> u64 {
        self.checksum_drops
    }

    pub fn abandoned(&self) -> u64 {
        self.abandoned
    }

    /// Drain queued events (abandonments, CRC drops).
    pub fn take_events(&mut self) -> Vec<ReassemblyEvent> {
        std::mem::take(&mut self.events)
    }

    /// Feed one fragment. Returns completed blocks (usually zero or one).
    pub fn push(&mut self, now_us: u64, header: FragmentHeader, payload: Vec<u8>) -> Vec<DataBlock> {
        self.expire(now_us);
        if header.verify_checksum(&payload).is_err() {
            self.checksum_drops += 1;
            self.events.push(ReassemblyEvent::ChecksumDropped {
                stream_id: header.stream_id,
                block_seq: header.block_seq,
            });
            return Vec::new();
        }
        if header.payload_len == 0 {
            // Pure cover fill.
            return Vec::new();
        }
        let stream = self
            .streams
            .entry(header.stream_id)
            .or_insert_with(|| StreamAssembly {
                blocks: BTreeMap::new(),
            });
        if !stream.blocks.contains_key(&header.block_seq)
            && stream.blocks.len() >= self.max_in_flight
        {
            // Evict the stalest partial block to bound memory.
            let oldest = stream
                .blocks
                .iter()
                .min_by_key(|(seq, p)| (p.first_seen_us, **seq))
                .map(|(seq, _)| *seq);
            if let Some(seq) = oldest {
                stream.blocks.remove(&seq);
                self.abandoned += 1;
                self.events.push(ReassemblyEvent::Abandoned {
                    stream_id: header.stream_id,
                    block_seq: seq,
                });
            }
        }
        let partial = stream
            .blocks
            .entry(header.block_seq)
            .or_insert_with(|| PartialBlock {
                first_seen_us: now_us,
                declared_total: None,
                parts: BTreeMap::new(),
            });
        if header.declares_count() {
            partial.declared_total.get_or_insert(header.frag_count);
        }
        partial.parts.entry(header.frag_index).or_insert(payload);

        let complete = matches!(partial.declared_total, Some(total)
            if partial.parts.len() == usize::from(total)
                && partial.parts.keys().last() == Some(&(total - 1)));
        if !complete {
            return Vec::new();
        }
        let partial = stream.blocks.remove(&header.block_seq).unwrap();
        let mut payload = Vec::new();
        for part in partial.parts.values() {
            payload.extend_from_slice(part);
        }
        vec![DataBlock::new(header.stream_id, header.block_seq, payload)]
    }

    /// Abandon blocks older than the timeout.
    pub fn expire(&mut self, now_us: u64) {
        for (stream_id, stream) in self.streams.iter_mut() {
            let stale: Vec<u32> = stream
                .blocks
                .iter()
                .filter(|(_, p)| now_us.saturating_sub(p.first_seen_us) > self.timeout_us)
                .map(|(seq, _)| *seq)
                .collect();
            for seq in stale {
                stream.blocks.remove(&seq);
                self.abandoned += 1;
                self.events.push(ReassemblyEvent::Abandoned {
                    stream_id: *stream_id,
                    block_seq: seq,
                });
            }
        }
    }
}
