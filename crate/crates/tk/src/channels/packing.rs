//! Packing an application byte stream into fixed-size blocks and back.
//!
//! Block payloads hold a sequence of `[len:u16 BE][bytes]` chunks; a zero
//! length (or fewer than 3 free bytes) marks the rest of the block as
//! padding. Each `pack` call flushes immediately — a short write becomes one
//! zero-padded block rather than waiting for more data — which keeps
//! first-byte latency low at the cost of padding overhead.

use std::collections::BTreeMap;

use crate::codec::DataBlock;

const CHUNK_PREFIX: usize = 2;

/// Cuts a byte stream into fixed-size [`DataBlock`]s.
pub struct BlockPacker {
    stream_id: u32,
    block_size: usize,
    next_seq: u32,
}

impl BlockPacker {
    pub fn new(stream_id: u32, block_size: usize) -> Self {
        assert!(block_size > CHUNK_PREFIX);
        BlockPacker {
            stream_id,
            block_size,
            next_seq: 0,
        }
    }

    pub fn blocks_produced(&self) -> u32 {
        self.next_seq
    }

    /// Pack `data` into blocks. Empty input produces nothing.
    pub fn pack(&mut self, data: &[u8]) -> Vec<DataBlock> {
        let mut blocks = Vec::new();
        let mut offset = 0;
        while offset < data.len() {
            let mut payload = Vec::with_capacity(self.block_size);
            while offset < data.len() && payload.len() + CHUNK_PREFIX < self.block_size {
                let space = self.block_size - payload.len() - CHUNK_PREFIX;
                let take = space.min(data.len() - offset);
                payload.extend_from_slice(&(take as u16).to_be_bytes());
                payload.extend_from_slice(&data[offset..offset + take]);
                offset += take;
            }
            if payload.len() + CHUNK_PREFIX <= self.block_size {
                payload.extend_from_slice(&0u16.to_be_bytes());
            }
            payload.resize(self.block_size, 0);
            blocks.push(DataBlock::new(self.stream_id, self.next_seq, payload));
            self.next_seq += 1;
        }
        blocks
    }
}

/// Inverse of [`BlockPacker`]: consumes blocks (buffering any that arrive
/// out of sequence) and yields the original byte stream.
pub struct BlockUnpacker {
    next_seq: u32,
    held: BTreeMap<u32, DataBlock>,
}

impl BlockUnpacker {
    pub fn new() -> Self {
        BlockUnpacker {
            next_seq: 0,
            held: BTreeMap::new(),
        }
    }

    /// Feed one block; returns in-order stream bytes now available.
    pub fn push(&mut self, block: DataBlock) -> Vec<u8> {
        if block.block_seq != self.next_seq {
            self.held.insert(block.block_seq, block);
            return Vec::new();
        }
        let mut out = Vec::new();
        Self::extract(&block.payload, &mut out);
        self.next_seq = self.next_seq.wrapping_add(1);
        while let Some(next) = self.held.remove(&self.next_seq) {
            Self::extract(&next.payload, &mut out);
            self.next_seq = self.next_seq.wrapping_add(1);
        }
        out
    }

    fn extract(payload: &[u8], out: &mut Vec<u8>) {
        let mut pos = 0;
        while pos + CHUNK_PREFIX <= payload.len() {
            let len = u16::from_be_bytes([payload[pos], payload[pos + 1]]) as usize;
            if len == 0 {
                break;
            }
            let end = (pos + CHUNK_PREFIX + len).min(payload.len());
            out.extend_from_slice(&payload[pos + CHUNK_PREFIX..end]);
            pos = end;
        }
    }
}

impl Default for BlockUnpacker {
    fn default() -> Self {
        Self::new()
    }
}

/// Streaming variant for in-order carriers: emits chunk bytes as fragments
/// arrive rather than waiting for whole-block reassembly, which keeps
/// first-byte latency independent of the block size. A fragment-sequence
/// break discards the in-flight block and resynchronizes at the next
/// block's first fragment.
pub struct StreamingUnpacker {
    block_size: usize,
    current: Option<BlockScan>,
    desyncs: u64,
    blocks_completed: u64,
}

struct BlockScan {
    block_seq: u32,
    next_frag: u16,
    consumed: usize,
    chunk_remaining: usize,
    len_buf: [u8; 2],
    len_have: usize,
    padding: bool,
}

impl StreamingUnpacker {
    pub fn new(block_size: usize) -> Self {
        StreamingUnpacker {
            block_size,
            current: None,
            desyncs: 0,
            blocks_completed: 0,
        }
    }

    /// Blocks fully consumed so far.
    pub fn blocks_completed(&self) -> u64 {
        self.blocks_completed
    }

    /// Fragments dropped due to sequence breaks (lost carrier units).
    pub fn desyncs(&self) -> u64 {
        self.desyncs
    }

    /// Feed one covert fragment in arrival order; returns stream bytes.
    pub fn push_fragment(
        &mut self,
        header: &crate::codec::FragmentHeader,
        payload: &[u8],
    ) -> Vec<u8> {
        if header.payload_len == 0 {
            return Vec::new();
        }
        let in_sync = matches!(&self.current, Some(cur)
            if cur.block_seq == header.block_seq && cur.next_frag == header.frag_index);
        if !in_sync {
            if self.current.is_some() {
                self.desyncs += 1;
                self.current = None;
            }
            if header.frag_index != 0 {
                self.desyncs += 1;
                return Vec::new();
            }
            self.current = Some(BlockScan {
                block_seq: header.block_seq,
                next_frag: 0,
                consumed: 0,
                chunk_remaining: 0,
                len_buf: [0; 2],
                len_have: 0,
                padding: false,
            });
        }
        let cur = self.current.as_mut().expect("set above");
        let mut out = Vec::new();
        for &b in payload {
            if cur.padding {
                // Rest of the block is fill.
            } else if cur.chunk_remaining > 0 {
                out.push(b);
                cur.chunk_remaining -= 1;
            } else if cur.len_have < 2 {
                cur.len_buf[cur.len_have] = b;
                cur.len_have += 1;
                if cur.len_have == 2 {
                    let len = u16::from_be_bytes(cur.len_buf) as usize;
                    cur.len_have = 0;
                    if len == 0 {
                        cur.padding = true;
                    } else {
                        cur.chunk_remaining = len;
                    }
                }
            }
        }
        cur.consumed += payload.len();
        cur.next_frag += 1;
        if cur.consumed >= self.block_size {
            // A lone trailing length byte is padding by construction.
            self.current = None;
            self.blocks_completed += 1;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn short_write_becomes_one_padded_block() {
        let mut packer = BlockPacker::new(1, 536);
        let blocks = packer.pack(b"hi");
        assert_eq!(blocks.len(), 1);
        assert_eq!(blocks[0].payload.len(), 536);
        let mut unpacker = BlockUnpacker::new();
        assert_eq!(unpacker.push(blocks[0].clone()), b"hi");
    }

    #[test]
    fn empty_write_is_a_no_op() {
        let mut packer = BlockPacker::new(1, 536);
        assert!(packer.pack(&[]).is_empty());
    }

    #[test]
    fn large_write_spans_blocks_and_reorders() {
        let data: Vec<u8> = (0..5_000).map(|i| (i % 256) as u8).collect();
        let mut packer = BlockPacker::new(1, 536);
        let mut blocks = packer.pack(&data);
        assert_eq!(blocks.len(), 5_000usize.div_ceil(534));
        blocks.reverse();
        let mut unpacker = BlockUnpacker::new();
        let mut out = Vec::new();
        for b in blocks {
            out.extend(unpacker.push(b));
        }
        assert_eq!(out, data);
    }

    proptest! {
        /// Carrier transparency at the packing layer: any sequence of writes
        /// (including empty and larger-than-block) survives bit-exactly.
        #[test]
        fn stream_round_trip(
            writes in proptest::collection::vec(
                proptest::collection::vec(any::<u8>(), 0..3000), 0..20),
            size_pick in 0usize..4,
        ) {
            let block_size = crate::codec::DEFAULT_BLOCK_SIZES[size_pick];
            let mut packer = BlockPacker::new(3, block_size);
            let mut unpacker = BlockUnpacker::new();
            let mut sent = Vec::new();
            let mut received = Vec::new();
            for w in &writes {
                sent.extend_from_slice(w);
                for b in packer.pack(w) {
                    prop_assert_eq!(b.payload.len(), block_size);
                    received.extend(unpacker.push(b));
                }
            }
            prop_assert_eq!(received, sent);
        }
    }
}
