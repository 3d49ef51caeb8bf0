//! Byte-exact encapsulation of covert data blocks.
//!
//! A [`DataBlock`] is the fixed-size unit of covert payload. Blocks are cut
//! into fragments — each prefixed by a 20-byte [`FragmentHeader`] — and the
//! fragments ride inside carrier units: media-frame payloads
//! ([`encode_add`] / [`encode_replace`]) or tunnel records. Reassembly is
//! the exact inverse, with CRC-32 protection against corruption.

mod fragment;
mod frame;
mod queue;

pub use fragment::{
    fragment, reassemble, FragmentHeader, Reassembler, ReassemblyEvent, FRAGMENT_HEADER_LEN,
    FRAG_COUNT_STREAMED, MAGIC,
};
pub use frame::{
    decode_frame, encode_add, encode_replace, DecodedFrame, EmbedMode, FrameKind, MediaFrame,
    ReplaceCursor,
};
pub use queue::BlockQueue;

use thiserror::Error;

/// Block sizes enabled by default: 1, 2, 4, and 8 transport cells worth of
/// covert payload.
pub const DEFAULT_BLOCK_SIZES: [usize; 4] = [536, 1050, 2078, 4134];

/// Default bound on queued blocks awaiting a carrier.
pub const DEFAULT_QUEUE_CAPACITY: usize = 1024;

/// Default cap on concurrently reassembling blocks per stream.
pub const DEFAULT_MAX_IN_FLIGHT: usize = 64;

/// Default reassembly abandon timeout (virtual microseconds).
pub const DEFAULT_REASSEMBLY_TIMEOUT_US: u64 = 10_000_000;

/// The unit of covert payload handed to the encapsulator. `payload` always
/// has exactly the channel's configured block size; producers zero-pad.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataBlock {
    pub stream_id: u32,
    pub block_seq: u32,
    pub payload: Vec<u8>,
}

impl DataBlock {
    pub fn new(stream_id: u32, block_seq: u32, payload: Vec<u8>) -> Self {
        DataBlock {
            stream_id,
            block_seq,
            payload,
        }
    }

    pub fn block_size(&self) -> usize {
        self.payload.len()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    /// Carrier cannot hold a header plus at least one data byte.
    #[error("carrier capacity {0} below minimum of {min}", min = FRAGMENT_HEADER_LEN + 1)]
    CapacityTooSmall(usize),
    /// CRC failed; the fragment must be discarded.
    #[error("fragment checksum mismatch (stream {stream_id}, block {block_seq}, index {frag_index})")]
    ChecksumMismatch {
        stream_id: u32,
        block_seq: u32,
        frag_index: u16,
    },
    /// Not all fragments of the block are present.
    #[error("incomplete block (stream {stream_id}, block {block_seq})")]
    IncompleteBlock { stream_id: u32, block_seq: u32 },
    /// Header bytes are not a valid fragment header.
    #[error("malformed fragment header: {0}")]
    MalformedHeader(&'static str),
    /// Fragments passed to one reassembly disagree on identity or count.
    #[error("inconsistent fragment set: {0}")]
    InconsistentFragments(&'static str),
}
