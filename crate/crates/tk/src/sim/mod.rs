//! Single-threaded virtual-time execution: a tiny deterministic async
//! executor, in-memory byte pipes and mailboxes, and the emulated packet
//! network (links with delay / jitter / bandwidth / loss, plus taps).
//!
//! Everything in the crate that "waits" does so on the virtual clock owned
//! by [`Sim`]; a whole multi-node experiment is a pure function of its
//! seeds. Time is measured in integer microseconds.

mod exec;
mod net;
mod pipe;
mod rng;

pub use exec::{JoinHandle, Sim};
pub use net::{ConnEnd, LinkParams, Listener, MarkSpec, NetError, Network, Tap, TapRecord, TrafficDir};
pub use pipe::{timeout, ByteStream, Mailbox, RecvOutcome, TimeoutError};
pub use rng::{child_rng, label_seed};

/// Microseconds on the emulated clock.
pub type VirtualTime = u64;

/// Microseconds per second, for rate conversions.
pub const SECOND: u64 = 1_000_000;

/// Milliseconds to microseconds.
pub const fn ms(v: u64) -> u64 {
    v * 1_000
}
