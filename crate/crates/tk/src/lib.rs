//! Covert-transport research toolkit.
//!
//! `tk` bundles the building blocks of a censorship-evasion overlay and the
//! adversary tooling needed to evaluate it, all on a deterministic
//! virtual-time emulator:
//!
//! - [`codec`] — byte-exact encapsulation of fixed-size data blocks into
//!   emulated media frames (`ADD`/`REPLACE`) and tunnel records, with
//!   fragmentation, reassembly, and the pending-block queue.
//! - [`channels`] — the two covert carriers: an emulated video-conference
//!   frame stream and an authenticated-encryption tunnel, plus the
//!   signaling handshake that establishes them.
//! - [`nodes`] — gateway (SOCKS5 front), relay proxy, and bridge services,
//!   chained by a small stream-multiplexing control protocol.
//! - [`multipath`] — K-path traffic splitting with in-order re-join at a
//!   rendezvous node.
//! - [`attacks`] — flow capture, passive pairwise flow correlation
//!   (features + classifier + AUC), and active timing watermarks
//!   (injection + matched-filter detection).
//! - [`harness`] — the deterministic network emulator and experiment
//!   runners for throughput, latency, multi-user scaling, and the attack
//!   suites, with CSV/JSON report emission.
//! - [`live`] — a thin real-TCP shell so the node services also run as
//!   ordinary processes (`tk gateway` / `tk proxy` / `tk bridge`).
//!
//! Start with the runnable examples (`cargo run --example <name>`); each one
//! demonstrates a single capability end to end. The `tk` binary exposes the
//! node services and the `bench` / `attack` experiment runners.

pub mod attacks;
pub mod channels;
pub mod codec;
pub mod harness;
pub mod live;
pub mod multipath;
pub mod nodes;
pub mod sim;
