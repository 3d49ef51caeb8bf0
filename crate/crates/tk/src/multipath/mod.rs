//! K-path traffic fragmentation: split a stream's blocks across K proxy
//! paths and re-join them in order at the rendezvous.
//!
//! Splitting is block-granular and deterministic: ROUND_ROBIN sends block
//! `i` down path `i mod K`; WEIGHTED picks the path with the smallest
//! deficit (`sent / weight`, ties to the lowest path id). The joiner buffers
//! out-of-order arrivals up to a cap and declares a gap lost once it has
//! been the head of the line for the timeout, so one dropped block costs
//! ten virtual seconds, not the stream.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::codec::DataBlock;
use crate::sim::child_rng;

/// Out-of-order blocks buffered by the joiner before it gives up.
pub const JOIN_BUFFER_CAP: usize = 256;

/// Head-of-line gap age before the missing range is declared lost.
pub const GAP_TIMEOUT_US: u64 = 10_000_000;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MultipathError {
    #[error("deployment has too few usable proxies")]
    InsufficientProxies,
    #[error("path references unknown node {0}")]
    UnknownNode(u32),
    #[error("path {0} has no hops")]
    EmptyPath(u16),
    #[error("paths do not share a final rendezvous hop")]
    NoSharedRendezvous,
    #[error("path weight must be positive")]
    NonPositiveWeight,
    #[error("join buffer overflow (pathological path skew)")]
    BufferOverflow,
    #[error("malformed paths file: {0}")]
    BadPathsFile(String),
}

/// Ordered proxy hop list. The final hop is the rendezvous.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSpec {
    pub path_id: u16,
    pub hops: Vec<u32>,
    pub weight: f64,
}

impl PathSpec {
    pub fn new(path_id: u16, hops: Vec<u32>) -> Self {
        PathSpec {
            path_id,
            hops,
            weight: 1.0,
        }
    }

    pub fn rendezvous(&self) -> Option<u32> {
        self.hops.last().copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitPolicy {
    RoundRobin,
    Weighted,
}

/// A set of K paths sharing one rendezvous.
#[derive(Debug, Clone, PartialEq)]
pub struct MultipathCircuit {
    pub circuit_id: u32,
    pub paths: Vec<PathSpec>,
    pub policy: SplitPolicy,
}

impl MultipathCircuit {
    pub fn new(circuit_id: u32, paths: Vec<PathSpec>, policy: SplitPolicy) -> Result<Self, MultipathError> {
        if paths.is_empty() {
            return Err(MultipathError::InsufficientProxies);
        }
        let rendezvous = paths[0].rendezvous();
        for p in &paths {
            if p.hops.is_empty() {
                return Err(MultipathError::EmptyPath(p.path_id));
            }
            if p.weight <= 0.0 {
                return Err(MultipathError::NonPositiveWeight);
            }
            if p.rendezvous() != rendezvous {
                return Err(MultipathError::NoSharedRendezvous);
            }
        }
        Ok(MultipathCircuit {
            circuit_id,
            paths,
            policy,
        })
    }

    pub fn k(&self) -> usize {
        self.paths.len()
    }

    pub fn rendezvous(&self) -> u32 {
        self.paths[0].rendezvous().expect("validated non-empty")
    }
}

/// Assigns each block to exactly one path.
pub struct Splitter {
    policy: SplitPolicy,
    weights: Vec<f64>,
    alive: Vec<bool>,
    sent: Vec<u64>,
}

impl Splitter {
    pub fn new(circuit: &MultipathCircuit) -> Self {
        Splitter {
            policy: circuit.policy,
            weights: circuit.paths.iter().map(|p| p.weight).collect(),
            alive: vec![true; circuit.k()],
            sent: vec![0; circuit.k()],
        }
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    /// Blocks already down a dead path are simply lost; later blocks go to
    /// the survivors.
    pub fn mark_path_down(&mut self, index: usize) {
        self.alive[index] = false;
    }

    pub fn counts(&self) -> &[u64] {
        &self.sent
    }

    /// Pick the path for `block_seq`. Returns `None` when every path is down.
    pub fn assign(&mut self, block_seq: u32) -> Option<usize> {
        let alive: Vec<usize> = (0..self.k()).filter(|&i| self.alive[i]).collect();
        if alive.is_empty() {
            return None;
        }
        let pick = match self.policy {
            SplitPolicy::RoundRobin => alive[block_seq as usize % alive.len()],
            SplitPolicy::Weighted => *alive
                .iter()
                .min_by(|&&a, &&b| {
                    let da = self.sent[a] as f64 / self.weights[a];
                    let db = self.sent[b] as f64 / self.weights[b];
                    da.partial_cmp(&db).unwrap().then(a.cmp(&b))
                })
                .expect("alive set non-empty"),
        };
        self.sent[pick] += 1;
        Some(pick)
    }
}

/// Event surfaced by the joiner alongside delivered blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum JoinEvent {
    /// `from..=to` were declared lost after the gap timeout.
    GapTimeout { from: u32, to: u32 },
}

/// Re-joins per-path arrivals into a strictly increasing block stream.
pub struct Joiner {
    next_seq: u32,
    buffer: BTreeMap<u32, DataBlock>,
    buffer_cap: usize,
    gap_timeout_us: u64,
    gap_since: Option<u64>,
    events: Vec<JoinEvent>,
}

impl Joiner {
    pub fn new() -> Self {
        Self::with_limits(JOIN_BUFFER_CAP, GAP_TIMEOUT_US)
    }

    pub fn with_limits(buffer_cap: usize, gap_timeout_us: u64) -> Self {
        Joiner {
            next_seq: 0,
            buffer: BTreeMap::new(),
            buffer_cap,
            gap_timeout_us,
            gap_since: None,
            events: Vec::new(),
        }
    }

    pub fn take_events(&mut self) -> Vec<JoinEvent> {
        std::mem::take(&mut self.events)
    }

    /// Virtual deadline at which [`Joiner::on_timer`] should run, if a gap
    /// is currently pending.
    pub fn next_deadline(&self) -> Option<u64> {
        self.gap_since.map(|t| t + self.gap_timeout_us)
    }

    /// Feed one arrival; returns blocks now deliverable in order.
    pub fn push(&mut self, now_us: u64, block: DataBlock) -> Result<Vec<DataBlock>, MultipathError> {
        if block.block_seq < self.next_seq {
            // Late duplicate of something already delivered or skipped.
            return Ok(Vec::new());
        }
        if block.block_seq == self.next_seq {
            let mut out = vec![block];
            self.next_seq = self.next_seq.wrapping_add(1);
            while let Some(next) = self.buffer.remove(&self.next_seq) {
                out.push(next);
                self.next_seq = self.next_seq.wrapping_add(1);
            }
            self.gap_since = if self.buffer.is_empty() {
                None
            } else {
                Some(now_us)
            };
            return Ok(out);
        }
        if self.buffer.len() >= self.buffer_cap {
            return Err(MultipathError::BufferOverflow);
        }
        self.buffer.insert(block.block_seq, block);
        if self.gap_since.is_none() {
            self.gap_since = Some(now_us);
        }
        Ok(Vec::new())
    }

    /// Check the head-of-line gap against the timeout; skips it when due.
    pub fn on_timer(&mut self, now_us: u64) -> Vec<DataBlock> {
        let Some(since) = self.gap_since else {
            return Vec::new();
        };
        if now_us.saturating_sub(since) < self.gap_timeout_us {
            return Vec::new();
        }
        let Some((&first_buffered, _)) = self.buffer.iter().next() else {
            self.gap_since = None;
            return Vec::new();
        };
        self.events.push(JoinEvent::GapTimeout {
            from: self.next_seq,
            to: first_buffered - 1,
        });
        self.next_seq = first_buffered;
        let mut out = Vec::new();
        while let Some(next) = self.buffer.remove(&self.next_seq) {
            out.push(next);
            self.next_seq = self.next_seq.wrapping_add(1);
        }
        self.gap_since = if self.buffer.is_empty() {
            None
        } else {
            Some(now_us)
        };
        out
    }
}

impl Default for Joiner {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PathPolicy {
    Manual,
    Auto,
}

/// Validate user-supplied paths against the deployment.
pub fn validate_paths(paths: &[PathSpec], deployment: &[u32]) -> Result<(), MultipathError> {
    if paths.is_empty() {
        return Err(MultipathError::InsufficientProxies);
    }
    let rendezvous = paths[0].rendezvous();
    for p in paths {
        if p.hops.is_empty() {
            return Err(MultipathError::EmptyPath(p.path_id));
        }
        if p.weight <= 0.0 {
            return Err(MultipathError::NonPositiveWeight);
        }
        for hop in &p.hops {
            if !deployment.contains(hop) {
                return Err(MultipathError::UnknownNode(*hop));
            }
        }
        if paths.len() > 1 && p.rendezvous() != rendezvous {
            return Err(MultipathError::NoSharedRendezvous);
        }
    }
    Ok(())
}

/// Sample K node-disjoint paths (sharing only the rendezvous) from the
/// deployment, with per-path hop counts uniform in `[1, 3]` (clamped when
/// the proxy pool runs short). Deterministic for a given seed.
pub fn auto_paths(deployment: &[u32], k: usize, seed: u64) -> Result<Vec<PathSpec>, MultipathError> {
    if k == 0 || deployment.len() < k.max(1) {
        return Err(MultipathError::InsufficientProxies);
    }
    let mut rng = child_rng(seed, "choose-paths");
    let mut pool: Vec<u32> = deployment.to_vec();
    pool.sort_unstable();
    pool.shuffle(&mut rng);
    let rendezvous = pool.pop().expect("non-empty deployment");
    if pool.len() + 1 < k {
        return Err(MultipathError::InsufficientProxies);
    }
    let mut paths = Vec::with_capacity(k);
    for path_id in 0..k {
        let want_hops = rng.random_range(1..=3usize);
        // Leave nothing reserved: later paths may take shorter prefixes.
        let prefix_len = (want_hops - 1).min(pool.len());
        let mut hops: Vec<u32> = pool.drain(..prefix_len).collect();
        hops.push(rendezvous);
        paths.push(PathSpec::new(path_id as u16, hops));
    }
    Ok(paths)
}

/// Front door mirroring the configured path policy.
pub fn choose_paths(
    deployment: &[u32],
    k: usize,
    policy: PathPolicy,
    manual: Option<Vec<PathSpec>>,
    seed: u64,
) -> Result<Vec<PathSpec>, MultipathError> {
    match policy {
        PathPolicy::Manual => {
            let paths = manual.ok_or(MultipathError::InsufficientProxies)?;
            validate_paths(&paths, deployment)?;
            Ok(paths)
        }
        PathPolicy::Auto => auto_paths(deployment, k, seed),
    }
}

/// Parse a paths file: one path per line, `path_id: n,n,...,n [weight]`.
/// `#` starts a comment.
pub fn parse_paths_file(text: &str) -> Result<Vec<PathSpec>, MultipathError> {
    let mut out = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |what: &str| MultipathError::BadPathsFile(format!("line {}: {what}", lineno + 1));
        let (id_part, rest) = line.split_once(':').ok_or_else(|| err("missing ':'"))?;
        let path_id: u16 = id_part.trim().parse().map_err(|_| err("bad path id"))?;
        let (hops_part, weight) = match rest.split_once('[') {
            Some((hops, w)) => {
                let w = w
                    .strip_suffix(']')
                    .ok_or_else(|| err("unterminated weight"))?
                    .trim();
                (hops, w.parse::<f64>().map_err(|_| err("bad weight"))?)
            }
            None => (rest, 1.0),
        };
        let mut hops = Vec::new();
        for tok in hops_part.split(',') {
            let tok = tok.trim();
            if tok.is_empty() {
                continue;
            }
            hops.push(tok.parse::<u32>().map_err(|_| err("bad node id"))?);
        }
        if hops.is_empty() {
            return Err(err("no hops"));
        }
        if weight <= 0.0 {
            return Err(err("weight must be positive"));
        }
        out.push(PathSpec {
            path_id,
            hops,
            weight,
        });
    }
    if out.is_empty() {
        return Err(MultipathError::BadPathsFile("no paths".into()));
    }
    Ok(out)
}

/// Inverse of [`parse_paths_file`].
pub fn format_paths_file(paths: &[PathSpec]) -> String {
    let mut out = String::new();
    for p in paths {
        let hops: Vec<String> = p.hops.iter().map(|h| h.to_string()).collect();
        if (p.weight - 1.0).abs() < f64::EPSILON {
            out.push_str(&format!("{}: {}\n", p.path_id, hops.join(",")));
        } else {
            out.push_str(&format!("{}: {} [{}]\n", p.path_id, hops.join(","), p.weight));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn circuit(k: usize, policy: SplitPolicy) -> MultipathCircuit {
        let paths = (0..k)
            .map(|i| PathSpec::new(i as u16, vec![i as u32 + 10, 99]))
            .collect();
        MultipathCircuit::new(1, paths, policy).unwrap()
    }

    fn blk(seq: u32) -> DataBlock {
        DataBlock::new(1, seq, vec![(seq % 251) as u8; 32])
    }

    #[test]
    fn round_robin_splits_evenly() {
        let mut s = Splitter::new(&circuit(4, SplitPolicy::RoundRobin));
        for seq in 0..1000u32 {
            let path = s.assign(seq).unwrap();
            assert_eq!(path, seq as usize % 4);
        }
        assert_eq!(s.counts(), &[250, 250, 250, 250]);
    }

    #[test]
    fn k1_split_is_identity_routing() {
        let mut s = Splitter::new(&circuit(1, SplitPolicy::RoundRobin));
        for seq in 0..100u32 {
            assert_eq!(s.assign(seq), Some(0));
        }
    }

    #[test]
    fn weighted_deficit_follows_weights() {
        let paths = vec![
            PathSpec {
                path_id: 0,
                hops: vec![10, 99],
                weight: 2.0,
            },
            PathSpec {
                path_id: 1,
                hops: vec![11, 99],
                weight: 1.0,
            },
            PathSpec {
                path_id: 2,
                hops: vec![12, 99],
                weight: 1.0,
            },
        ];
        let circuit = MultipathCircuit::new(2, paths, SplitPolicy::Weighted).unwrap();
        let mut s = Splitter::new(&circuit);
        for seq in 0..400u32 {
            s.assign(seq).unwrap();
        }
        assert_eq!(s.counts(), &[200, 100, 100]);
    }

    #[test]
    fn failed_path_redistributes_survivors() {
        let mut s = Splitter::new(&circuit(4, SplitPolicy::RoundRobin));
        for seq in 0..100u32 {
            s.assign(seq).unwrap();
        }
        s.mark_path_down(2);
        let mut later = [0u64; 4];
        for seq in 100..400u32 {
            later[s.assign(seq).unwrap()] += 1;
        }
        assert_eq!(later[2], 0);
        assert_eq!(later.iter().sum::<u64>(), 300);
        assert!(later[0] == 100 && later[1] == 100 && later[3] == 100);
    }

    /// Reordering torture: adversarial per-path delays, 10^4 blocks sent at
    /// 2.5 ms spacing, delivered strictly in order.
    #[test]
    fn join_reorders_adversarial_path_delays() {
        let delays_us = [5_000u64, 500_000, 50_000, 200_000];
        let n = 10_000u32;
        let mut arrivals: Vec<(u64, u32)> = (0..n)
            .map(|seq| {
                let send = u64::from(seq) * 2_500;
                (send + delays_us[seq as usize % 4], seq)
            })
            .collect();
        arrivals.sort();
        let mut joiner = Joiner::new();
        let mut delivered = Vec::new();
        for (at, seq) in arrivals {
            delivered.extend(
                joiner
                    .push(at, blk(seq))
                    .expect("buffer must not overflow at this skew"),
            );
        }
        let seqs: Vec<u32> = delivered.iter().map(|b| b.block_seq).collect();
        let expected: Vec<u32> = (0..n).collect();
        assert_eq!(seqs, expected);
        assert!(joiner.take_events().is_empty());
    }

    #[test]
    fn single_path_join_is_pass_through() {
        let mut joiner = Joiner::new();
        for seq in 0..50u32 {
            let out = joiner.push(u64::from(seq), blk(seq)).unwrap();
            assert_eq!(out.len(), 1);
            assert_eq!(out[0].block_seq, seq);
        }
    }

    #[test]
    fn dropped_block_gap_times_out_then_stream_resumes() {
        let mut joiner = Joiner::new();
        let mut delivered = Vec::new();
        let mut t = 0u64;
        for seq in 0..40u32 {
            t = u64::from(seq) * 1_000;
            if seq == 17 {
                continue; // lost on its path
            }
            delivered.extend(joiner.push(t, blk(seq)).unwrap());
        }
        assert_eq!(delivered.len(), 17, "blocks 0..16 delivered before the gap");
        // The gap was first observed when block 18 arrived at t=18ms.
        assert_eq!(joiner.next_deadline(), Some(18_000 + GAP_TIMEOUT_US));
        assert!(joiner.on_timer(18_000 + GAP_TIMEOUT_US - 1).is_empty());
        let resumed = joiner.on_timer(18_000 + GAP_TIMEOUT_US);
        assert_eq!(resumed.first().map(|b| b.block_seq), Some(18));
        assert_eq!(resumed.len(), 22, "blocks 18..39 released");
        assert_eq!(
            joiner.take_events(),
            vec![JoinEvent::GapTimeout { from: 17, to: 17 }]
        );
    }

    #[test]
    fn join_buffer_overflow_is_fatal() {
        let mut joiner = Joiner::with_limits(8, GAP_TIMEOUT_US);
        for seq in 1..=8u32 {
            joiner.push(0, blk(seq)).unwrap();
        }
        assert_eq!(
            joiner.push(0, blk(9)).unwrap_err(),
            MultipathError::BufferOverflow
        );
    }

    #[test]
    fn auto_paths_disjoint_and_deterministic() {
        let deployment: Vec<u32> = (1..=8).collect();
        let paths = auto_paths(&deployment, 4, 77).unwrap();
        assert_eq!(paths.len(), 4);
        let rendezvous = paths[0].rendezvous().unwrap();
        let mut seen = std::collections::BTreeSet::new();
        for p in &paths {
            assert_eq!(p.rendezvous(), Some(rendezvous));
            assert!((1..=3).contains(&p.hops.len()));
            for hop in &p.hops[..p.hops.len() - 1] {
                assert_ne!(*hop, rendezvous);
                assert!(seen.insert(*hop), "prefix hop {hop} reused across paths");
            }
        }
        assert_eq!(auto_paths(&deployment, 4, 77).unwrap(), paths);
        assert_ne!(auto_paths(&deployment, 4, 78).unwrap(), paths);
    }

    #[test]
    fn manual_unknown_node_rejected() {
        let deployment = vec![1, 2, 3];
        let paths = vec![PathSpec::new(0, vec![1, 9])];
        assert_eq!(
            choose_paths(&deployment, 1, PathPolicy::Manual, Some(paths), 0).unwrap_err(),
            MultipathError::UnknownNode(9)
        );
    }

    #[test]
    fn paths_file_round_trip() {
        let text = "0: 2,3,7\n1: 4,5,7 [2.5]\n# comment\n2: 6,7\n";
        let paths = parse_paths_file(text).unwrap();
        assert_eq!(paths.len(), 3);
        assert_eq!(paths[1].weight, 2.5);
        assert_eq!(paths[1].hops, vec![4, 5, 7]);
        let formatted = format_paths_file(&paths);
        assert_eq!(parse_paths_file(&formatted).unwrap(), paths);
        assert!(parse_paths_file("0: \n").is_err());
        assert!(parse_paths_file("0: 1,2 [0]").is_err());
    }
}
