//! The adversary harness: flow capture, passive pairwise correlation
//! (features + classifier + AUC), and active temporal watermarking
//! (injection + matched-filter detection) with the resistance verdict.

mod correlate;
mod features;
mod metrics;
mod watermark;

pub use correlate::{compute_auc, pair_features, train_correlator, Correlator, TrainReport};
pub use features::{extract_features, FeatureVector, WindowConfig};
pub use metrics::{resistance_verdict, AttackMetrics, Verdict};
pub use watermark::{
    apply_watermark_to_trace, calibrate_threshold, detect_watermark, WatermarkPattern,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::{TapRecord, TrafficDir};

#[derive(Debug, Error, PartialEq)]
pub enum AttackError {
    #[error("trace has no records")]
    EmptyTrace,
    #[error("labels contain a single class")]
    DegenerateLabels,
    #[error("trace shorter than two watermark periods")]
    TraceTooShort,
    #[error("fewer than {min} trials per class", min = metrics::MIN_TRIALS)]
    InsufficientTrials,
    #[error("invalid watermark pattern: {0}")]
    BadPattern(&'static str),
    #[error("malformed trace file: {0}")]
    BadTraceFile(String),
}

/// Observation point of a capture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Vantage {
    UserSide,
    ProxySide,
    ExitSide,
}

/// One observed packet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlowRecord {
    pub timestamp_us: u64,
    pub size: u32,
    pub dir: TrafficDir,
}

/// Timestamped (size, direction) packet sequence captured at a vantage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowTrace {
    pub flow_id: u64,
    pub vantage: Vantage,
    pub records: Vec<FlowRecord>,
}

impl FlowTrace {
    pub fn new(flow_id: u64, vantage: Vantage) -> Self {
        FlowTrace {
            flow_id,
            vantage,
            records: Vec::new(),
        }
    }

    /// Build from tap records, optionally keeping a single connection.
    pub fn from_tap(
        flow_id: u64,
        vantage: Vantage,
        records: &[TapRecord],
        conn_filter: Option<u64>,
    ) -> Self {
        let mut out = FlowTrace::new(flow_id, vantage);
        for r in records {
            if let Some(want) = conn_filter {
                if r.conn != want {
                    continue;
                }
            }
            out.records.push(FlowRecord {
                timestamp_us: r.ts_us,
                size: r.size,
                dir: r.dir,
            });
        }
        out.records.sort_by_key(|r| r.timestamp_us);
        out
    }

    pub fn duration_us(&self) -> u64 {
        match (self.records.first(), self.records.last()) {
            (Some(a), Some(b)) => b.timestamp_us - a.timestamp_us,
            _ => 0,
        }
    }

    /// Serialize as CSV: `timestamp_us,size_bytes,direction` with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("timestamp_us,size_bytes,direction\n");
        for r in &self.records {
            let dir = match r.dir {
                TrafficDir::In => "IN",
                TrafficDir::Out => "OUT",
            };
            out.push_str(&format!("{},{},{}\n", r.timestamp_us, r.size, dir));
        }
        out
    }

    pub fn from_csv(flow_id: u64, vantage: Vantage, text: &str) -> Result<Self, AttackError> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 {
                if line != "timestamp_us,size_bytes,direction" {
                    return Err(AttackError::BadTraceFile("missing header".into()));
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(',');
            let err = |what: &str| AttackError::BadTraceFile(format!("line {}: {what}", i + 1));
            let ts: u64 = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| err("bad timestamp"))?;
            let size: u32 = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| err("bad size"))?;
            let dir = match parts.next() {
                Some("IN") => TrafficDir::In,
                Some("OUT") => TrafficDir::Out,
                _ => return Err(err("bad direction")),
            };
            records.push(FlowRecord {
                timestamp_us: ts,
                size,
                dir,
            });
        }
        Ok(FlowTrace {
            flow_id,
            vantage,
            records,
        })
    }
}
