//! Deterministic experiment runner: network emulation glue, the
//! throughput / latency / multi-user suites, the attack suites, and report
//! emission. Every result is a pure function of the spec and its seeds.

mod attack_run;
mod bench;
mod httpd;
mod report;
mod topology;

pub use attack_run::{run_attack_suite, AttackSuiteOutput};
pub use bench::{run_latency, run_throughput, run_users};
pub use httpd::{http_get, sentinel_byte, spawn_file_server, spawn_sink_server, HTTP_PORT, SINK_PORT};
pub use report::{emit_report, ResultRow, Summary};
pub use topology::{build_topology, spawn_port_forwarder, BuiltTopology};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channels::Carrier;
use crate::codec::EmbedMode;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment spec: {0}")]
    BadSpec(String),
    #[error("transfer timed out after {0} virtual seconds")]
    TransferTimeout(u64),
    #[error("request timed out")]
    RequestTimeout,
    #[error("user {user} transfer failed: {what}")]
    UserFailure { user: u32, what: String },
    #[error("no results to report")]
    EmptyResults,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Attack(#[from] crate::attacks::AttackError),
}

/// Deployment shape for the end-to-end suites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeployMode {
    /// Gateway straight to the bridge.
    Pt,
    /// Gateway through proxies; the last proxy is the exit.
    Standalone,
    /// Gateway through proxies, then the bridge.
    Combined,
}

/// One cell of the carrier/mode/block-size matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CarrierCell {
    pub carrier: Carrier,
    pub mode: EmbedMode,
    pub block_size: usize,
}

impl CarrierCell {
    pub fn media(mode: EmbedMode, block_size: usize) -> Self {
        CarrierCell {
            carrier: Carrier::Media,
            mode,
            block_size,
        }
    }

    pub fn tunnel(block_size: usize) -> Self {
        CarrierCell {
            carrier: Carrier::Tunnel,
            mode: EmbedMode::Replace,
            block_size,
        }
    }

    pub fn label(&self) -> String {
        match self.carrier {
            Carrier::Tunnel => format!("tunnel-{}", self.block_size),
            Carrier::Media => format!(
                "media-{}-{}",
                match self.mode {
                    EmbedMode::Add => "add",
                    EmbedMode::Replace => "replace",
                },
                self.block_size
            ),
        }
    }
}

/// The measurement matrix: which cells the bench suites cover.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ConfigMatrix {
    pub media_modes: Vec<EmbedMode>,
    pub block_sizes: Vec<usize>,
    pub include_tunnel: bool,
}

impl Default for ConfigMatrix {
    fn default() -> Self {
        ConfigMatrix {
            media_modes: vec![EmbedMode::Add, EmbedMode::Replace],
            block_sizes: crate::codec::DEFAULT_BLOCK_SIZES.to_vec(),
            include_tunnel: true,
        }
    }
}

impl ConfigMatrix {
    pub fn cells(&self) -> Vec<CarrierCell> {
        let mut out = Vec::new();
        if self.include_tunnel {
            for &bs in &self.block_sizes {
                out.push(CarrierCell::tunnel(bs));
            }
        }
        for &mode in &self.media_modes {
            for &bs in &self.block_sizes {
                out.push(CarrierCell::media(mode, bs));
            }
        }
        out
    }
}

/// Averaging counts: latency over ten measurements, throughput over five,
/// each test repeated twice.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct Repetitions {
    pub latency: u32,
    pub throughput: u32,
    pub repeats: u32,
}

impl Default for Repetitions {
    fn default() -> Self {
        Repetitions {
            latency: 10,
            throughput: 5,
            repeats: 2,
        }
    }
}

/// Link shaping for the desk topology. Delays follow the default desk
/// profile; bandwidth applies to every link; loss is Bernoulli per packet.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct TopologySpec {
    pub proxies: u32,
    pub user_proxy_delay_ms: u64,
    pub proxy_proxy_delay_ms: u64,
    pub proxy_bridge_delay_ms: u64,
    pub bridge_server_delay_ms: u64,
    pub jitter_ms: u64,
    pub bandwidth_kbps: Option<u64>,
    pub loss_rate: f64,
}

impl Default for TopologySpec {
    fn default() -> Self {
        TopologySpec {
            proxies: 4,
            user_proxy_delay_ms: 20,
            proxy_proxy_delay_ms: 15,
            proxy_bridge_delay_ms: 25,
            bridge_server_delay_ms: 30,
            jitter_ms: 0,
            bandwidth_kbps: Some(20_000),
            loss_rate: 0.0,
        }
    }
}

/// Knobs for the attack suites.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackSpec {
    /// Watermarked + clean trials per active configuration.
    pub active_trials: u32,
    /// Trials per passive condition (one observed proxy each).
    pub passive_trials: u32,
    pub watermark_bits: u32,
    pub watermark_slot_ms: u64,
    pub watermark_delay_ms: u64,
    /// Seconds of workload per active trial.
    pub active_seconds: u64,
    /// Users sharing the proxy pool in the passive experiment.
    pub passive_users: u32,
}

impl Default for AttackSpec {
    fn default() -> Self {
        AttackSpec {
            active_trials: 60,
            passive_trials: 50,
            watermark_bits: 16,
            watermark_slot_ms: 400,
            watermark_delay_ms: 150,
            active_seconds: 32,
            passive_users: 8,
        }
    }
}

/// The whole experiment description, as mirrored by the spec file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentSpec {
    pub seed: u64,
    pub mode: DeployMode,
    pub users: u32,
    pub repetitions: Repetitions,
    pub topology: TopologySpec,
    pub matrix: ConfigMatrix,
    pub attack: AttackSpec,
    /// Download size for throughput and per-user runs, in bytes.
    pub transfer_bytes: usize,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            seed: 1,
            mode: DeployMode::Pt,
            users: 50,
            repetitions: Repetitions::default(),
            topology: TopologySpec::default(),
            matrix: ConfigMatrix::default(),
            attack: AttackSpec::default(),
            transfer_bytes: 250 * 1024,
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if !(1..=50).contains(&self.users) {
            return Err(HarnessError::BadSpec("users must be in 1..=50".into()));
        }
        if self.matrix.cells().is_empty() {
            return Err(HarnessError::BadSpec("empty configuration matrix".into()));
        }
        for &bs in &self.matrix.block_sizes {
            if !crate::codec::DEFAULT_BLOCK_SIZES.contains(&bs) {
                return Err(HarnessError::BadSpec(format!(
                    "block size {bs} outside the configured set"
                )));
            }
        }
        if self.repetitions.latency == 0
            || self.repetitions.throughput == 0
            || self.repetitions.repeats == 0
        {
            return Err(HarnessError::BadSpec("repetition counts must be positive".into()));
        }
        if matches!(self.mode, DeployMode::Standalone | DeployMode::Combined)
            && self.topology.proxies == 0
        {
            return Err(HarnessError::BadSpec(
                "standalone/combined modes need at least one proxy".into(),
            ));
        }
        if self.attack.watermark_delay_ms >= self.attack.watermark_slot_ms {
            return Err(HarnessError::BadSpec(
                "watermark delay must be below the slot length".into(),
            ));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let spec: ExperimentSpec =
            toml::from_str(text).map_err(|e| HarnessError::BadSpec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("spec serializes")
    }
}
