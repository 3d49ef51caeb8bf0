//! Report emission: `results.csv` (one row per configuration per
//! repetition) and `summary.json`. Output is byte-stable for fixed seeds:
//! rows keep insertion order, summary maps are sorted, and floats are
//! printed with fixed precision.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use super::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub suite: String,
    pub config: String,
    pub repetition: u32,
    pub metric: String,
    pub value: f64,
}

impl ResultRow {
    pub fn new(suite: &str, config: &str, repetition: u32, metric: &str, value: f64) -> Self {
        ResultRow {
            suite: suite.to_string(),
            config: config.to_string(),
            repetition,
            metric: metric.to_string(),
            value,
        }
    }
}

/// One attack outcome in the summary, in the shape
/// `{auc, accuracy, fpr, n_positive, n_negative, config}`.
#[derive(Debug, Clone, Serialize)]
pub struct AttackRecord {
    pub auc: f64,
    pub accuracy: f64,
    pub fpr: f64,
    pub n_positive: u64,
    pub n_negative: u64,
    pub config: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub verdict: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct Summary {
    pub seed: u64,
    pub rows: usize,
    /// `suite/config/metric` -> mean over repetitions.
    pub means: BTreeMap<String, f64>,
    pub attack: Vec<AttackRecord>,
}

impl Summary {
    pub fn from_rows(seed: u64, rows: &[ResultRow], attack: Vec<AttackRecord>) -> Summary {
        let mut sums: BTreeMap<String, (f64, u64)> = BTreeMap::new();
        for r in rows {
            let key = format!("{}/{}/{}", r.suite, r.config, r.metric);
            let entry = sums.entry(key).or_insert((0.0, 0));
            entry.0 += r.value;
            entry.1 += 1;
        }
        let means = sums
            .into_iter()
            .map(|(k, (sum, n))| (k, round6(sum / n as f64)))
            .collect();
        Summary {
            seed,
            rows: rows.len(),
            means,
            attack,
        }
    }

    pub fn mean(&self, suite: &str, config: &str, metric: &str) -> Option<f64> {
        self.means.get(&format!("{suite}/{config}/{metric}")).copied()
    }
}

fn round6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

pub fn rows_to_csv(rows: &[ResultRow]) -> String {
    let mut out = String::from("suite,config,repetition,metric,value\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:.6}\n",
            r.suite, r.config, r.repetition, r.metric, r.value
        ));
    }
    out
}

/// Write `results.csv` and `summary.json` under `dir`.
pub fn emit_report(
    seed: u64,
    rows: &[ResultRow],
    attack: Vec<AttackRecord>,
    dir: &Path,
) -> Result<Summary, HarnessError> {
    if rows.is_empty() {
        return Err(HarnessError::EmptyResults);
    }
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("results.csv"), rows_to_csv(rows))?;
    let summary = Summary::from_rows(seed, rows, attack);
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    std::fs::write(dir.join("summary.json"), json + "\n")?;
    Ok(summary)
}
