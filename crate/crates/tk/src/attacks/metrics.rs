//! Attack outcome metrics and the resistance verdict.

use serde::{Deserialize, Serialize};

use super::AttackError;

/// Minimum trials per class before a verdict is meaningful.
pub const MIN_TRIALS: u64 = 50;

/// Accuracy at or below this keeps the defense RESISTANT.
pub const ACCURACY_CEILING: f64 = 0.80;

/// False-positive rate at or above this keeps the defense RESISTANT.
pub const FPR_FLOOR: f64 = 0.10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackMetrics {
    pub auc: f64,
    pub accuracy: f64,
    pub fpr: f64,
    pub n_positive: u64,
    pub n_negative: u64,
}

impl AttackMetrics {
    /// Accuracy and FPR from per-trial decisions.
    pub fn from_decisions(positive_hits: u64, n_positive: u64, false_positives: u64, n_negative: u64) -> Self {
        let correct = positive_hits + (n_negative - false_positives);
        AttackMetrics {
            auc: 0.0,
            accuracy: correct as f64 / (n_positive + n_negative) as f64,
            fpr: false_positives as f64 / n_negative as f64,
            n_positive,
            n_negative,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Resistant,
    Vulnerable,
}

/// RESISTANT iff the attacker's FPR stays at or above 10% or its accuracy
/// stays at or below 80% (both boundaries inclusive). Needs at least 50
/// trials per class.
pub fn resistance_verdict(metrics: &AttackMetrics) -> Result<Verdict, AttackError> {
    if metrics.n_positive < MIN_TRIALS || metrics.n_negative < MIN_TRIALS {
        return Err(AttackError::InsufficientTrials);
    }
    if metrics.fpr >= FPR_FLOOR || metrics.accuracy <= ACCURACY_CEILING {
        Ok(Verdict::Resistant)
    } else {
        Ok(Verdict::Vulnerable)
    }
}
