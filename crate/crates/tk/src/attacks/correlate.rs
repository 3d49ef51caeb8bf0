//! Passive pairwise flow correlation: a seeded, regularized logistic
//! regression over pair-difference-and-product features, evaluated by
//! ROC AUC on a stratified held-out split.

use rand::seq::SliceRandom;

use crate::sim::child_rng;

use super::{AttackError, FeatureVector};

/// Combine an (entry, exit) feature pair: elementwise absolute difference
/// concatenated with elementwise product.
pub fn pair_features(entry: &FeatureVector, exit: &FeatureVector) -> Vec<f64> {
    assert_eq!(entry.values.len(), exit.values.len());
    let mut out = Vec::with_capacity(entry.values.len() * 2);
    for (a, b) in entry.values.iter().zip(&exit.values) {
        out.push((a - b).abs());
    }
    for (a, b) in entry.values.iter().zip(&exit.values) {
        out.push(a * b);
    }
    out
}

/// Trained pairwise scorer.
pub struct Correlator {
    weights: Vec<f64>,
    bias: f64,
    means: Vec<f64>,
    stds: Vec<f64>,
}

impl Correlator {
    /// Matched-likelihood score in (0, 1).
    pub fn score(&self, entry: &FeatureVector, exit: &FeatureVector) -> f64 {
        let z = pair_features(entry, exit);
        let mut acc = self.bias;
        for ((x, m), (s, w)) in z
            .iter()
            .zip(&self.means)
            .zip(self.stds.iter().zip(&self.weights))
        {
            acc += w * ((x - m) / s);
        }
        sigmoid(acc)
    }
}

/// Outcome of training: the scorer plus held-out evaluation.
pub struct TrainReport {
    pub correlator: Correlator,
    pub test_auc: f64,
    pub test_scores: Vec<f64>,
    pub test_labels: Vec<bool>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const EPOCHS: usize = 300;
const LEARNING_RATE: f64 = 0.5;
const L2: f64 = 1e-3;
const TRAIN_FRACTION: f64 = 0.7;

/// Train on labelled (entry, exit) pairs with a seeded stratified 70/30
/// split. Deterministic for a given seed.
pub fn train_correlator(
    pairs: &[(FeatureVector, FeatureVector, bool)],
    seed: u64,
) -> Result<TrainReport, AttackError> {
    let n_pos = pairs.iter().filter(|p| p.2).count();
    let n_neg = pairs.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(AttackError::DegenerateLabels);
    }

    // Stratified split.
    let mut rng = child_rng(seed, "correlator-split");
    let mut pos_idx: Vec<usize> = (0..pairs.len()).filter(|&i| pairs[i].2).collect();
    let mut neg_idx: Vec<usize> = (0..pairs.len()).filter(|&i| !pairs[i].2).collect();
    pos_idx.shuffle(&mut rng);
    neg_idx.shuffle(&mut rng);
    let pos_cut = ((pos_idx.len() as f64) * TRAIN_FRACTION).round() as usize;
    let neg_cut = ((neg_idx.len() as f64) * TRAIN_FRACTION).round() as usize;
    let pos_cut = pos_cut.clamp(1, pos_idx.len() - 1);
    let neg_cut = neg_cut.clamp(1, neg_idx.len() - 1);
    let mut train_idx: Vec<usize> = Vec::new();
    train_idx.extend(&pos_idx[..pos_cut]);
    train_idx.extend(&neg_idx[..neg_cut]);
    let mut test_idx: Vec<usize> = Vec::new();
    test_idx.extend(&pos_idx[pos_cut..]);
    test_idx.extend(&neg_idx[neg_cut..]);
    train_idx.sort_unstable();
    test_idx.sort_unstable();

    let dim = pair_features(&pairs[0].0, &pairs[0].1).len();
    let train_x: Vec<Vec<f64>> = train_idx
        .iter()
        .map(|&i| pair_features(&pairs[i].0, &pairs[i].1))
        .collect();
    let train_y: Vec<f64> = train_idx.iter().map(|&i| f64::from(pairs[i].2 as u8)).collect();

    // Standardize on the training set.
    let mut means = vec![0.0; dim];
    for x in &train_x {
        for (m, v) in means.iter_mut().zip(x) {
            *m += v;
        }
    }
    for m in &mut means {
        *m /= train_x.len() as f64;
    }
    let mut stds = vec![0.0; dim];
    for x in &train_x {
        for ((s, m), v) in stds.iter_mut().zip(&means).zip(x) {
            *s += (v - m).powi(2);
        }
    }
    for s in &mut stds {
        *s = (*s / train_x.len() as f64).sqrt();
        if *s < 1e-9 {
            *s = 1.0;
        }
    }
    let norm: Vec<Vec<f64>> = train_x
        .iter()
        .map(|x| {
            x.iter()
                .zip(&means)
                .zip(&stds)
                .map(|((v, m), s)| (v - m) / s)
                .collect()
        })
        .collect();

    // Full-batch gradient descent.
    let n = norm.len() as f64;
    let mut weights = vec![0.0; dim];
    let mut bias = 0.0;
    for _ in 0..EPOCHS {
        let mut grad_w = vec![0.0; dim];
        let mut grad_b = 0.0;
        for (x, y) in norm.iter().zip(&train_y) {
            let pred = sigmoid(bias + dot(&weights, x));
            let err = pred - y;
            grad_b += err;
            for (g, v) in grad_w.iter_mut().zip(x) {
                *g += err * v;
            }
        }
        bias -= LEARNING_RATE * grad_b / n;
        for (w, g) in weights.iter_mut().zip(&grad_w) {
            *w -= LEARNING_RATE * (g / n + L2 * *w);
        }
    }

    let correlator = Correlator {
        weights,
        bias,
        means,
        stds,
    };
    let test_scores: Vec<f64> = test_idx
        .iter()
        .map(|&i| correlator.score(&pairs[i].0, &pairs[i].1))
        .collect();
    let test_labels: Vec<bool> = test_idx.iter().map(|&i| pairs[i].2).collect();
    let test_auc = compute_auc(&test_scores, &test_labels)?;
    Ok(TrainReport {
        correlator,
        test_auc,
        test_scores,
        test_labels,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Area under the ROC curve via the rank statistic: the fraction of
/// (positive, negative) pairs where the positive outscores the negative,
/// ties counting one half.
pub fn compute_auc(scores: &[f64], labels: &[bool]) -> Result<f64, AttackError> {
    assert_eq!(scores.len(), labels.len());
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(AttackError::DegenerateLabels);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());

    // Average ranks over tie groups (1-based ranks).
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let n_pos_f = n_pos as f64;
    let n_neg_f = n_neg as f64;
    Ok((rank_sum_pos - n_pos_f * (n_pos_f + 1.0) / 2.0) / (n_pos_f * n_neg_f))
}
