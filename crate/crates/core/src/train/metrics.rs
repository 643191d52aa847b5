//! Classification metrics: accuracy, macro F1 and one-vs-rest macro AUROC.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub f1_macro: f64,
    pub auroc: f64,
}

impl Metrics {
    /// Metrics for per-sample class scores (probabilities or logits).
    pub fn from_scores(labels: &[usize], scores: &[Vec<f64>], n_classes: usize) -> Self {
        let preds: Vec<usize> = scores.iter().map(|s| argmax(s)).collect();
        Self {
            accuracy: accuracy(labels, &preds),
            f1_macro: f1_macro(labels, &preds, n_classes),
            auroc: auroc_macro(labels, scores, n_classes),
        }
    }
}

/// Index of the largest score; ties resolve to the lowest index.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(labels: &[usize], preds: &[usize]) -> f64 {
    assert_eq!(labels.len(), preds.len());
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels.iter().zip(preds).filter(|(a, b)| a == b).count();
    hits as f64 / labels.len() as f64
}

/// Unweighted mean of per-class F1 over the classes that occur in either the
/// labels or the predictions.
pub fn f1_macro(labels: &[usize], preds: &[usize], n_classes: usize) -> f64 {
    assert_eq!(labels.len(), preds.len());
    let mut tp = vec![0usize; n_classes];
    let mut fp = vec![0usize; n_classes];
    let mut fneg = vec![0usize; n_classes];
    for (&y, &p) in labels.iter().zip(preds) {
        if y == p {
            tp[y] += 1;
        } else {
            fp[p] += 1;
            fneg[y] += 1;
        }
    }
    let mut total = 0.0;
    let mut seen = 0;
    for c in 0..n_classes {
        let denom = 2 * tp[c] + fp[c] + fneg[c];
        if denom == 0 {
            continue;
        }
        seen += 1;
        total += 2.0 * tp[c] as f64 / denom as f64;
    }
    if seen == 0 {
        0.0
    } else {
        total / seen as f64
    }
}

/// Area under the ROC curve for one binary problem, via the rank-sum
/// statistic with tied scores sharing their average rank.
pub fn binary_auroc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share their mean
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let np = n_pos as f64;
    Some((rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

/// One-vs-rest AUROC averaged over classes that have both positive and
/// negative samples; 0.5 when no class qualifies.
pub fn auroc_macro(labels: &[usize], scores: &[Vec<f64>], n_classes: usize) -> f64 {
    let aucs: Vec<f64> = (0..n_classes)
        .filter_map(|c| {
            let s: Vec<f64> = scores.iter().map(|row| row[c]).collect();
            let pos: Vec<bool> = labels.iter().map(|&y| y == c).collect();
            binary_auroc(&s, &pos)
        })
        .collect();
    if aucs.is_empty() {
        0.5
    } else {
        aucs.iter().sum::<f64>() / aucs.len() as f64
    }
}

/// Softmax of a logit row.
pub fn probabilities(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
