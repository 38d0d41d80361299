use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::math;

/// One evaluated (task, protocol, seed) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub task: String,
    pub protocol: String,
    pub auroc: f64,
    pub balacc: f64,
    pub probe_seed: u64,
    pub dropout_seed: Option<u64>,
}

/// Per-example binary focal loss on a logit; logs are clamped at 1e-12.
pub fn focal_loss(logit: f64, label: u8, alpha: f64, gamma: f64) -> f64 {
    crate::tensor::focal_value(logit, f64::from(label), alpha, gamma)
}

fn class_counts(labels: &[u8]) -> (usize, usize) {
    let pos = labels.iter().filter(|l| **l != 0).count();
    (pos, labels.len() - pos)
}

/// Rank-based (Mann–Whitney) AUROC with half credit for ties.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::Length(scores.len(), labels.len()));
    }
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        return Err(EvalError::SingleClass);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum of positives, so tied groups stay in integers.
    let mut rank2_pos: u128 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        // Ranks i+1..=j share the mean rank (i + 1 + j) / 2.
        let n_pos = idx[i..j].iter().filter(|&&k| labels[k] != 0).count() as u128;
        rank2_pos += n_pos * (i as u128 + 1 + j as u128);
        i = j;
    }
    let (p, n) = (pos as u128, neg as u128);
    let u2 = rank2_pos - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

/// `(TPR + TNR) / 2` with positives predicted at `sigmoid(logit) ≥ 0.5`.
pub fn balanced_accuracy(logits: &[f64], labels: &[u8]) -> Result<f64, EvalError> {
    if logits.len() != labels.len() {
        return Err(EvalError::Length(logits.len(), labels.len()));
    }
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        return Err(EvalError::SingleClass);
    }
    let (mut tp, mut tn) = (0usize, 0usize);
    for (z, y) in logits.iter().zip(labels) {
        let pred = math::sigmoid(*z) >= 0.5;
        match (pred, *y != 0) {
            (true, true) => tp += 1,
            (false, false) => tn += 1,
            _ => {}
        }
    }
    Ok(0.5 * (tp as f64 / pos as f64 + tn as f64 / neg as f64))
}
