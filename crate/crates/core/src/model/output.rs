use crate::ehr::Task;
use crate::linalg::{sigmoid, softmax};

use super::OutputParams;

/// Probabilities are clamped to `[ε, 1 − ε]` before taking logs.
pub const PROB_CLAMP: f64 = 1e-8;

/// `Softmax(W h + b)` for the sequential task, `σ(w·h + b)` for binary.
pub fn predict(hidden: &[f64], op: &OutputParams, task: Task) -> Vec<f64> {
    let mut logits = op.b.clone();
    op.w.mul_vec_add(hidden, &mut logits);
    match task {
        Task::Sequential => softmax(&logits),
        Task::Binary => logits.iter().map(|&z| sigmoid(z)).collect(),
    }
}

fn is_positive(labels: &[usize], k: usize) -> bool {
    labels.binary_search(&k).is_ok()
}

/// Binary cross-entropy of one prediction against a sorted label set,
/// summed over every output coordinate.
pub(crate) fn step_bce(probs: &[f64], labels: &[usize]) -> f64 {
    probs
        .iter()
        .enumerate()
        .map(|(k, &p)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            if is_positive(labels, k) {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum()
}

/// `dL/dlogits` for [`step_bce`], scaled by `scale`. Clamped coordinates
/// contribute nothing.
pub(crate) fn step_logit_grad(probs: &[f64], labels: &[usize], task: Task, scale: f64) -> Vec<f64> {
    let d_prob: Vec<f64> = probs
        .iter()
        .enumerate()
        .map(|(k, &p)| {
            if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
                0.0
            } else if is_positive(labels, k) {
                -scale / p
            } else {
                scale / (1.0 - p)
            }
        })
        .collect();
    match task {
        Task::Sequential => {
            let mean: f64 = probs.iter().zip(&d_prob).map(|(p, d)| p * d).sum();
            probs.iter().zip(&d_prob).map(|(p, d)| p * (d - mean)).collect()
        }
        Task::Binary => probs.iter().zip(&d_prob).map(|(p, d)| d * p * (1.0 - p)).collect(),
    }
}

/// Mean over steps of the summed binary cross-entropy; `labels[t]` holds the
/// positive coordinates of step `t`.
pub fn loss(predictions: &[Vec<f64>], labels: &[Vec<usize>]) -> f64 {
    assert_eq!(predictions.len(), labels.len(), "one label set per prediction");
    let total: f64 = predictions
        .iter()
        .zip(labels)
        .map(|(p, y)| step_bce(p, y))
        .sum();
    total / predictions.len() as f64
}
