//! Accuracy, macro-F1 and macro one-vs-rest ROC AUC.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::Vector;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub macro_auc: f64,
}

/// Per-fold metrics with their mean and population standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub folds: Vec<Metrics>,
    pub mean: Metrics,
    pub std: Metrics,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl MetricsReport {
    pub fn from_folds(folds: Vec<Metrics>) -> Result<Self> {
        if folds.is_empty() {
            return Err(Error::invalid("metrics report needs at least one fold"));
        }
        let col = |f: fn(&Metrics) -> f64| mean_std(&folds.iter().map(f).collect::<Vec<_>>());
        let (acc_m, acc_s) = col(|m| m.accuracy);
        let (f1_m, f1_s) = col(|m| m.macro_f1);
        let (auc_m, auc_s) = col(|m| m.macro_auc);
        Ok(Self {
            mean: Metrics {
                accuracy: acc_m,
                macro_f1: f1_m,
                macro_auc: auc_m,
            },
            std: Metrics {
                accuracy: acc_s,
                macro_f1: f1_s,
                macro_auc: auc_s,
            },
            folds,
        })
    }
}

/// Argmax predictions, ties toward the lowest class index.
pub fn predictions(probs: &[Vector]) -> Vec<usize> {
    probs.iter().map(|p| p.argmax().unwrap_or(0)).collect()
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

/// Unweighted mean of per-class F1. A class with no predictions and no
/// positives contributes 0.
pub fn macro_f1(pred: &[usize], labels: &[usize], classes: usize) -> f64 {
    if classes == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for c in 0..classes {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fn_ = 0usize;
        for (&p, &l) in pred.iter().zip(labels) {
            match (p == c, l == c) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        let denom = 2 * tp + fp + fn_;
        if denom > 0 {
            total += 2.0 * tp as f64 / denom as f64;
        }
    }
    total / classes as f64
}

/// Area under the ROC curve via midranks, which equals the trapezoidal
/// area with ties counted as half. `None` unless both classes are present.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks are 1-based; tied block i..=j shares the average.
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = mid;
        }
        i = j + 1;
    }
    let pos_rank_sum: f64 = ranks
        .iter()
        .zip(positive)
        .filter(|(_, &p)| p)
        .map(|(r, _)| r)
        .sum();
    let u = pos_rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}

/// Mean one-vs-rest AUC over the classes where it is defined; 0.5 if none are.
pub fn macro_auc(probs: &[Vector], labels: &[usize], classes: usize) -> f64 {
    let aucs: Vec<f64> = (0..classes)
        .filter_map(|c| {
            let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
            let positive: Vec<bool> = labels.iter().map(|&l| l == c).collect();
            binary_auc(&scores, &positive)
        })
        .collect();
    if aucs.is_empty() {
        0.5
    } else {
        aucs.iter().sum::<f64>() / aucs.len() as f64
    }
}

pub fn compute_metrics(probs: &[Vector], labels: &[usize], classes: usize) -> Result<Metrics> {
    if probs.is_empty() {
        return Err(Error::invalid("no predictions to score"));
    }
    if probs.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let pred = predictions(probs);
    Ok(Metrics {
        accuracy: accuracy(&pred, labels),
        macro_f1: macro_f1(&pred, labels, classes),
        macro_auc: macro_auc(probs, labels, classes),
    })
}
