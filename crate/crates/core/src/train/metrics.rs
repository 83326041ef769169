//! Threshold-free and thresholded classification metrics.

use std::cmp::Ordering;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricError {
    #[error("AUC needs both classes; got only class {0}")]
    SingleClass(u8),
    #[error("scores and labels differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
}

/// Area under the ROC curve via midranks (Mann-Whitney U over n₊n₋).
pub fn auc_roc(scores: &[f64], labels: &[u8]) -> Result<f64, MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch(scores.len(), labels.len()));
    }
    let n_pos = labels.iter().filter(|&&l| l != 0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::SingleClass(u8::from(n_pos > 0)));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the midrank keeps the rank sum integral
    let mut rank2_sum_pos: u64 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]].total_cmp(&scores[idx[i]]) == Ordering::Equal
        {
            j += 1;
        }
        // ranks i+1..=j+1, midrank*2 = i + j + 2
        let r2 = (i + j + 2) as u64;
        for &k in &idx[i..=j] {
            if labels[k] != 0 {
                rank2_sum_pos += r2;
            }
        }
        i = j + 1;
    }
    let np = n_pos as u64;
    // 2U = 2·R₊ − n₊(n₊+1)
    let u2 = rank2_sum_pos - np * (np + 1);
    Ok(u2 as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1_macro: f64,
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

fn ratio(num: u64, den: u64, what: &str) -> f64 {
    if den == 0 {
        log::warn!("{what} undefined (zero denominator); reported as 0");
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Positive-class precision and recall plus macro-averaged F1 over both
/// classes. A sample is predicted positive when `score >= threshold`.
pub fn prf_metrics(scores: &[f64], labels: &[u8], threshold: f64) -> Prf {
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    prf_from_counts(tp, fp, tn, fn_)
}

pub fn prf_from_counts(tp: u64, fp: u64, tn: u64, fn_: u64) -> Prf {
    let f1_pos = ratio(2 * tp, 2 * tp + fp + fn_, "positive-class F1");
    let f1_neg = ratio(2 * tn, 2 * tn + fn_ + fp, "negative-class F1");
    Prf {
        precision: ratio(tp, tp + fp, "precision"),
        recall: ratio(tp, tp + fn_, "recall"),
        f1_macro: (f1_pos + f1_neg) / 2.0,
        tp,
        fp,
        tn,
        fn_,
    }
}

/// Counts `[true][predicted]`.
pub fn confusion_matrix(predicted: &[usize], truth: &[usize], classes: usize) -> Vec<Vec<u64>> {
    let mut m = vec![vec![0u64; classes]; classes];
    for (&p, &t) in predicted.iter().zip(truth) {
        m[t][p] += 1;
    }
    m
}

/// Each row divided by its total; empty rows stay zero.
pub fn row_normalize(m: &[Vec<u64>]) -> Vec<Vec<f64>> {
    m.iter()
        .map(|row| {
            let s: u64 = row.iter().sum();
            row.iter()
                .map(|&v| if s == 0 { 0.0 } else { v as f64 / s as f64 })
                .collect()
        })
        .collect()
}

/// Index of the largest probability; ties go to the lower class.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// One-vs-rest AUC averaged over the classes that have both positive and
/// negative samples. `None` if no class qualifies.
pub fn macro_ovr_auc(probs: &[Vec<f64>], truth: &[usize], classes: usize) -> Option<f64> {
    let mut aucs = Vec::new();
    for c in 0..classes {
        let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
        let labels: Vec<u8> = truth.iter().map(|&t| u8::from(t == c)).collect();
        if let Ok(a) = auc_roc(&scores, &labels) {
            aucs.push(a);
        }
    }
    (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64)
}

/// Mean and 95% normal-approximation half-width `1.96·sd/√n` (sample sd).
pub fn mean_ci(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * var.sqrt() / (n as f64).sqrt())
}
