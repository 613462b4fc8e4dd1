//! ROC-AUC, average precision, F1 and accuracy, with macro aggregation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Computed from average ranks in `O(n log n)`.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch(scores.len(), labels.len()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of (1-based, tie-averaged) ranks of the positives, doubled to stay integral.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let twice_avg = (i + 1 + j + 1) as u128;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k]).count() as u128;
        twice_rank_sum += twice_avg * pos_in_group;
        i = j + 1;
    }
    let (p, n) = (n_pos as u128, n_neg as u128);
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * p * n) as f64)
}

/// `AP = Σ_k (R_k − R_{k−1}) · P_k` over a sweep in (score desc, index asc)
/// order, one item at a time.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch(scores.len(), labels.len()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return Err(Error::NoPositives);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut tp = 0usize;
    let mut ap = 0.0;
    for (k, &i) in order.iter().enumerate() {
        if labels[i] {
            tp += 1;
            ap += tp as f64 / (k + 1) as f64;
        }
    }
    Ok(ap / n_pos as f64)
}

/// `2TP / (2TP + FP + FN)`, or `None` when the class never occurs.
pub fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> Option<f64> {
    let denom = 2 * tp + fp + fn_;
    (denom > 0).then(|| 2.0 * tp as f64 / denom as f64)
}

/// F1 of the positive class.
pub fn f1_binary(pred: &[bool], truth: &[bool]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch(pred.len(), truth.len()));
    }
    let (tp, fp, fn_) = binary_counts(pred, truth);
    Ok(f1_from_counts(tp, fp, fn_).unwrap_or(1.0))
}

fn binary_counts(pred: &[bool], truth: &[bool]) -> (usize, usize, usize) {
    pred.iter().zip(truth).fold((0, 0, 0), |(tp, fp, fn_), (&p, &t)| match (p, t) {
        (true, true) => (tp + 1, fp, fn_),
        (true, false) => (tp, fp + 1, fn_),
        (false, true) => (tp, fp, fn_ + 1),
        (false, false) => (tp, fp, fn_),
    })
}

/// Macro F1 over classes that occur in either list, and exact-match accuracy.
pub fn f1_and_accuracy_multiclass(pred: &[usize], truth: &[usize], classes: usize) -> Result<(f64, f64)> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some(&c) = pred.iter().chain(truth).find(|&&c| c >= classes) {
        return Err(Error::ClassOutOfRange { class: c, classes });
    }
    let f1s: Vec<f64> = (0..classes)
        .filter_map(|c| {
            let p: Vec<bool> = pred.iter().map(|&x| x == c).collect();
            let t: Vec<bool> = truth.iter().map(|&x| x == c).collect();
            let (tp, fp, fn_) = binary_counts(&p, &t);
            f1_from_counts(tp, fp, fn_)
        })
        .collect();
    let f1 = f1s.iter().sum::<f64>() / f1s.len() as f64;
    let acc = pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / pred.len() as f64;
    Ok((f1, acc))
}

/// Macro F1 over labels (labels that never occur count as 1) and mean
/// per-label accuracy. Rows are samples.
pub fn f1_and_accuracy_multilabel(pred: &[Vec<bool>], truth: &[Vec<bool>]) -> Result<(f64, f64)> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch(pred.len(), truth.len()));
    }
    let l = truth.first().ok_or(Error::EmptyDataset)?.len();
    if let Some(bad) = pred.iter().chain(truth).find(|r| r.len() != l) {
        return Err(Error::LengthMismatch(bad.len(), l));
    }
    let mut f1 = 0.0;
    let mut correct = 0usize;
    for j in 0..l {
        let p: Vec<bool> = pred.iter().map(|r| r[j]).collect();
        let t: Vec<bool> = truth.iter().map(|r| r[j]).collect();
        f1 += f1_binary(&p, &t)?;
        correct += p.iter().zip(&t).filter(|(a, b)| a == b).count();
    }
    Ok((f1 / l as f64, correct as f64 / (l * pred.len()) as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    /// Absent when the class has no positives or no negatives.
    pub auc: Option<f64>,
    pub auprc: Option<f64>,
    pub f1: Option<f64>,
    pub n_pos: usize,
    pub n_neg: usize,
}

/// Aggregate evaluation result. Headline values are macro averages over
/// classes (one-vs-rest) or labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub auc: f64,
    pub auprc: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    /// Positives / negatives of class 1 (multiclass) or all labels (multilabel).
    pub n_pos: usize,
    pub n_neg: usize,
}

fn class_metrics(scores: &[f64], truth: &[bool], pred: &[bool]) -> ClassMetrics {
    let n_pos = truth.iter().filter(|&&t| t).count();
    let (tp, fp, fn_) = binary_counts(pred, truth);
    ClassMetrics {
        auc: roc_auc(scores, truth).ok(),
        auprc: average_precision(scores, truth).ok(),
        f1: f1_from_counts(tp, fp, fn_),
        n_pos,
        n_neg: truth.len() - n_pos,
    }
}

fn macro_mean(values: impl Iterator<Item = Option<f64>>) -> Result<f64> {
    let v: Vec<f64> = values.flatten().collect();
    if v.is_empty() {
        return Err(Error::SingleClass);
    }
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// Report for `[N, C]` class probabilities against class indices.
pub fn report_multiclass(probs: &[Vec<f64>], labels: &[usize]) -> Result<MetricReport> {
    if probs.len() != labels.len() {
        return Err(Error::LengthMismatch(probs.len(), labels.len()));
    }
    let c = probs.first().ok_or(Error::EmptyDataset)?.len();
    let pred: Vec<usize> = probs
        .iter()
        .map(|p| (0..c).fold(0, |best, j| if p[j] > p[best] { j } else { best }))
        .collect();
    let (f1, accuracy) = f1_and_accuracy_multiclass(&pred, labels, c)?;
    let per_class: Vec<ClassMetrics> = (0..c)
        .map(|j| {
            let s: Vec<f64> = probs.iter().map(|p| p[j]).collect();
            let t: Vec<bool> = labels.iter().map(|&l| l == j).collect();
            let pr: Vec<bool> = pred.iter().map(|&l| l == j).collect();
            class_metrics(&s, &t, &pr)
        })
        .collect();
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    Ok(MetricReport {
        auc: macro_mean(per_class.iter().map(|m| m.auc))?,
        auprc: macro_mean(per_class.iter().map(|m| m.auprc))?,
        f1,
        accuracy,
        per_class,
        n_pos,
        n_neg: labels.len() - n_pos,
    })
}

/// Report for `[N, L]` sigmoid probabilities against multi-hot targets;
/// predictions threshold at 0.5.
pub fn report_multilabel(probs: &[Vec<f64>], truth: &[Vec<bool>]) -> Result<MetricReport> {
    if probs.len() != truth.len() {
        return Err(Error::LengthMismatch(probs.len(), truth.len()));
    }
    let l = probs.first().ok_or(Error::EmptyDataset)?.len();
    let pred: Vec<Vec<bool>> = probs.iter().map(|p| p.iter().map(|&v| v >= 0.5).collect()).collect();
    let (f1, accuracy) = f1_and_accuracy_multilabel(&pred, truth)?;
    let per_class: Vec<ClassMetrics> = (0..l)
        .map(|j| {
            let s: Vec<f64> = probs.iter().map(|p| p[j]).collect();
            let t: Vec<bool> = truth.iter().map(|r| r[j]).collect();
            let pr: Vec<bool> = pred.iter().map(|r| r[j]).collect();
            class_metrics(&s, &t, &pr)
        })
        .collect();
    let n_pos = per_class.iter().map(|m| m.n_pos).sum();
    let n_neg = per_class.iter().map(|m| m.n_neg).sum();
    Ok(MetricReport {
        auc: macro_mean(per_class.iter().map(|m| m.auc))?,
        auprc: macro_mean(per_class.iter().map(|m| m.auprc))?,
        f1,
        accuracy,
        per_class,
        n_pos,
        n_neg,
    })
}
