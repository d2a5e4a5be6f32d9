//! Ranking and agreement metrics.
//!
//! Metrics that need both classes return `None` when a split doesn't have
//! them (for example a rare label with no positives in validation); callers
//! average over the defined entries only via [`mean_defined`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::TaskKind;
use crate::tensor::Tensor;

/// Area under the ROC curve by the rank-sum route: sort once, assign average
/// ranks to tied scores, and count won pairs in closed form. `O(n log n)`.
/// `None` if either class is absent.
pub fn auroc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), positive.len(), "scores and labels must align");
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of 1-based ranks of the positives, ties sharing their average rank.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            if positive[idx] {
                rank_sum += avg_rank;
            }
        }
        i = j + 1;
    }
    let n_pos = n_pos as f64;
    Some((rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg as f64))
}

/// Area under the precision-recall curve as average precision: walk the
/// distinct score thresholds from high to low and sum
/// `(recall_step) * precision` at each. Tied scores enter as one threshold.
/// `None` if there are no positives.
pub fn auprc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), positive.len(), "scores and labels must align");
    let total_pos = positive.iter().filter(|&&p| p).count();
    if total_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut ap = 0.0;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        for &idx in &order[i..=j] {
            if positive[idx] {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / total_pos as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j + 1;
    }
    Some(ap)
}

/// Per-column AUROC of an `n x K` score matrix against 0/1 targets.
pub fn per_label_auroc(scores: &Tensor, targets: &Tensor) -> Vec<Option<f64>> {
    per_label(scores, targets, auroc)
}

/// Per-column AUPRC of an `n x K` score matrix against 0/1 targets.
pub fn per_label_auprc(scores: &Tensor, targets: &Tensor) -> Vec<Option<f64>> {
    per_label(scores, targets, auprc)
}

fn per_label(
    scores: &Tensor,
    targets: &Tensor,
    metric: fn(&[f64], &[bool]) -> Option<f64>,
) -> Vec<Option<f64>> {
    assert_eq!(scores.shape(), targets.shape(), "scores/targets shape");
    (0..scores.cols())
        .map(|c| {
            let col: Vec<f64> = (0..scores.rows()).map(|r| scores[(r, c)]).collect();
            let pos: Vec<bool> = (0..targets.rows())
                .map(|r| targets[(r, c)] >= 0.5)
                .collect();
            metric(&col, &pos)
        })
        .collect()
}

/// Mean over the defined entries; `None` when every entry is undefined.
pub fn mean_defined(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (c, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = c;
        }
    }
    best
}

/// `K x K` confusion counts from class indices, `counts[true][predicted]`.
pub fn confusion_from_classes(
    predicted: &[usize],
    truth: &[usize],
    k: usize,
) -> Result<Vec<Vec<usize>>> {
    if predicted.len() != truth.len() {
        return Err(Error::ShapeMismatch {
            op: "confusion_from_classes",
            lhs: (predicted.len(), 1),
            rhs: (truth.len(), 1),
        });
    }
    let mut counts = vec![vec![0usize; k]; k];
    for (&p, &t) in predicted.iter().zip(truth) {
        if p >= k || t >= k {
            return Err(Error::Config(format!(
                "class index out of range: predicted {p}, true {t}, classes {k}"
            )));
        }
        counts[t][p] += 1;
    }
    Ok(counts)
}

/// `K x K` confusion counts for a uni-label task, `counts[true][predicted]`,
/// predictions by argmax with ties to the lowest class index. Targets must
/// be one-hot rows.
pub fn confusion_matrix(probs: &Tensor, targets: &Tensor) -> Result<Vec<Vec<usize>>> {
    if probs.shape() != targets.shape() {
        return Err(Error::ShapeMismatch {
            op: "confusion_matrix",
            lhs: probs.shape(),
            rhs: targets.shape(),
        });
    }
    let mut predicted = Vec::with_capacity(probs.rows());
    let mut truth = Vec::with_capacity(probs.rows());
    for r in 0..probs.rows() {
        let row = targets.row(r);
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || row.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Config(format!(
                "target row {r} is not one-hot; confusion matrices are for uni-label tasks"
            )));
        }
        truth.push(row.iter().position(|&v| v == 1.0).unwrap());
        predicted.push(argmax_lowest(probs.row(r)));
    }
    confusion_from_classes(&predicted, &truth, probs.cols())
}

/// Per-class recall from a confusion matrix; `None` for classes with no
/// true rows.
pub fn per_class_recall(counts: &[Vec<usize>]) -> Vec<Option<f64>> {
    counts
        .iter()
        .enumerate()
        .map(|(k, row)| {
            let total: usize = row.iter().sum();
            if total == 0 {
                None
            } else {
                Some(row[k] as f64 / total as f64)
            }
        })
        .collect()
}

/// How many samples the two score matrices disagree on once both are
/// binarized at `tau` (score at or above the threshold counts as positive).
/// A sample counts once if the binarized rows differ on at least one label,
/// no matter how many labels flip.
pub fn disagreement_count(a: &Tensor, b: &Tensor, tau: f64) -> usize {
    assert_eq!(a.shape(), b.shape(), "disagreement needs matching shapes");
    (0..a.rows())
        .filter(|&r| {
            a.row(r)
                .iter()
                .zip(b.row(r))
                .any(|(&x, &y)| (x >= tau) != (y >= tau))
        })
        .count()
}

/// Per-class `(precision, recall)` after binarizing each class score at
/// `tau`. Precision is `None` when a class is never predicted, recall `None`
/// when it has no positives.
pub fn precision_recall_at(
    scores: &Tensor,
    targets: &Tensor,
    tau: f64,
) -> Vec<(Option<f64>, Option<f64>)> {
    assert_eq!(scores.shape(), targets.shape(), "scores/targets shape");
    (0..scores.cols())
        .map(|c| {
            let mut tp = 0usize;
            let mut fp = 0usize;
            let mut fn_ = 0usize;
            for r in 0..scores.rows() {
                let predicted = scores[(r, c)] >= tau;
                let actual = targets[(r, c)] >= 0.5;
                match (predicted, actual) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    (false, false) => {}
                }
            }
            let precision = if tp + fp == 0 {
                None
            } else {
                Some(tp as f64 / (tp + fp) as f64)
            };
            let recall = if tp + fn_ == 0 {
                None
            } else {
                Some(tp as f64 / (tp + fn_) as f64)
            };
            (precision, recall)
        })
        .collect()
}

/// Everything a finished run reports on one evaluation split. Undefined
/// entries (single-class labels, never-predicted classes) stay `None` and
/// are excluded from the means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_label_auroc: Vec<Option<f64>>,
    pub mean_auroc: Option<f64>,
    pub per_label_auprc: Vec<Option<f64>>,
    pub mean_auprc: Option<f64>,
    /// Per-class precision after binarizing each posterior at the threshold.
    pub precision: Vec<Option<f64>>,
    /// Per-class recall at the same threshold.
    pub recall: Vec<Option<f64>>,
    /// Argmax confusion counts, uni-label tasks only.
    pub confusion: Option<Vec<Vec<usize>>>,
}

/// Compute the full report for one score matrix against its targets.
pub fn full_report(
    probs: &Tensor,
    targets: &Tensor,
    kind: TaskKind,
    tau: f64,
) -> Result<MetricsReport> {
    if probs.shape() != targets.shape() {
        return Err(Error::ShapeMismatch {
            op: "full_report",
            lhs: probs.shape(),
            rhs: targets.shape(),
        });
    }
    let per_label_auroc = per_label_auroc(probs, targets);
    let per_label_auprc = per_label_auprc(probs, targets);
    let pr = precision_recall_at(probs, targets, tau);
    let confusion = match kind {
        TaskKind::UniLabel => Some(confusion_matrix(probs, targets)?),
        TaskKind::MultiLabel => None,
    };
    Ok(MetricsReport {
        mean_auroc: mean_defined(&per_label_auroc),
        mean_auprc: mean_defined(&per_label_auprc),
        per_label_auroc,
        per_label_auprc,
        precision: pr.iter().map(|&(p, _)| p).collect(),
        recall: pr.iter().map(|&(_, r)| r).collect(),
        confusion,
    })
}
