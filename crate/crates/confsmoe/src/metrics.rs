//! Classification metrics: macro-F1 and one-vs-rest ROC-AUC via the
//! rank-statistic (Mann–Whitney with midrank tie correction).

use crate::error::{Error, Result};
use confsmoe_core::Mat;

/// Unweighted mean over classes of per-class F1. A class absent from both
/// truth and predictions contributes F1 = 0.
pub fn f1_macro(y_true: &[usize], y_pred: &[usize], num_classes: usize) -> Result<f64> {
    if y_true.is_empty() || y_true.len() != y_pred.len() {
        return Err(Error::Metric(format!(
            "f1_macro needs matched nonempty labels, got {} vs {}",
            y_true.len(),
            y_pred.len()
        )));
    }
    if num_classes < 2 {
        return Err(Error::Metric("f1_macro needs at least 2 classes".into()));
    }
    if y_true.iter().chain(y_pred).any(|&y| y >= num_classes) {
        return Err(Error::Metric("label outside [0, C)".into()));
    }
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fne = vec![0usize; num_classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t == p {
            tp[t] += 1;
        } else {
            fp[p] += 1;
            fne[t] += 1;
        }
    }
    let mut total = 0.0;
    for c in 0..num_classes {
        let denom = 2 * tp[c] + fp[c] + fne[c];
        if denom > 0 {
            total += 2.0 * tp[c] as f64 / denom as f64;
        }
    }
    Ok(total / num_classes as f64)
}

/// Midranks (1-based) of a score slice; ties share the average rank.
fn midranks(scores: &[f64]) -> Vec<f64> {
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0; // mean of ranks i+1 ..= j+1
        for &o in &order[i..=j] {
            ranks[o] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// One-vs-rest ROC-AUC per class via the U statistic, macro-averaged over
/// classes with at least one positive and one negative; errors if every
/// class is degenerate.
pub fn auc_ovr(y_true: &[usize], class_scores: &Mat, num_classes: usize) -> Result<f64> {
    if y_true.is_empty() || class_scores.rows() != y_true.len() {
        return Err(Error::Metric(format!(
            "auc_ovr needs matched nonempty inputs, got {} labels and {} score rows",
            y_true.len(),
            class_scores.rows()
        )));
    }
    if class_scores.cols() != num_classes {
        return Err(Error::Metric(format!(
            "score matrix has {} columns for {num_classes} classes",
            class_scores.cols()
        )));
    }
    let mut total = 0.0;
    let mut used = 0;
    for c in 0..num_classes {
        let n_pos = y_true.iter().filter(|&&y| y == c).count();
        let n_neg = y_true.len() - n_pos;
        if n_pos == 0 || n_neg == 0 {
            continue;
        }
        let scores: Vec<f64> = (0..y_true.len()).map(|i| class_scores[(i, c)]).collect();
        let ranks = midranks(&scores);
        let rank_sum: f64 = y_true
            .iter()
            .zip(&ranks)
            .filter(|(&y, _)| y == c)
            .map(|(_, &r)| r)
            .sum();
        let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
        total += u / (n_pos * n_neg) as f64;
        used += 1;
    }
    if used == 0 {
        return Err(Error::Metric(
            "auc_ovr undefined: every class lacks positives or negatives".into(),
        ));
    }
    Ok(total / used as f64)
}
