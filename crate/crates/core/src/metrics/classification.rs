//! Multi-label classification metrics over per-class probabilities.

use serde::{Deserialize, Serialize};

use crate::entity_ingest::{LabelVector, NUM_LABELS};
use crate::error::{Error, Result};

pub const CLASSIFICATION_COLUMNS: [&str; 6] = ["HL", "RL", "mAP", "AUC", "JI", "F1"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub hamming_loss: f64,
    pub ranking_loss: f64,
    pub mean_average_precision: f64,
    pub auc: f64,
    pub jaccard: f64,
    pub micro_f1: f64,
}

impl ClassificationMetrics {
    /// Values in [`CLASSIFICATION_COLUMNS`] order.
    pub fn to_row(&self) -> Vec<f64> {
        vec![
            self.hamming_loss,
            self.ranking_loss,
            self.mean_average_precision,
            self.auc,
            self.jaccard,
            self.micro_f1,
        ]
    }
}

/// Fraction of (positive, negative) label pairs of one sample where the
/// negative scores at least as high; zero when either set is empty.
pub fn sample_ranking_loss(scores: &[f64], truth: &[bool]) -> f64 {
    let mut neg: Vec<f64> = scores.iter().zip(truth).filter(|(_, &t)| !t).map(|(&s, _)| s).collect();
    let npos = truth.iter().filter(|&&t| t).count();
    if npos == 0 || neg.is_empty() {
        return 0.0;
    }
    neg.sort_by(f64::total_cmp);
    let bad: usize = scores
        .iter()
        .zip(truth)
        .filter(|(_, &t)| t)
        .map(|(&s, _)| neg.len() - neg.partition_point(|&n| n < s))
        .sum();
    bad as f64 / (npos * neg.len()) as f64
}

/// Mid-ranks (1-based) of `x`; tied values share the mean of their ranks.
fn midranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
    let mut ranks = vec![0.0; x.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && x[order[end]] == x[order[start]] {
            end += 1;
        }
        let r = (start + end + 1) as f64 / 2.0;
        order[start..end].iter().for_each(|&i| ranks[i] = r);
        start = end;
    }
    ranks
}

/// Area under the ROC curve via the Mann–Whitney statistic; ties count one
/// half. `None` when a class has no positives or no negatives.
pub fn roc_auc(scores: &[f64], truth: &[bool]) -> Option<f64> {
    let npos = truth.iter().filter(|&&t| t).count();
    let nneg = truth.len() - npos;
    if npos == 0 || nneg == 0 {
        return None;
    }
    let ranks = midranks(scores);
    let rank_sum: f64 = ranks.iter().zip(truth).filter(|(_, &t)| t).map(|(r, _)| r).sum();
    let u = rank_sum - (npos * (npos + 1)) as f64 / 2.0;
    Some(u / (npos * nneg) as f64)
}

/// Average precision as the step-wise sum `Σ (R_k − R_{k−1}) P_k` over
/// distinct score thresholds, highest first. `None` without positives.
pub fn average_precision(scores: &[f64], truth: &[bool]) -> Option<f64> {
    let npos = truth.iter().filter(|&&t| t).count();
    if npos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]));
    let (mut tp, mut seen, mut ap, mut prev_recall) = (0usize, 0usize, 0.0, 0.0);
    let mut k = 0;
    while k < order.len() {
        let s = scores[order[k]];
        while k < order.len() && scores[order[k]] == s {
            tp += truth[order[k]] as usize;
            seen += 1;
            k += 1;
        }
        let recall = tp as f64 / npos as f64;
        ap += (recall - prev_recall) * (tp as f64 / seen as f64);
        prev_recall = recall;
    }
    Some(ap)
}

/// Hamming loss, ranking loss, macro mAP, macro AUC, mean Jaccard index and
/// micro-F1. Classes without positives (mAP) or without positives or
/// negatives (AUC) are left out of the macro averages with a warning.
pub fn classification_metrics(
    scores: &[[f64; NUM_LABELS]],
    labels: &[LabelVector],
    threshold: f64,
) -> Result<ClassificationMetrics> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!("{} predictions for {} label vectors", scores.len(), labels.len())));
    }
    if scores.is_empty() {
        return Err(Error::Metric("no samples to score".into()));
    }
    if scores.iter().flatten().any(|p| !p.is_finite()) {
        return Err(Error::NonFinite("classification scores".into()));
    }
    let n = scores.len();
    let (mut wrong, mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize, 0usize);
    let mut jaccard = 0.0;
    let mut ranking = 0.0;
    for (p, y) in scores.iter().zip(labels) {
        let (mut inter, mut union) = (0usize, 0usize);
        for c in 0..NUM_LABELS {
            let (pred, truth) = (p[c] >= threshold, y.0[c]);
            wrong += (pred != truth) as usize;
            inter += (pred && truth) as usize;
            union += (pred || truth) as usize;
            tp += (pred && truth) as usize;
            fp += (pred && !truth) as usize;
            fneg += (!pred && truth) as usize;
        }
        jaccard += if union == 0 { 1.0 } else { inter as f64 / union as f64 };
        ranking += sample_ranking_loss(p, &y.0);
    }
    let (mut aps, mut aucs) = (Vec::new(), Vec::new());
    for c in 0..NUM_LABELS {
        let column: Vec<f64> = scores.iter().map(|p| p[c]).collect();
        let truth: Vec<bool> = labels.iter().map(|y| y.0[c]).collect();
        match average_precision(&column, &truth) {
            Some(ap) => aps.push(ap),
            None => log::warn!("class {c} has no positive samples; left out of mAP"),
        }
        match roc_auc(&column, &truth) {
            Some(a) => aucs.push(a),
            None => log::warn!("class {c} lacks positives or negatives; left out of AUC"),
        }
    }
    if aps.is_empty() || aucs.is_empty() {
        return Err(Error::Metric("every class is degenerate; mAP and AUC are undefined".into()));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let denom = 2 * tp + fp + fneg;
    Ok(ClassificationMetrics {
        hamming_loss: wrong as f64 / (n * NUM_LABELS) as f64,
        ranking_loss: ranking / n as f64,
        mean_average_precision: mean(&aps),
        auc: mean(&aucs),
        jaccard: jaccard / n as f64,
        micro_f1: if denom == 0 { 1.0 } else { (2 * tp) as f64 / denom as f64 },
    })
}
