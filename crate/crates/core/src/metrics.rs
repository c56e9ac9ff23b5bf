//! Evaluation metrics: AUROC by rank statistic and Dice overlap.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Area under the ROC curve via the Mann-Whitney rank statistic, ties
/// counting one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return shape_err(format!("{} scores for {} labels", scores.len(), labels.len()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!("auroc needs both classes ({pos} positive, {neg} negative)")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::UndefinedMetric("auroc over NaN scores".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the (1-based) average rank keeps tied ranks integral
    let mut pos_rank2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let rank2 = (i + 1 + j + 1) as u128;
        for &k in &order[i..=j] {
            if labels[k] {
                pos_rank2 += rank2;
            }
        }
        i = j + 1;
    }
    let (p, n) = (pos as u128, neg as u128);
    // 2U = sum of doubled ranks - P(P+1)
    let u2 = pos_rank2 - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiLabelAuroc {
    /// `None` for classes whose labels are single-valued.
    pub per_class: Vec<Option<f64>>,
    /// Unweighted mean over the defined classes.
    pub mean: Option<f64>,
}

/// Per-class AUROC for `scores[sample][class]`.
pub fn multilabel_auroc(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<MultiLabelAuroc> {
    if scores.len() != labels.len() {
        return shape_err("score and label rows differ");
    }
    let classes = scores.first().map_or(0, Vec::len);
    if scores.iter().any(|r| r.len() != classes) || labels.iter().any(|r| r.len() != classes) {
        return shape_err("ragged score or label rows");
    }
    let mut per_class = Vec::with_capacity(classes);
    for c in 0..classes {
        let s: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        let l: Vec<bool> = labels.iter().map(|r| r[c]).collect();
        match auroc(&s, &l) {
            Ok(v) => per_class.push(Some(v)),
            Err(Error::UndefinedMetric(msg)) => {
                log::warn!("class {c} excluded from mean AUROC: {msg}");
                per_class.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(MultiLabelAuroc { per_class, mean })
}

/// `2|A ∩ B| / (|A| + |B|)`, defined as 1 when both masks are empty.
pub fn dice(pred: &[bool], gt: &[bool]) -> Result<f64> {
    if pred.len() != gt.len() {
        return shape_err(format!("dice over masks of {} and {} voxels", pred.len(), gt.len()));
    }
    let a = pred.iter().filter(|&&p| p).count();
    let b = gt.iter().filter(|&&p| p).count();
    let inter = pred.iter().zip(gt).filter(|(p, g)| **p && **g).count();
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}
