use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scores and labels of one regime on the validation set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSet {
    pub regime: String,
    pub ids: Vec<String>,
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

impl ScoredSet {
    pub fn new(regime: impl Into<String>, ids: Vec<String>, scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if ids.len() != scores.len() || scores.len() != labels.len() {
            return Err(Error::Invalid(format!(
                "scored set lengths differ: {} ids, {} scores, {} labels",
                ids.len(),
                scores.len(),
                labels.len()
            )));
        }
        Ok(Self {
            regime: regime.into(),
            ids,
            scores,
            labels,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// `(fpr, tpr)` from `(0, 0)` to `(1, 1)`, one point per distinct score.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
    /// `2·U` of the Mann–Whitney statistic: twice the number of
    /// positive-over-negative pairs plus the number of tied pairs.
    pub twice_u: u128,
    pub positives: usize,
    pub negatives: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    /// `(recall, precision)`, starting at `(0, 1)`, one point per distinct
    /// score at which recall increases.
    pub points: Vec<(f64, f64)>,
    /// Average precision: `Σ (R_k - R_{k-1}) · P_k`.
    pub average_precision: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveReport {
    pub roc_points: Vec<(f64, f64)>,
    pub pr_points: Vec<(f64, f64)>,
    pub roc_auc: f64,
    pub pr_auc: f64,
}

/// Cumulative `(tp, fp)` at the end of each group of tied scores, scanning
/// from the highest score down.
fn sweep(scores: &[f64], labels: &[u8]) -> Result<(Vec<(usize, usize)>, usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Invalid(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Invalid(format!("label {l} outside {{0,1}}")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Invalid("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    let mut steps = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        steps.push((tp, fp));
    }
    Ok((steps, pos, neg))
}

/// ROC curve over all distinct thresholds; the trapezoid area is computed on
/// integer counts, which makes it equal to the Mann–Whitney statistic with
/// ties credited one half.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<RocCurve> {
    let (steps, pos, neg) = sweep(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::Invalid("ROC needs both classes".into()));
    }
    let mut points = vec![(0.0, 0.0)];
    let mut twice_u: u128 = 0;
    let (mut ptp, mut pfp) = (0usize, 0usize);
    for &(tp, fp) in &steps {
        twice_u += ((fp - pfp) as u128) * ((tp + ptp) as u128);
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
        (ptp, pfp) = (tp, fp);
    }
    let auc = twice_u as f64 / (2 * pos as u128 * neg as u128) as f64;
    Ok(RocCurve {
        points,
        auc,
        twice_u,
        positives: pos,
        negatives: neg,
    })
}

/// Precision-recall curve and average precision (step integration, not the
/// trapezoid rule).
pub fn pr_auc(scores: &[f64], labels: &[u8]) -> Result<PrCurve> {
    let (steps, pos, _) = sweep(scores, labels)?;
    if pos == 0 {
        return Err(Error::Invalid("precision-recall needs at least one positive".into()));
    }
    let mut points = vec![(0.0, 1.0)];
    let mut ap = 0.0;
    let mut prev_tp = 0;
    for &(tp, fp) in &steps {
        if tp > prev_tp {
            let precision = tp as f64 / (tp + fp) as f64;
            let recall = tp as f64 / pos as f64;
            ap += (tp - prev_tp) as f64 / pos as f64 * precision;
            points.push((recall, precision));
            prev_tp = tp;
        }
    }
    Ok(PrCurve {
        points,
        average_precision: ap,
    })
}

pub fn curve_report(set: &ScoredSet) -> Result<CurveReport> {
    let roc = roc_auc(&set.scores, &set.labels)?;
    let pr = pr_auc(&set.scores, &set.labels)?;
    Ok(CurveReport {
        roc_points: roc.points,
        pr_points: pr.points,
        roc_auc: roc.auc,
        pr_auc: pr.average_precision,
    })
}

/// Fraction of positives scored at or above `threshold`.
pub fn recall_at(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    let pos = labels.iter().filter(|&&l| l == 1).count();
    if pos == 0 || scores.len() != labels.len() {
        return Err(Error::Invalid("recall needs positives and matching lengths".into()));
    }
    let hit = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| l == 1 && s >= threshold)
        .count();
    Ok(hit as f64 / pos as f64)
}
