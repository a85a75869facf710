//! Multi-label video classification metrics: GAP, MAP, PERR and Hit@1.
//!
//! Ties are broken deterministically: within a video, equal scores rank the
//! lower class index first; across videos (per-class ranking and the pooled
//! GAP list), equal scores rank the lower video index first, then the lower
//! class index.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const GAP_TOP_K: usize = 20;

/// Scores in `[0, 1]` for every class of one video, plus its true labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub scores: Vec<f64>,
    pub labels: BTreeSet<usize>,
}

impl Prediction {
    pub fn new(scores: Vec<f64>, labels: impl IntoIterator<Item = usize>) -> Self {
        Prediction {
            scores,
            labels: labels.into_iter().collect(),
        }
    }

    /// Class indices by descending score, ties by ascending class index.
    pub fn ranked_classes(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_by(|&a, &b| desc(self.scores[a], self.scores[b]).then(a.cmp(&b)));
        idx
    }
}

fn desc(a: f64, b: f64) -> Ordering {
    b.partial_cmp(&a).unwrap_or(Ordering::Equal)
}

/// Checks shapes and ranges; returns the class count.
pub fn validate(preds: &[Prediction]) -> Result<usize> {
    let first = preds
        .first()
        .ok_or_else(|| Error::Metric("no predictions".into()))?;
    let c = first.scores.len();
    if c == 0 {
        return Err(Error::Metric("zero classes".into()));
    }
    for (v, p) in preds.iter().enumerate() {
        if p.scores.len() != c {
            return Err(Error::Metric(format!(
                "video {v} has {} scores, expected {c}",
                p.scores.len()
            )));
        }
        if let Some(s) = p.scores.iter().find(|s| !(s.is_finite() && (0.0..=1.0).contains(*s))) {
            return Err(Error::Metric(format!("video {v} has score {s} outside [0, 1]")));
        }
        if let Some(&l) = p.labels.iter().find(|&&l| l >= c) {
            return Err(Error::Metric(format!("video {v} has label {l} >= {c} classes")));
        }
    }
    Ok(c)
}

fn require_labels(preds: &[Prediction]) -> Result<()> {
    match preds.iter().position(|p| p.labels.is_empty()) {
        Some(v) => Err(Error::Metric(format!("video {v} has no true labels"))),
        None => Ok(()),
    }
}

/// Fraction of videos whose top-scoring class is a true label.
pub fn hit_at_1(preds: &[Prediction]) -> Result<f64> {
    validate(preds)?;
    require_labels(preds)?;
    let hits = preds
        .iter()
        .filter(|p| p.labels.contains(&p.ranked_classes()[0]))
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Mean over videos of the precision among the top-`|G|` classes, where `G`
/// is the video's label set.
pub fn perr(preds: &[Prediction]) -> Result<f64> {
    validate(preds)?;
    require_labels(preds)?;
    let total: f64 = preds
        .iter()
        .map(|p| {
            let k = p.labels.len();
            let hits = p.ranked_classes()[..k.min(p.scores.len())]
                .iter()
                .filter(|c| p.labels.contains(c))
                .count();
            hits as f64 / k as f64
        })
        .sum();
    Ok(total / preds.len() as f64)
}

/// Average precision of a ranked relevance list: sum of precision@k at each
/// relevant position, divided by `num_positives`.
pub fn average_precision(relevant_in_rank_order: impl IntoIterator<Item = bool>, num_positives: usize) -> f64 {
    if num_positives == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, rel) in relevant_in_rank_order.into_iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    sum / num_positives as f64
}

/// AP of each class over the video ranking; `None` for classes with no
/// positive video.
pub fn per_class_ap(preds: &[Prediction]) -> Result<Vec<Option<f64>>> {
    let c = validate(preds)?;
    let mut out = Vec::with_capacity(c);
    let mut order: Vec<usize> = (0..preds.len()).collect();
    for class in 0..c {
        let positives = preds.iter().filter(|p| p.labels.contains(&class)).count();
        if positives == 0 {
            out.push(None);
            continue;
        }
        order.sort_by(|&a, &b| desc(preds[a].scores[class], preds[b].scores[class]).then(a.cmp(&b)));
        let ap = average_precision(order.iter().map(|&v| preds[v].labels.contains(&class)), positives);
        out.push(Some(ap));
    }
    Ok(out)
}

/// Mean of per-class AP over classes with at least one positive.
pub fn mean_average_precision(preds: &[Prediction]) -> Result<f64> {
    let aps: Vec<f64> = per_class_ap(preds)?.into_iter().flatten().collect();
    if aps.is_empty() {
        return Err(Error::Metric("no class has a positive video".into()));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Global average precision: each video's top-`top_k` classes are pooled
/// into one list sorted by score, and its AP is taken with the positive count
/// set to `Σ_v min(|G_v|, top_k)`.
pub fn gap(preds: &[Prediction], top_k: usize) -> Result<f64> {
    validate(preds)?;
    if top_k == 0 {
        return Err(Error::Metric("top_k must be >= 1".into()));
    }
    let mut pooled: Vec<(f64, usize, usize, bool)> = Vec::new();
    let mut positives = 0usize;
    for (v, p) in preds.iter().enumerate() {
        positives += p.labels.len().min(top_k);
        for &c in p.ranked_classes().iter().take(top_k) {
            pooled.push((p.scores[c], v, c, p.labels.contains(&c)));
        }
    }
    if positives == 0 {
        return Err(Error::Metric("no true labels in any video".into()));
    }
    pooled.sort_by(|a, b| desc(a.0, b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    Ok(average_precision(pooled.iter().map(|e| e.3), positives))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub gap: f64,
    pub map: f64,
    pub perr: f64,
    pub hit1: f64,
    pub per_class_ap: Vec<Option<f64>>,
}

pub fn evaluate(preds: &[Prediction]) -> Result<EvalReport> {
    Ok(EvalReport {
        gap: gap(preds, GAP_TOP_K)?,
        map: mean_average_precision(preds)?,
        perr: perr(preds)?,
        hit1: hit_at_1(preds)?,
        per_class_ap: per_class_ap(preds)?,
    })
}
