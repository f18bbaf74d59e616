//! Accuracy, proposal-ranking AP, and rank correlation diagnostics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::record::{ClassLayout, Matrix};
use crate::stats::{Group, LabelDistribution, RunningStats};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall_top1: f64,
    /// Macro recall within each frequency group that has evaluated classes.
    pub per_group: BTreeMap<Group, f64>,
    pub balanced_accuracy: f64,
    /// Recall per class; `None` when the class has no evaluation samples.
    pub per_class_recall: Vec<Option<f64>>,
    /// Proposal-ranking AP per foreground class; empty for classification.
    pub per_class_ap: Vec<Option<f64>>,
    pub mean_ap: Option<f64>,
    /// `None` when undefined (constant ranks) or not computed.
    pub correlation_mean: Option<f64>,
    pub correlation_var: Option<f64>,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Top-1 accuracy figures for classification logits (one column per class).
pub fn classify_and_score(logits: &Matrix, labels: &[usize], dist: &LabelDistribution) -> Result<EvalReport> {
    if logits.rows() == 0 {
        return Err(Error::Empty("logits"));
    }
    if logits.rows() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: logits.rows(),
            found: labels.len(),
            record: None,
        });
    }
    let k = logits.cols();
    if dist.num_classes() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            found: dist.num_classes(),
            record: None,
        });
    }
    let mut hits = vec![0u64; k];
    let mut seen = vec![0u64; k];
    let mut correct = 0u64;
    for (i, (row, &label)) in logits.iter_rows().zip(labels).enumerate() {
        if label >= k {
            return Err(Error::LabelOutOfRange {
                record: i,
                label,
                num_classes: k,
            });
        }
        seen[label] += 1;
        if argmax(row) == label {
            hits[label] += 1;
            correct += 1;
        }
    }
    let recall: Vec<Option<f64>> = hits
        .iter()
        .zip(&seen)
        .map(|(&h, &n)| (n > 0).then(|| h as f64 / n as f64))
        .collect();
    let present: Vec<f64> = recall.iter().flatten().copied().collect();
    let balanced_accuracy = present.iter().sum::<f64>() / present.len() as f64;
    let mut per_group = BTreeMap::new();
    for g in Group::ALL {
        let r: Vec<f64> = dist.classes_in(g).filter_map(|c| recall[c]).collect();
        if !r.is_empty() {
            per_group.insert(g, r.iter().sum::<f64>() / r.len() as f64);
        }
    }
    Ok(EvalReport {
        overall_top1: correct as f64 / labels.len() as f64,
        per_group,
        balanced_accuracy,
        per_class_recall: recall,
        ..EvalReport::default()
    })
}

/// All-point interpolated AP for one ranking.
///
/// Items are sorted by score descending; equal scores keep input order.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let total_pos = positive.iter().filter(|p| **p).count();
    if total_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut precisions = Vec::with_capacity(total_pos);
    let mut tp = 0usize;
    for (rank, &i) in order.iter().enumerate() {
        if positive[i] {
            tp += 1;
            precisions.push(tp as f64 / (rank + 1) as f64);
        }
    }
    // precision envelope: max precision at any recall >= the current one
    let mut ap = 0.0;
    let mut best = 0.0f64;
    for p in precisions.iter().rev() {
        best = best.max(*p);
        ap += best;
    }
    Some(ap / total_pos as f64)
}

/// AP of ranking all proposals by each foreground class's score column.
///
/// Returns per-class AP (indexed by foreground class; `None` when the class has
/// no positives) and the mean over classes with at least one positive.
pub fn proposal_ranking_ap(scores: &Matrix, labels: &[usize], bg_index: usize) -> Result<(Vec<Option<f64>>, f64)> {
    if scores.rows() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: scores.rows(),
            found: labels.len(),
            record: None,
        });
    }
    let layout = ClassLayout::new(scores.cols(), Some(bg_index))?;
    for (row, r) in scores.iter_rows().enumerate() {
        let sum: f64 = r.iter().sum();
        if !((sum - 1.0).abs() <= 1e-6) {
            return Err(Error::NotProbabilities { row, sum });
        }
    }
    for (i, &l) in labels.iter().enumerate() {
        if l >= layout.num_slots() {
            return Err(Error::LabelOutOfRange {
                record: i,
                label: l,
                num_classes: layout.num_slots(),
            });
        }
    }
    let mut column = vec![0.0; scores.rows()];
    let mut positive = vec![false; scores.rows()];
    let mut per_class = Vec::with_capacity(layout.num_foreground());
    for slot in layout.foreground_slots() {
        for (i, r) in scores.iter_rows().enumerate() {
            column[i] = r[slot];
            positive[i] = labels[i] == slot;
        }
        per_class.push(average_precision(&column, &positive));
    }
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::NoPositives);
    }
    let mean = defined.iter().sum::<f64>() / defined.len() as f64;
    Ok((per_class, mean))
}

/// Fractional ranks (ties share the average rank), 1-based.
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            out[idx] = avg;
        }
        i = j + 1;
    }
    out
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank correlation; `None` when either side has constant ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    pearson(&ranks(a), &ranks(b))
}

/// Spearman correlation of per-class logit mean and variance with class counts.
///
/// Rank correlation is invariant to the monotone log applied to counts, so the
/// raw counts are ranked directly.
pub fn statistic_correlation(stats: &RunningStats, dist: &LabelDistribution) -> Result<(Option<f64>, Option<f64>)> {
    if !stats.initialized {
        return Err(Error::Uninitialized);
    }
    let layout = stats.layout();
    if layout.num_foreground() != dist.num_classes() {
        return Err(Error::DimensionMismatch {
            expected: layout.num_foreground(),
            found: dist.num_classes(),
            record: None,
        });
    }
    if dist.num_classes() < 3 {
        return Err(Error::TooFewClasses(dist.num_classes()));
    }
    let counts: Vec<f64> = dist.counts.iter().map(|&c| c as f64).collect();
    let mean: Vec<f64> = layout.foreground_slots().map(|s| stats.mean[s]).collect();
    let var: Vec<f64> = layout.foreground_slots().map(|s| stats.var[s]).collect();
    Ok((spearman(&mean, &counts), spearman(&var, &counts)))
}
