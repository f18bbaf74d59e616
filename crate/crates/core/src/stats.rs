//! Per-class logit statistics gathered over a pass through the training set.
//!
//! Two estimators are provided. [`RunningStats::update_ema`] is the batch-wise
//! exponential moving average used in practice; [`compute_exact`] is the exact
//! streaming mean/variance over the whole pass and serves as its oracle. Both
//! take every slot of every record into account, not only the slot of the
//! record's own label. [`positive_only_stats`] is the restricted variant kept
//! for comparison.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::record::{ClassLayout, LogitRecord, Matrix};

pub const DEFAULT_MOMENTUM: f64 = 0.01;
pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatsConfig {
    pub momentum: f64,
    pub eps: f64,
    pub bg_index: Option<usize>,
}

impl Default for StatsConfig {
    fn default() -> Self {
        Self {
            momentum: DEFAULT_MOMENTUM,
            eps: DEFAULT_EPS,
            bg_index: Some(0),
        }
    }
}

impl StatsConfig {
    pub fn classification() -> Self {
        Self {
            bg_index: None,
            ..Self::default()
        }
    }

    fn validate(&self, num_slots: usize) -> Result<()> {
        if !(self.momentum > 0.0 && self.momentum <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "momentum {} outside (0, 1]",
                self.momentum
            )));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::InvalidParameter(format!("eps {} must be positive", self.eps)));
        }
        ClassLayout::new(num_slots, self.bg_index)?;
        Ok(())
    }
}

/// Per-slot running mean and (population) variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: u64,
    pub momentum: f64,
    pub eps: f64,
    pub bg_index: Option<usize>,
    pub initialized: bool,
}

impl RunningStats {
    pub fn new(num_slots: usize, config: StatsConfig) -> Result<Self> {
        config.validate(num_slots)?;
        Ok(Self {
            mean: vec![0.0; num_slots],
            var: vec![1.0; num_slots],
            count: 0,
            momentum: config.momentum,
            eps: config.eps,
            bg_index: config.bg_index,
            initialized: false,
        })
    }

    pub fn num_slots(&self) -> usize {
        self.mean.len()
    }

    pub fn layout(&self) -> ClassLayout {
        ClassLayout::new(self.mean.len(), self.bg_index)
            .expect("stats constructed with a valid layout")
    }

    pub fn config(&self) -> StatsConfig {
        StatsConfig {
            momentum: self.momentum,
            eps: self.eps,
            bg_index: self.bg_index,
        }
    }

    /// Folds one batch into the running estimate.
    ///
    /// The first batch initializes the estimate; later batches are blended in
    /// as `(1 - momentum) * running + momentum * batch`.
    pub fn update_ema(&mut self, batch: &[LogitRecord]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let n = self.num_slots();
        for (i, r) in batch.iter().enumerate() {
            r.validate(n, i)?;
        }
        let (mean, var) = column_moments(batch.iter().map(|r| r.logits.as_slice()), n);
        self.blend(&mean, &var, batch.len());
        Ok(())
    }

    /// Same as [`update_ema`](Self::update_ema) for a batch of raw logit rows.
    pub fn update_ema_rows(&mut self, logits: &Matrix) -> Result<()> {
        if logits.rows() == 0 {
            return Err(Error::Empty("batch"));
        }
        if logits.cols() != self.num_slots() {
            return Err(Error::DimensionMismatch {
                expected: self.num_slots(),
                found: logits.cols(),
                record: None,
            });
        }
        if let Some(i) = logits.iter_rows().position(|r| r.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite { record: i });
        }
        let (mean, var) = column_moments(logits.iter_rows(), self.num_slots());
        self.blend(&mean, &var, logits.rows());
        Ok(())
    }

    fn blend(&mut self, mean: &[f64], var: &[f64], batch_len: usize) {
        if self.initialized {
            let m = self.momentum;
            for (r, b) in self.mean.iter_mut().zip(mean) {
                *r = (1.0 - m) * *r + m * b;
            }
            for (r, b) in self.var.iter_mut().zip(var) {
                *r = (1.0 - m) * *r + m * b;
            }
        } else {
            self.mean.copy_from_slice(mean);
            self.var.copy_from_slice(var);
            self.initialized = true;
        }
        self.count += batch_len as u64;
    }

    /// Runs the EMA over `records` in consecutive batches of `batch_size`.
    pub fn accumulate(&mut self, records: &[LogitRecord], batch_size: usize) -> Result<()> {
        if batch_size == 0 {
            return Err(Error::InvalidParameter("batch size must be positive".into()));
        }
        if records.is_empty() {
            return Err(Error::Empty("record stream"));
        }
        for (b, chunk) in records.chunks(batch_size).enumerate() {
            self.update_ema(chunk).map_err(|e| offset_record(e, b * batch_size))?;
        }
        Ok(())
    }
}

fn offset_record(e: Error, offset: usize) -> Error {
    match e {
        Error::NonFinite { record } => Error::NonFinite {
            record: record + offset,
        },
        Error::DimensionMismatch {
            expected,
            found,
            record: Some(r),
        } => Error::DimensionMismatch {
            expected,
            found,
            record: Some(r + offset),
        },
        Error::LabelOutOfRange {
            record,
            label,
            num_classes,
        } => Error::LabelOutOfRange {
            record: record + offset,
            label,
            num_classes,
        },
        other => other,
    }
}

/// Two-pass population mean and variance of each column.
fn column_moments<'a>(rows: impl Iterator<Item = &'a [f64]> + Clone, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; n];
    let mut len = 0usize;
    for r in rows.clone() {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
        len += 1;
    }
    let inv = 1.0 / len as f64;
    mean.iter_mut().for_each(|m| *m *= inv);
    let mut var = vec![0.0; n];
    for r in rows {
        for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
            let d = v - m;
            *s += d * d;
        }
    }
    var.iter_mut().for_each(|s| *s *= inv);
    (mean, var)
}

/// Streaming exact mean/variance accumulator (Welford), mergeable across shards.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactAccumulator {
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl ExactAccumulator {
    pub fn new(num_slots: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; num_slots],
            m2: vec![0.0; num_slots],
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn push(&mut self, logits: &[f64]) {
        debug_assert_eq!(logits.len(), self.mean.len());
        self.count += 1;
        let n = self.count as f64;
        for ((m, s), &x) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(logits) {
            let d = x - *m;
            *m += d / n;
            *s += d * (x - *m);
        }
    }

    pub fn push_record(&mut self, record: &LogitRecord, index: usize) -> Result<()> {
        record.validate(self.mean.len(), index)?;
        self.push(&record.logits);
        Ok(())
    }

    /// Combines two disjoint shards.
    pub fn merge(&mut self, other: &ExactAccumulator) -> Result<()> {
        if other.mean.len() != self.mean.len() {
            return Err(Error::DimensionMismatch {
                expected: self.mean.len(),
                found: other.mean.len(),
                record: None,
            });
        }
        if other.count == 0 {
            return Ok(());
        }
        if self.count == 0 {
            *self = other.clone();
            return Ok(());
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        for i in 0..self.mean.len() {
            let d = other.mean[i] - self.mean[i];
            self.mean[i] += d * nb / n;
            self.m2[i] += other.m2[i] + d * d * na * nb / n;
        }
        self.count += other.count;
        Ok(())
    }

    pub fn finish(&self, config: StatsConfig) -> Result<RunningStats> {
        if self.count == 0 {
            return Err(Error::Empty("record stream"));
        }
        let mut stats = RunningStats::new(self.mean.len(), config)?;
        let n = self.count as f64;
        stats.mean.clone_from(&self.mean);
        stats.var = self.m2.iter().map(|s| (s / n).max(0.0)).collect();
        stats.count = self.count;
        stats.initialized = true;
        Ok(stats)
    }
}

/// Exact per-slot mean and population variance over an entire stream.
pub fn compute_exact<'a, I>(records: I, config: StatsConfig) -> Result<RunningStats>
where
    I: IntoIterator<Item = &'a LogitRecord>,
{
    let mut iter = records.into_iter().enumerate().peekable();
    let n = match iter.peek() {
        Some((_, r)) => r.logits.len(),
        None => return Err(Error::Empty("record stream")),
    };
    let mut acc = ExactAccumulator::new(n);
    for (i, r) in iter {
        acc.push_record(r, i)?;
    }
    acc.finish(config)
}

/// Statistics from positive samples only, with a flag for classes that had none.
#[derive(Debug, Clone, PartialEq)]
pub struct PositiveOnlyStats {
    pub stats: RunningStats,
    pub empty: Vec<bool>,
}

/// For slot `c`, uses only entry `c` of records labelled `c`.
pub fn positive_only_stats<'a, I>(records: I, config: StatsConfig) -> Result<PositiveOnlyStats>
where
    I: IntoIterator<Item = &'a LogitRecord>,
{
    let mut iter = records.into_iter().enumerate().peekable();
    let n = match iter.peek() {
        Some((_, r)) => r.logits.len(),
        None => return Err(Error::Empty("record stream")),
    };
    let mut counts = vec![0u64; n];
    let mut mean = vec![0.0; n];
    let mut m2 = vec![0.0; n];
    let mut total = 0u64;
    for (i, r) in iter {
        r.validate(n, i)?;
        let c = r.label;
        counts[c] += 1;
        let x = r.logits[c];
        let d = x - mean[c];
        mean[c] += d / counts[c] as f64;
        m2[c] += d * (x - mean[c]);
        total += 1;
    }
    let mut stats = RunningStats::new(n, config)?;
    stats.mean = mean;
    stats.var = m2
        .iter()
        .zip(&counts)
        .map(|(s, &k)| if k > 0 { s / k as f64 } else { 0.0 })
        .collect();
    stats.count = total;
    stats.initialized = true;
    Ok(PositiveOnlyStats {
        stats,
        empty: counts.iter().map(|&k| k == 0).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Rare,
    Common,
    Frequent,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Rare, Group::Common, Group::Frequent];

    pub fn of(count: u64, (low, high): (u64, u64)) -> Group {
        if count <= low {
            Group::Rare
        } else if count <= high {
            Group::Common
        } else {
            Group::Frequent
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Group::Rare => "rare",
            Group::Common => "common",
            Group::Frequent => "frequent",
        }
    }
}

pub const DEFAULT_GROUP_THRESHOLDS: (u64, u64) = (10, 100);

/// Per-class training counts over foreground classes and their frequency groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelDistribution {
    pub counts: Vec<u64>,
    pub groups: Vec<Group>,
    pub thresholds: (u64, u64),
}

impl LabelDistribution {
    pub fn from_counts(counts: Vec<u64>, thresholds: (u64, u64)) -> Result<Self> {
        if thresholds.0 > thresholds.1 {
            return Err(Error::InvalidParameter(format!(
                "group thresholds {thresholds:?} are not ordered"
            )));
        }
        let groups = counts.iter().map(|&c| Group::of(c, thresholds)).collect();
        Ok(Self {
            counts,
            groups,
            thresholds,
        })
    }

    /// Counts the foreground labels of a dataset whose labels are slots of `layout`.
    pub fn from_slot_labels(labels: &[usize], layout: ClassLayout, thresholds: (u64, u64)) -> Result<Self> {
        let mut counts = vec![0u64; layout.num_foreground()];
        for (i, &slot) in labels.iter().enumerate() {
            if slot >= layout.num_slots() {
                return Err(Error::LabelOutOfRange {
                    record: i,
                    label: slot,
                    num_classes: layout.num_slots(),
                });
            }
            if let Some(c) = layout.class_of(slot) {
                counts[c] += 1;
            }
        }
        Self::from_counts(counts, thresholds)
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn classes_in(&self, group: Group) -> impl Iterator<Item = usize> + '_ {
        self.groups
            .iter()
            .enumerate()
            .filter(move |(_, g)| **g == group)
            .map(|(c, _)| c)
    }
}

/// Tallies foreground labels `0..num_classes` and assigns frequency groups.
pub fn build_label_distribution<I>(labels: I, num_classes: usize, thresholds: (u64, u64)) -> Result<LabelDistribution>
where
    I: IntoIterator<Item = usize>,
{
    let mut counts = vec![0u64; num_classes];
    for (i, label) in labels.into_iter().enumerate() {
        match counts.get_mut(label) {
            Some(c) => *c += 1,
            None => {
                return Err(Error::LabelOutOfRange {
                    record: i,
                    label,
                    num_classes,
                })
            }
        }
    }
    LabelDistribution::from_counts(counts, thresholds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn recs(rows: &[(usize, &[f64])]) -> Vec<LogitRecord> {
        rows.iter().map(|(l, v)| LogitRecord::new(*l, v.to_vec())).collect()
    }

    fn cfg() -> StatsConfig {
        StatsConfig::classification()
    }

    #[test]
    fn first_batch_initializes_exactly() {
        let batch = recs(&[(0, &[1.0, 4.0]), (1, &[3.0, 0.0]), (0, &[2.0, 2.0])]);
        let mut s = RunningStats::new(2, cfg()).unwrap();
        s.update_ema(&batch).unwrap();
        assert_eq!(s.mean, vec![2.0, 2.0]);
        assert!((s.var[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.var[1] - 8.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.count, 3);
        assert!(s.initialized);
    }

    #[test]
    fn identical_batches_are_a_fixed_point() {
        let batch = recs(&[(0, &[1.0, -4.0]), (1, &[3.5, 0.25])]);
        for m in [0.01, 0.3, 0.9] {
            let mut s = RunningStats::new(2, StatsConfig { momentum: m, ..cfg() }).unwrap();
            s.update_ema(&batch).unwrap();
            let first = s.clone();
            s.update_ema(&batch).unwrap();
            for i in 0..2 {
                assert!((s.mean[i] - first.mean[i]).abs() <= 1e-15 * first.mean[i].abs().max(1.0));
                assert!((s.var[i] - first.var[i]).abs() <= 1e-15 * first.var[i].abs().max(1.0));
            }
            assert_eq!(s.count, 4);
        }
    }

    #[test]
    fn momentum_one_tracks_latest_batch() {
        let a = recs(&[(0, &[1.0, -4.0]), (1, &[3.5, 0.25])]);
        let b = recs(&[(0, &[7.0, 2.0]), (1, &[-1.0, 0.5]), (1, &[0.0, 0.0])]);
        let mut s = RunningStats::new(2, StatsConfig { momentum: 1.0, ..cfg() }).unwrap();
        s.update_ema(&a).unwrap();
        s.update_ema(&b).unwrap();
        let mut fresh = RunningStats::new(2, StatsConfig { momentum: 1.0, ..cfg() }).unwrap();
        fresh.update_ema(&b).unwrap();
        assert_eq!(s.mean, fresh.mean);
        assert_eq!(s.var, fresh.var);
    }

    #[test]
    fn update_rejects_bad_batches() {
        let mut s = RunningStats::new(2, cfg()).unwrap();
        assert!(matches!(s.update_ema(&[]), Err(Error::Empty(_))));
        let bad = recs(&[(0, &[1.0, 2.0]), (0, &[1.0])]);
        assert!(matches!(
            s.update_ema(&bad),
            Err(Error::DimensionMismatch { record: Some(1), .. })
        ));
        let nan = recs(&[(0, &[1.0, 2.0]), (0, &[1.0, 2.0]), (1, &[f64::INFINITY, 0.0])]);
        assert!(matches!(s.update_ema(&nan), Err(Error::NonFinite { record: 2 })));
        assert!(!s.initialized);
    }

    #[test]
    fn accumulate_reports_global_record_index() {
        let mut rows = vec![LogitRecord::new(0, vec![0.0, 1.0]); 10];
        rows[7].logits[1] = f64::NAN;
        let mut s = RunningStats::new(2, cfg()).unwrap();
        assert!(matches!(s.accumulate(&rows, 3), Err(Error::NonFinite { record: 7 })));
    }

    #[test]
    fn exact_symmetric_pair() {
        let r = recs(&[(0, &[1.0, 3.0]), (1, &[3.0, 1.0])]);
        let s = compute_exact(&r, cfg()).unwrap();
        assert_eq!(s.mean, vec![2.0, 2.0]);
        assert_eq!(s.var, vec![1.0, 1.0]);
        assert_eq!(s.count, 2);
    }

    #[test]
    fn exact_constant_stream_has_zero_variance() {
        let r = vec![LogitRecord::new(0, vec![0.1, -7.3, 12.5]); 1000];
        let s = compute_exact(&r, cfg()).unwrap();
        assert_eq!(s.var, vec![0.0; 3]);
        assert!(matches!(compute_exact(&[], cfg()), Err(Error::Empty(_))));
    }

    #[test]
    fn exact_matches_two_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let r: Vec<_> = (0..1000)
            .map(|_| {
                let v = (0..4).map(|k| 100.0 * k as f64 + rng.random_range(-3.0..5.0)).collect();
                LogitRecord::new(0, v)
            })
            .collect();
        let s = compute_exact(&r, cfg()).unwrap();
        for c in 0..4 {
            let mean = r.iter().map(|x| x.logits[c]).sum::<f64>() / 1000.0;
            let var = r.iter().map(|x| (x.logits[c] - mean).powi(2)).sum::<f64>() / 1000.0;
            assert!(((s.mean[c] - mean) / mean.abs().max(1e-300)).abs() < 1e-10);
            assert!(((s.var[c] - var) / var).abs() < 1e-10);
        }
    }

    #[test]
    fn merged_shards_match_single_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r: Vec<_> = (0..257)
            .map(|_| LogitRecord::new(0, vec![rng.random_range(-5.0..5.0), rng.random_range(0.0..1.0)]))
            .collect();
        let whole = compute_exact(&r, cfg()).unwrap();
        let mut acc = ExactAccumulator::new(2);
        for shard in r.chunks(40) {
            let mut part = ExactAccumulator::new(2);
            shard.iter().for_each(|x| part.push(&x.logits));
            acc.merge(&part).unwrap();
        }
        let merged = acc.finish(cfg()).unwrap();
        for c in 0..2 {
            assert!((merged.mean[c] - whole.mean[c]).abs() < 1e-12);
            assert!((merged.var[c] - whole.var[c]).abs() < 1e-12);
        }
        assert_eq!(merged.count, 257);
    }

    #[test]
    fn positive_only_selects_own_slot() {
        let r = recs(&[(0, &[5.0, -1.0]), (1, &[-2.0, 4.0])]);
        let p = positive_only_stats(&r, cfg()).unwrap();
        assert_eq!(p.stats.mean, vec![5.0, 4.0]);
        assert_eq!(p.empty, vec![false, false]);
        let e = compute_exact(&r, cfg()).unwrap();
        assert_eq!(e.mean, vec![1.5, 1.5]);

        let only_first = recs(&[(0, &[5.0, -1.0, 2.0])]);
        let p = positive_only_stats(&only_first, cfg()).unwrap();
        assert_eq!(p.empty, vec![false, true, true]);
    }

    #[test]
    fn grouping_boundaries() {
        let d = LabelDistribution::from_counts(vec![100, 10, 1, 11, 101], (10, 100)).unwrap();
        assert_eq!(
            d.groups,
            vec![Group::Common, Group::Rare, Group::Rare, Group::Common, Group::Frequent]
        );
        let d = LabelDistribution::from_counts(vec![500, 101], (10, 100)).unwrap();
        assert!(d.groups.iter().all(|g| *g == Group::Frequent));
    }

    #[test]
    fn label_distribution_tally_and_errors() {
        let d = build_label_distribution([0, 1, 1, 2, 2, 2], 3, (1, 2)).unwrap();
        assert_eq!(d.counts, vec![1, 2, 3]);
        assert_eq!(d.total(), 6);
        assert_eq!(d.groups, vec![Group::Rare, Group::Common, Group::Frequent]);
        let err = build_label_distribution([0, 5], 3, (1, 2)).unwrap_err();
        assert!(matches!(err, Error::LabelOutOfRange { record: 1, label: 5, .. }));
    }

    #[test]
    fn slot_labels_skip_background() {
        let layout = ClassLayout::detection(2, 0).unwrap();
        let d = LabelDistribution::from_slot_labels(&[0, 0, 1, 2, 2], layout, (10, 100)).unwrap();
        assert_eq!(d.counts, vec![1, 2]);
    }
}
