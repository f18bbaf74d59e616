//! In-memory benchmark harness on the synthetic long-tail tasks.
//!
//! [`prepare`] generates a training and a held-out split, trains a model,
//! collects its logits and the training-set statistics. The resulting
//! [`Prepared`] run can then be calibrated in different ways and scored.

use serde::{Deserialize, Serialize};

use crate::calibrate::{finalize_with, logit_adjustment_baseline, logn_normalize, softmax_scores, BetaMode, Components};
use crate::error::{Error, Result};
use crate::metrics::{classify_and_score, proposal_ranking_ap, statistic_correlation, EvalReport};
use crate::record::{ClassLayout, LogitRecord, Matrix};
use crate::stats::{
    compute_exact, positive_only_stats, LabelDistribution, RunningStats, StatsConfig, DEFAULT_EPS,
    DEFAULT_GROUP_THRESHOLDS, DEFAULT_MOMENTUM,
};
use crate::synth::{generate_classification, generate_detection_proxy, repeat_factor_oversample, Dataset, SynthSpec};
use crate::trainer::{predict_logits, train, ModelParams, TrainConfig, TrainLog};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Classification,
    Detection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StatsMode {
    Ema,
    Exact,
    PositiveOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsPass {
    pub mode: StatsMode,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_stats_batch")]
    pub batch_size: usize,
}

fn default_momentum() -> f64 {
    DEFAULT_MOMENTUM
}

fn default_eps() -> f64 {
    DEFAULT_EPS
}

fn default_stats_batch() -> usize {
    32
}

impl Default for StatsPass {
    fn default() -> Self {
        Self {
            mode: StatsMode::Ema,
            momentum: DEFAULT_MOMENTUM,
            eps: DEFAULT_EPS,
            batch_size: default_stats_batch(),
        }
    }
}

/// Overrides that turn the training spec into the held-out spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestSplit {
    pub max_count: u64,
    pub imbalance_ratio: f64,
    pub bg_multiplier: f64,
    pub split: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub task: Task,
    pub data: SynthSpec,
    pub test: TestSplit,
    pub train: TrainConfig,
    #[serde(default)]
    pub stats: StatsPass,
    #[serde(default)]
    pub oversample_threshold: Option<f64>,
}

impl BenchConfig {
    pub fn test_spec(&self) -> SynthSpec {
        SynthSpec {
            max_count: self.test.max_count,
            imbalance_ratio: self.test.imbalance_ratio,
            bg_multiplier: self.test.bg_multiplier,
            split: self.test.split,
            ..self.data.clone()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.data.seed = seed;
        self.train.seed = seed;
        self
    }
}

/// 50-class classification with a 100:1 geometric imbalance and a balanced
/// held-out split.
pub fn reference_classification(seed: u64) -> BenchConfig {
    BenchConfig {
        task: Task::Classification,
        data: SynthSpec {
            num_classes: 50,
            feature_dim: 32,
            max_count: 500,
            imbalance_ratio: 100.0,
            class_sep: 4.0,
            noise_sigma: 1.0,
            bg_multiplier: 0.0,
            seed,
            bg_index: 0,
            split: 0,
        },
        test: TestSplit {
            max_count: 50,
            imbalance_ratio: 1.0,
            bg_multiplier: 0.0,
            split: 1,
        },
        train: TrainConfig {
            learning_rate: 0.1,
            epochs: 60,
            batch_size: 64,
            seed,
            weight_decay: 4e-3,
            hidden_units: None,
            online: None,
        },
        stats: StatsPass::default(),
        oversample_threshold: None,
    }
}

/// 20 foreground classes plus background. Held-out proposals are far more
/// background-dominated than the training ones.
pub fn reference_detection(seed: u64) -> BenchConfig {
    BenchConfig {
        task: Task::Detection,
        data: SynthSpec {
            num_classes: 20,
            feature_dim: 16,
            max_count: 300,
            imbalance_ratio: 100.0,
            class_sep: 6.0,
            noise_sigma: 1.0,
            bg_multiplier: 1.0,
            seed,
            bg_index: 0,
            split: 0,
        },
        test: TestSplit {
            max_count: 50,
            imbalance_ratio: 1.0,
            bg_multiplier: 50.0,
            split: 1,
        },
        train: TrainConfig {
            learning_rate: 0.1,
            epochs: 15,
            batch_size: 64,
            seed,
            weight_decay: 0.05,
            hidden_units: Some(32),
            online: None,
        },
        stats: StatsPass::default(),
        oversample_threshold: None,
    }
}

pub fn generate(task: Task, spec: &SynthSpec) -> Result<Dataset> {
    match task {
        Task::Classification => generate_classification(spec),
        Task::Detection => generate_detection_proxy(spec),
    }
}

/// Per-slot statistics of a logit stream.
pub fn gather_stats(records: &[LogitRecord], layout: ClassLayout, pass: &StatsPass) -> Result<RunningStats> {
    let config = StatsConfig {
        momentum: pass.momentum,
        eps: pass.eps,
        bg_index: layout.bg_index(),
    };
    match pass.mode {
        StatsMode::Ema => {
            let mut s = RunningStats::new(layout.num_slots(), config)?;
            s.accumulate(records, pass.batch_size)?;
            Ok(s)
        }
        StatsMode::Exact => compute_exact(records, config),
        StatsMode::PositiveOnly => Ok(positive_only_stats(records, config)?.stats),
    }
}

pub fn map_rows(logits: &Matrix, f: impl Fn(&[f64]) -> Result<Vec<f64>>) -> Result<Matrix> {
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for (i, row) in logits.iter_rows().enumerate() {
        out.row_mut(i).copy_from_slice(&f(row)?);
    }
    Ok(out)
}

/// Label distribution over foreground classes.
pub fn foreground_distribution(data: &Dataset) -> Result<LabelDistribution> {
    LabelDistribution::from_slot_labels(&data.labels, data.layout, DEFAULT_GROUP_THRESHOLDS)
}

/// Scores logits of a held-out split.
///
/// Detection logits get proposal-ranking AP over softmax scores, and the
/// accuracy fields are computed on foreground proposals among foreground
/// slots. Correlations are filled in when `stats` is given.
pub fn evaluate(
    logits: &Matrix,
    labels: &[usize],
    layout: ClassLayout,
    dist: &LabelDistribution,
    stats: Option<&RunningStats>,
) -> Result<EvalReport> {
    let mut report = match layout.bg_index() {
        None => classify_and_score(logits, labels, dist)?,
        Some(bg) => {
            let probs = map_rows(logits, |r| Ok(softmax_scores(r)))?;
            let (per_class_ap, mean_ap) = proposal_ranking_ap(&probs, labels, bg)?;
            let fg_slots: Vec<usize> = layout.foreground_slots().collect();
            let mut rows = Vec::new();
            let mut fg_labels = Vec::new();
            for (row, &label) in logits.iter_rows().zip(labels) {
                if let Some(class) = layout.class_of(label) {
                    rows.push(fg_slots.iter().map(|&s| row[s]).collect::<Vec<_>>());
                    fg_labels.push(class);
                }
            }
            let mut report = classify_and_score(&Matrix::from_rows(&rows)?, &fg_labels, dist)?;
            report.per_class_ap = per_class_ap;
            report.mean_ap = Some(mean_ap);
            report
        }
    };
    // correlations are undefined below three classes and stay `None`
    if let Some(stats) = stats.filter(|_| dist.num_classes() >= 3) {
        let (m, v) = statistic_correlation(stats, dist)?;
        report.correlation_mean = m;
        report.correlation_var = v;
    }
    Ok(report)
}

/// A trained benchmark run.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub config: BenchConfig,
    pub train_set: Dataset,
    pub test_set: Dataset,
    pub model: ModelParams,
    pub log: TrainLog,
    pub train_logits: Matrix,
    pub test_logits: Matrix,
    pub stats: RunningStats,
    pub dist: LabelDistribution,
}

pub fn prepare(config: &BenchConfig) -> Result<Prepared> {
    let mut train_set = generate(config.task, &config.data)?;
    let test_set = generate(config.task, &config.test_spec())?;
    // The prior distribution is the raw training set's, before any sampler acts.
    let dist = foreground_distribution(&train_set)?;
    if let Some(t) = config.oversample_threshold {
        train_set = repeat_factor_oversample(&train_set, t)?;
    }
    let (model, log) = train(&train_set, &config.train)?;
    let train_logits = predict_logits(&model, &train_set.features)?;
    let test_logits = predict_logits(&model, &test_set.features)?;
    let records = train_logits.to_records(&train_set.labels)?;
    let stats = gather_stats(&records, train_set.layout, &config.stats)?;
    Ok(Prepared {
        config: config.clone(),
        train_set,
        test_set,
        model,
        log,
        train_logits,
        test_logits,
        stats,
        dist,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub beta: f64,
    pub metric: f64,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("setting,beta,metric\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.label, r.beta, r.metric));
    }
    s
}

impl Prepared {
    /// Mean AP for detection, balanced accuracy for classification.
    pub fn metric(&self, logits: &Matrix) -> Result<f64> {
        let report = self.evaluate(logits)?;
        match self.config.task {
            Task::Detection => report.mean_ap.ok_or(Error::NoPositives),
            Task::Classification => Ok(report.balanced_accuracy),
        }
    }

    pub fn evaluate(&self, logits: &Matrix) -> Result<EvalReport> {
        evaluate(
            logits,
            &self.test_set.labels,
            self.test_set.layout,
            &self.dist,
            Some(&self.stats),
        )
    }

    pub fn calibrate_with(&self, stats: &RunningStats, mode: BetaMode, p: f64, components: Components) -> Result<(f64, Matrix)> {
        let params = finalize_with(stats, mode, p, components)?;
        let out = map_rows(&self.test_logits, |r| logn_normalize(r, &params))?;
        Ok((params.beta, out))
    }

    pub fn calibrated(&self, mode: BetaMode, p: f64, components: Components) -> Result<(f64, Matrix)> {
        self.calibrate_with(&self.stats, mode, p, components)
    }

    /// Prior logit adjustment; classification only.
    pub fn logit_adjusted(&self, tau: f64) -> Result<Matrix> {
        if self.test_set.layout.bg_index().is_some() {
            return Err(Error::InvalidParameter("logit adjustment needs foreground-only logits".into()));
        }
        map_rows(&self.test_logits, |r| logit_adjustment_baseline(r, &self.dist, tau))
    }

    /// Uncalibrated baseline, each single component, and the full transform.
    pub fn ablation(&self, mode: BetaMode) -> Result<Vec<SweepRow>> {
        let mut rows = vec![SweepRow {
            label: "baseline".into(),
            beta: 0.0,
            metric: self.metric(&self.test_logits)?,
        }];
        for (label, c) in [
            ("mean", Components::MEAN_ONLY),
            ("scale", Components::SCALE_ONLY),
            ("beta", Components::BETA_ONLY),
            ("full", Components::ALL),
        ] {
            let (beta, z) = self.calibrated(mode, 1.0, c)?;
            rows.push(SweepRow {
                label: label.into(),
                beta,
                metric: self.metric(&z)?,
            });
        }
        Ok(rows)
    }

    pub fn beta_sweep(&self, modes: &[BetaMode], p: f64) -> Result<Vec<SweepRow>> {
        modes
            .iter()
            .map(|&m| {
                let (beta, z) = self.calibrated(m, p, Components::ALL)?;
                Ok(SweepRow {
                    label: m.to_string(),
                    beta,
                    metric: self.metric(&z)?,
                })
            })
            .collect()
    }

    /// Re-accumulates EMA statistics at each momentum and calibrates with `mode`.
    pub fn momentum_sweep(&self, momenta: &[f64], mode: BetaMode) -> Result<Vec<SweepRow>> {
        let records = self.train_logits.to_records(&self.train_set.labels)?;
        momenta
            .iter()
            .map(|&m| {
                let pass = StatsPass {
                    mode: StatsMode::Ema,
                    momentum: m,
                    ..self.config.stats.clone()
                };
                let stats = gather_stats(&records, self.train_set.layout, &pass)?;
                let (beta, z) = self.calibrate_with(&stats, mode, 1.0, Components::ALL)?;
                Ok(SweepRow {
                    label: format!("momentum={m}"),
                    beta,
                    metric: self.metric(&z)?,
                })
            })
            .collect()
    }
}

pub fn default_beta_modes() -> Vec<BetaMode> {
    vec![
        BetaMode::None,
        BetaMode::FgMin,
        BetaMode::FgAvg,
        BetaMode::FgMax,
        BetaMode::BgMean,
        BetaMode::Constant(-2.0),
        BetaMode::Constant(2.0),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(task: Task) -> BenchConfig {
        let mut c = match task {
            Task::Classification => reference_classification(3),
            Task::Detection => reference_detection(3),
        };
        c.data.num_classes = 5;
        c.data.max_count = 40;
        c.data.imbalance_ratio = 10.0;
        c.test.max_count = 10;
        c.train.epochs = 3;
        c
    }

    #[test]
    fn classification_run_has_all_fields() {
        let run = prepare(&tiny(Task::Classification)).unwrap();
        let report = run.evaluate(&run.test_logits).unwrap();
        assert_eq!(report.per_class_recall.len(), 5);
        assert!(report.mean_ap.is_none());
        assert!(report.correlation_mean.is_some());
        let rows = run.ablation(BetaMode::None).unwrap();
        assert_eq!(rows.len(), 5);
        assert!(run.logit_adjusted(1.0).is_ok());
    }

    #[test]
    fn detection_run_reports_ap() {
        let run = prepare(&tiny(Task::Detection)).unwrap();
        let report = run.evaluate(&run.test_logits).unwrap();
        assert!(report.mean_ap.is_some());
        assert_eq!(report.per_class_ap.len(), 5);
        assert!(run.logit_adjusted(1.0).is_err());
        let sweep = run.beta_sweep(&default_beta_modes(), 1.0).unwrap();
        assert_eq!(sweep[0].beta, 0.0);
        let csv = sweep_csv(&sweep);
        assert!(csv.starts_with("setting,beta,metric\nnone,0,"));
    }

    #[test]
    fn config_round_trips_through_json() {
        let c = reference_detection(9);
        let text = serde_json::to_string(&c).unwrap();
        let back: BenchConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, c);
    }
}
