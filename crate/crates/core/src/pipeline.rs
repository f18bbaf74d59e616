//! File-based end-to-end run: generate, train, dump, gather statistics,
//! finalize, calibrate and evaluate, writing every artifact to one directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::{evaluate, foreground_distribution, gather_stats, generate, map_rows, BenchConfig, Task};
use crate::calibrate::{finalize, logit_adjustment_baseline, logn_normalize, BetaMode, CalibrationParams};
use crate::error::{Error, Result};
use crate::format::{read_dump, read_json, write_dataset, write_dump, write_json, write_text, Dump, DumpFormat, StatsFile};
use crate::metrics::EvalReport;
use crate::stats::LabelDistribution;
use crate::synth::repeat_factor_oversample;
use crate::trainer::{predict_logits, train, ModelParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    #[serde(flatten)]
    pub bench: BenchConfig,
    /// Relative paths are resolved against the config file's directory.
    pub output_dir: PathBuf,
    #[serde(default = "default_format")]
    pub dump_format: DumpFormat,
    /// Defaults to fg-min for detection and none for classification.
    #[serde(default)]
    pub beta_mode: Option<BetaMode>,
    #[serde(default = "default_one")]
    pub sigma_exponent: f64,
    /// Temperature of the logit-adjustment reference (classification only).
    #[serde(default = "default_one")]
    pub tau: f64,
}

fn default_format() -> DumpFormat {
    DumpFormat::Binary
}

fn default_one() -> f64 {
    1.0
}

impl PipelineConfig {
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.beta_mode.get_or_insert(match c.bench.task {
            Task::Detection => BetaMode::FgMin,
            Task::Classification => BetaMode::None,
        });
        c
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut c: Self = read_json(path)?;
        if c.output_dir.is_relative() {
            if let Some(dir) = path.parent() {
                c.output_dir = dir.join(&c.output_dir);
            }
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub baseline: EvalReport,
    pub calibrated: EvalReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logit_adjustment: Option<EvalReport>,
    pub beta: f64,
}

/// Artifact locations inside the output directory.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub dir: PathBuf,
    ext: &'static str,
}

impl Artifacts {
    pub fn new(dir: &Path, format: DumpFormat) -> Self {
        Self {
            dir: dir.to_path_buf(),
            ext: match format {
                DumpFormat::Binary => "bin",
                DumpFormat::Ndjson => "ndjson",
            },
        }
    }

    fn file(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn config(&self) -> PathBuf {
        self.file("config.resolved.json")
    }
    pub fn train_data(&self) -> PathBuf {
        self.file("train.ndjson")
    }
    pub fn test_data(&self) -> PathBuf {
        self.file("test.ndjson")
    }
    pub fn model(&self) -> PathBuf {
        self.file("model.json")
    }
    pub fn train_log(&self) -> PathBuf {
        self.file("train_log.csv")
    }
    pub fn train_logits(&self) -> PathBuf {
        self.file(&format!("train_logits.{}", self.ext))
    }
    pub fn test_logits(&self) -> PathBuf {
        self.file(&format!("test_logits.{}", self.ext))
    }
    pub fn stats(&self) -> PathBuf {
        self.file("stats.json")
    }
    pub fn calibration(&self) -> PathBuf {
        self.file("calibration.json")
    }
    pub fn calibrated_logits(&self) -> PathBuf {
        self.file(&format!("test_logits.calibrated.{}", self.ext))
    }
    pub fn report(&self) -> PathBuf {
        self.file("report.json")
    }
    pub fn report_table(&self) -> PathBuf {
        self.file("report.txt")
    }
    pub fn report_csv(&self) -> PathBuf {
        self.file("report.csv")
    }
}

/// Applies finalized parameters to every record of a dump.
pub fn apply_to_dump(dump: &Dump, params: &CalibrationParams) -> Result<Dump> {
    if params.num_slots() != dump.layout.num_slots() {
        return Err(Error::DimensionMismatch {
            expected: dump.layout.num_slots(),
            found: params.num_slots(),
            record: None,
        });
    }
    let records = dump
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let logits = logn_normalize(&r.logits, params).map_err(|e| match e {
                Error::NonFinite { .. } => Error::NonFinite { record: i },
                e => e,
            })?;
            Ok(crate::record::LogitRecord::new(r.label, logits))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dump {
        layout: dump.layout,
        records,
    })
}

fn eval_dump(dump: &Dump, dist: &LabelDistribution, stats: &crate::stats::RunningStats) -> Result<EvalReport> {
    evaluate(&dump.logits(), &dump.labels(), dump.layout, dist, Some(stats))
}

pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineReport> {
    let config = config.resolved();
    let beta_mode = config.beta_mode.expect("resolved");
    let bench = &config.bench;
    let out = Artifacts::new(&config.output_dir, config.dump_format);
    std::fs::create_dir_all(&out.dir).map_err(|e| Error::io(&out.dir, e).in_stage("setup"))?;
    write_json(&out.config(), &config).map_err(|e| e.in_stage("setup"))?;

    let (mut train_set, test_set, dist) = (|| {
        let train_set = generate(bench.task, &bench.data)?;
        let test_set = generate(bench.task, &bench.test_spec())?;
        write_dataset(&out.train_data(), &train_set)?;
        write_dataset(&out.test_data(), &test_set)?;
        let dist = foreground_distribution(&train_set)?;
        Ok((train_set, test_set, dist))
    })()
    .map_err(|e: Error| e.in_stage("gen"))?;

    let model: ModelParams = (|| {
        if let Some(t) = bench.oversample_threshold {
            train_set = repeat_factor_oversample(&train_set, t)?;
        }
        let (model, log) = train(&train_set, &bench.train)?;
        write_json(&out.model(), &model)?;
        write_text(&out.train_log(), &log.to_csv())?;
        Ok(model)
    })()
    .map_err(|e: Error| e.in_stage("train"))?;

    (|| {
        for (data, path) in [(&train_set, out.train_logits()), (&test_set, out.test_logits())] {
            let logits = predict_logits(&model, &data.features)?;
            let dump = Dump::from_matrix(data.layout, &logits, &data.labels)?;
            write_dump(&path, &dump, config.dump_format)?;
        }
        Ok(())
    })()
    .map_err(|e: Error| e.in_stage("dump"))?;

    let bg = train_set.layout.bg_index();
    let stats = (|| {
        let train_dump = read_dump(&out.train_logits(), bg)?;
        let stats = gather_stats(&train_dump.records, train_dump.layout, &bench.stats)?;
        write_json(&out.stats(), &StatsFile::from_stats(&stats)?)?;
        Ok(stats)
    })()
    .map_err(|e: Error| e.in_stage("stats"))?;

    let params = (|| {
        let params = finalize(&stats, beta_mode, config.sigma_exponent)?;
        write_json(&out.calibration(), &StatsFile::finalized(&stats, beta_mode, &params)?)?;
        Ok(params)
    })()
    .map_err(|e: Error| e.in_stage("finalize"))?;

    let (test_dump, calibrated) = (|| {
        let test_dump = read_dump(&out.test_logits(), bg)?;
        let calibrated = apply_to_dump(&test_dump, &params)?;
        write_dump(&out.calibrated_logits(), &calibrated, config.dump_format)?;
        Ok((test_dump, calibrated))
    })()
    .map_err(|e: Error| e.in_stage("apply"))?;

    (|| {
        let baseline = eval_dump(&test_dump, &dist, &stats)?;
        let calibrated_report = eval_dump(&calibrated, &dist, &stats)?;
        let logit_adjustment = match bench.task {
            Task::Classification => {
                let z = map_rows(&test_dump.logits(), |r| logit_adjustment_baseline(r, &dist, config.tau))?;
                Some(evaluate(&z, &test_dump.labels(), test_dump.layout, &dist, Some(&stats))?)
            }
            Task::Detection => None,
        };
        let report = PipelineReport {
            baseline,
            calibrated: calibrated_report,
            logit_adjustment,
            beta: params.beta,
        };
        write_json(&out.report(), &report)?;
        write_text(&out.report_table(), &render_pipeline_table(&report))?;
        write_text(&out.report_csv(), &report.calibrated.to_csv())?;
        Ok(report)
    })()
    .map_err(|e: Error| e.in_stage("eval"))
}

pub fn render_pipeline_table(report: &PipelineReport) -> String {
    let mut s = format!("beta = {:.4}\n\n[baseline]\n", report.beta);
    s.push_str(&report.baseline.render_table());
    s.push_str("\n[logn]\n");
    s.push_str(&report.calibrated.render_table());
    if let Some(la) = &report.logit_adjustment {
        s.push_str("\n[logit adjustment]\n");
        s.push_str(&la.render_table());
    }
    s
}
