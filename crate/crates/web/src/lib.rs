//! Browser bindings for the interactive demo in `www/`.

use wasm_bindgen::prelude::*;

use logn_core::background::{changing_rate_k, score_with_bg_calibration, ShiftForm};
use logn_core::bench::{prepare, BenchConfig, StatsPass, TestSplit, Task};
use logn_core::calibrate::{BetaMode, Components};
use logn_core::synth::SynthSpec;
use logn_core::trainer::TrainConfig;

fn text(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// Softmax scores for each beta in `betas`, one row of `logits.len()`
/// values per beta, flattened.
#[wasm_bindgen]
pub fn beta_curve(logits: Vec<f64>, bg_index: usize, betas: Vec<f64>) -> Result<Vec<f64>, String> {
    let mut out = Vec::with_capacity(betas.len() * logits.len());
    for beta in betas {
        out.extend(score_with_bg_calibration(&logits, beta, bg_index, ShiftForm::BackgroundShift).map_err(text)?);
    }
    Ok(out)
}

/// Changing rate `k` at `points` evenly spaced background scores in (0, 1).
/// Points where the step leaves the domain come back as NaN.
#[wasm_bindgen]
pub fn changing_rate_curve(delta: f64, beta: f64, points: usize) -> Vec<f64> {
    (1..=points)
        .map(|i| {
            let s_b = i as f64 / (points + 1) as f64;
            changing_rate_k(delta, s_b, 0.5, beta).unwrap_or(f64::NAN)
        })
        .collect()
}

/// Trains a small long-tailed classifier and reports per-class recall
/// before and after normalization, as JSON.
#[wasm_bindgen]
pub fn long_tail_demo(num_classes: usize, imbalance_ratio: f64, seed: u64, beta_mode: &str) -> Result<String, String> {
    let mode: BetaMode = beta_mode.parse().map_err(text)?;
    let config = BenchConfig {
        task: Task::Classification,
        data: SynthSpec {
            num_classes,
            feature_dim: 16,
            max_count: 300,
            imbalance_ratio,
            class_sep: 4.0,
            noise_sigma: 1.0,
            bg_multiplier: 0.0,
            seed,
            bg_index: 0,
            split: 0,
        },
        test: TestSplit {
            max_count: 40,
            imbalance_ratio: 1.0,
            bg_multiplier: 0.0,
            split: 1,
        },
        train: TrainConfig {
            epochs: 30,
            weight_decay: 4e-3,
            seed,
            ..TrainConfig::default()
        },
        stats: StatsPass::default(),
        oversample_threshold: None,
    };
    let run = prepare(&config).map_err(text)?;
    let before = run.evaluate(&run.test_logits).map_err(text)?;
    let (beta, z) = run.calibrated(mode, 1.0, Components::ALL).map_err(text)?;
    let after = run.evaluate(&z).map_err(text)?;
    let recall = |r: &logn_core::metrics::EvalReport| -> Vec<f64> {
        r.per_class_recall.iter().map(|v| v.unwrap_or(f64::NAN)).collect()
    };
    let out = serde_json::json!({
        "counts": run.dist.counts,
        "beta": beta,
        "mean": run.stats.mean,
        "before": { "balanced_accuracy": before.balanced_accuracy, "recall": recall(&before) },
        "after": { "balanced_accuracy": after.balanced_accuracy, "recall": recall(&after) },
    });
    Ok(out.to_string())
}
