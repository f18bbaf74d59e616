//! Finalized normalization parameters and the transforms that use them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::record::ClassLayout;
use crate::stats::{LabelDistribution, RunningStats};

/// How the background calibration scalar is chosen from the running means.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BetaMode {
    /// Minimum of the foreground means.
    FgMin,
    /// Average of the foreground means.
    FgAvg,
    /// Maximum of the foreground means.
    FgMax,
    /// Mean of the background slot.
    BgMean,
    Constant(f64),
    /// No background calibration (`beta = 0`).
    None,
}

impl BetaMode {
    fn needs_background(&self) -> bool {
        matches!(self, BetaMode::BgMean)
    }
}

impl fmt::Display for BetaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BetaMode::FgMin => f.write_str("fg-min"),
            BetaMode::FgAvg => f.write_str("fg-avg"),
            BetaMode::FgMax => f.write_str("fg-max"),
            BetaMode::BgMean => f.write_str("bg-mean"),
            BetaMode::Constant(v) => write!(f, "const:{v}"),
            BetaMode::None => f.write_str("none"),
        }
    }
}

impl FromStr for BetaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mode = match s.trim() {
            "fg-min" | "fg_min" => BetaMode::FgMin,
            "fg-avg" | "fg_avg" => BetaMode::FgAvg,
            "fg-max" | "fg_max" => BetaMode::FgMax,
            "bg-mean" | "bg_mean" => BetaMode::BgMean,
            "none" => BetaMode::None,
            other => {
                let v = other
                    .strip_prefix("const:")
                    .and_then(|v| v.parse::<f64>().ok())
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::InvalidParameter(format!("unknown beta mode `{other}`")))?;
                BetaMode::Constant(v)
            }
        };
        Ok(mode)
    }
}

impl Serialize for BetaMode {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for BetaMode {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Which parts of the normalization are switched on. Used for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Components {
    pub mean: bool,
    pub scale: bool,
    pub beta: bool,
}

impl Components {
    pub const ALL: Components = Components {
        mean: true,
        scale: true,
        beta: true,
    };
    pub const MEAN_ONLY: Components = Components {
        mean: true,
        scale: false,
        beta: false,
    };
    pub const SCALE_ONLY: Components = Components {
        mean: false,
        scale: true,
        beta: false,
    };
    pub const BETA_ONLY: Components = Components {
        mean: false,
        scale: false,
        beta: true,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationParams {
    /// Mean after the beta shift, with the background slot zeroed.
    pub adj_mean: Vec<f64>,
    pub var: Vec<f64>,
    pub beta: f64,
    pub eps: f64,
    pub sigma_exponent: f64,
    pub bg_index: Option<usize>,
}

impl CalibrationParams {
    pub fn num_slots(&self) -> usize {
        self.adj_mean.len()
    }

    pub fn layout(&self) -> Result<ClassLayout> {
        ClassLayout::new(self.adj_mean.len(), self.bg_index)
    }

    /// `(var + eps)^(p / 2)` per slot.
    pub fn scales(&self) -> Vec<f64> {
        let half_p = 0.5 * self.sigma_exponent;
        self.var.iter().map(|v| (v + self.eps).powf(half_p)).collect()
    }

    fn check_input(&self, logits: &[f64]) -> Result<()> {
        if logits.len() != self.num_slots() {
            return Err(Error::DimensionMismatch {
                expected: self.num_slots(),
                found: logits.len(),
                record: None,
            });
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { record: 0 });
        }
        Ok(())
    }
}

fn foreground_means(stats: &RunningStats) -> Vec<f64> {
    stats
        .mean
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != stats.bg_index)
        .map(|(_, m)| *m)
        .collect()
}

/// Beta as selected by `mode` over the foreground means.
pub fn select_beta(stats: &RunningStats, mode: BetaMode) -> Result<f64> {
    if !stats.initialized {
        return Err(Error::Uninitialized);
    }
    let fg = foreground_means(stats);
    if fg.is_empty() {
        return Err(Error::Empty("foreground classes"));
    }
    let beta = match mode {
        BetaMode::FgMin => fg.iter().copied().fold(f64::INFINITY, f64::min),
        BetaMode::FgMax => fg.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        BetaMode::FgAvg => fg.iter().sum::<f64>() / fg.len() as f64,
        BetaMode::BgMean => match stats.bg_index {
            Some(bg) => stats.mean[bg],
            None => return Err(Error::MissingBackground("beta mode bg-mean")),
        },
        BetaMode::Constant(v) => v,
        BetaMode::None => 0.0,
    };
    Ok(beta)
}

/// Turns running statistics into normalization parameters.
pub fn finalize(stats: &RunningStats, mode: BetaMode, sigma_exponent: f64) -> Result<CalibrationParams> {
    finalize_with(stats, mode, sigma_exponent, Components::ALL)
}

/// [`finalize`] with some components disabled: a disabled mean contributes
/// zero, a disabled scale uses unit variance, a disabled beta is zero.
pub fn finalize_with(
    stats: &RunningStats,
    mode: BetaMode,
    sigma_exponent: f64,
    components: Components,
) -> Result<CalibrationParams> {
    if !stats.initialized {
        return Err(Error::Uninitialized);
    }
    if mode.needs_background() && stats.bg_index.is_none() {
        return Err(Error::MissingBackground("beta mode bg-mean"));
    }
    if !(sigma_exponent >= 1.0 && sigma_exponent.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "sigma exponent {sigma_exponent} must be >= 1"
        )));
    }
    if !(stats.eps > 0.0) {
        return Err(Error::InvalidParameter(format!("eps {} must be positive", stats.eps)));
    }
    let beta = if components.beta {
        select_beta(stats, mode)?
    } else {
        0.0
    };
    let mut adj_mean: Vec<f64> = stats
        .mean
        .iter()
        .map(|m| if components.mean { m - beta } else { -beta })
        .collect();
    let mut var: Vec<f64> = if components.scale {
        stats.var.iter().map(|v| v.max(0.0)).collect()
    } else {
        vec![1.0; stats.var.len()]
    };
    if let Some(bg) = stats.bg_index {
        adj_mean[bg] = 0.0;
        var[bg] = 1.0;
    }
    Ok(CalibrationParams {
        adj_mean,
        var,
        beta,
        eps: stats.eps,
        sigma_exponent,
        bg_index: stats.bg_index,
    })
}

/// `(x - adj_mean) / (var + eps)^(p/2)` per slot.
pub fn logn_normalize(logits: &[f64], params: &CalibrationParams) -> Result<Vec<f64>> {
    params.check_input(logits)?;
    let half_p = 0.5 * params.sigma_exponent;
    Ok(logits
        .iter()
        .zip(&params.adj_mean)
        .zip(&params.var)
        .map(|((x, m), v)| (x - m) / (v + params.eps).powf(half_p))
        .collect())
}

/// Inverse of [`logn_normalize`]: `x * (var + eps)^(p/2) + mean - beta`.
///
/// Used during training, where the scaled and shifted logits feed the loss.
pub fn online_inverse(logits: &[f64], params: &CalibrationParams) -> Result<Vec<f64>> {
    params.check_input(logits)?;
    let half_p = 0.5 * params.sigma_exponent;
    Ok(logits
        .iter()
        .zip(&params.adj_mean)
        .zip(&params.var)
        .map(|((x, m), v)| x * (v + params.eps).powf(half_p) + m)
        .collect())
}

/// Prior-based logit adjustment: `x_c - tau * log(n_c / sum(n))`.
pub fn logit_adjustment_baseline(logits: &[f64], dist: &LabelDistribution, tau: f64) -> Result<Vec<f64>> {
    if logits.len() != dist.num_classes() {
        return Err(Error::DimensionMismatch {
            expected: dist.num_classes(),
            found: logits.len(),
            record: None,
        });
    }
    if let Some(class) = dist.counts.iter().position(|&n| n == 0) {
        return Err(Error::ZeroCount { class });
    }
    let total = dist.total() as f64;
    Ok(logits
        .iter()
        .zip(&dist.counts)
        .map(|(x, &n)| x - tau * (n as f64 / total).ln())
        .collect())
}

/// Softmax with max-subtraction.
pub fn softmax_scores(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}
