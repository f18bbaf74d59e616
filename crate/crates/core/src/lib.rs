//! Post-hoc logit normalization for long-tailed classifiers and detectors.
//!
//! A trained model's logits are whitened per class with statistics gathered
//! over the training set, after the class means are shifted by a scalar
//! `beta` that calibrates the background slot:
//!
//! ```text
//! x_hat_c = (x_c - (mu_c - beta)) / sqrt(var_c + eps)
//! ```
//!
//! The background slot itself keeps mean 0 and variance 1.
//!
//! ```
//! use logn_core::{calibrate, stats, record::LogitRecord};
//!
//! let records = vec![
//!     LogitRecord::new(1, vec![2.0, 1.0, -1.0]),
//!     LogitRecord::new(2, vec![0.0, -3.0, 1.0]),
//! ];
//! let mut running = stats::RunningStats::new(3, stats::StatsConfig::default()).unwrap();
//! running.update_ema(&records).unwrap();
//! let params = calibrate::finalize(&running, calibrate::BetaMode::FgMin, 1.0).unwrap();
//! let out = calibrate::logn_normalize(&records[0].logits, &params).unwrap();
//! assert_eq!(out.len(), 3);
//! ```

pub mod background;
pub mod bench;
pub mod calibrate;
pub mod error;
pub mod format;
pub mod metrics;
pub mod pipeline;
pub mod record;
pub mod stats;
pub mod synth;
pub mod trainer;
pub mod verify;

pub use calibrate::{BetaMode, CalibrationParams, Components};
pub use error::{Error, Result};
pub use record::{ClassLayout, LogitRecord, Matrix};
pub use stats::{LabelDistribution, RunningStats, StatsConfig};
