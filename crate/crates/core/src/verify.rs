//! Randomized identity and inequality checks behind `logn verify`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::background::{background_odds, changing_rate_k, log_score, score_with_bg_calibration, ShiftForm};
use crate::calibrate::{logn_normalize, online_inverse, softmax_scores, CalibrationParams};
use crate::format::{write_dump_binary, BinaryDumpReader, Dump};
use crate::record::{ClassLayout, LogitRecord};
use crate::stats::{compute_exact, StatsConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub property: String,
    pub trials: usize,
    pub max_violation: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub passed: bool,
    pub suites: Vec<SuiteResult>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn logits(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * normal(rng)).collect()
}

/// Tracks the largest violation seen; `tol` is the pass threshold.
struct Tally {
    property: &'static str,
    trials: usize,
    max: f64,
    tol: f64,
}

impl Tally {
    fn new(property: &'static str, tol: f64) -> Self {
        Self {
            property,
            trials: 0,
            max: 0.0,
            tol,
        }
    }

    fn record(&mut self, violation: f64) {
        self.trials += 1;
        // NaN must fail the suite
        if violation.is_nan() || violation > self.max {
            self.max = if violation.is_nan() { f64::INFINITY } else { violation };
        }
    }

    fn finish(self) -> SuiteResult {
        SuiteResult {
            property: self.property.into(),
            trials: self.trials,
            max_violation: self.max,
            passed: self.max <= self.tol,
        }
    }
}

pub fn shift_equivalence(rng: &mut ChaCha8Rng, trials: usize) -> SuiteResult {
    let mut t = Tally::new("background_shift_equivalence", 1e-12);
    for _ in 0..trials {
        let n = rng.random_range(2..=16);
        let x = logits(rng, n, 4.0);
        let beta = rng.random_range(-8.0..8.0);
        let bg = rng.random_range(0..n);
        let a = score_with_bg_calibration(&x, beta, bg, ShiftForm::BackgroundShift).unwrap();
        let b = score_with_bg_calibration(&x, beta, bg, ShiftForm::ForegroundShift).unwrap();
        let diff = (0..n).filter(|&i| i != bg).map(|i| (a[i] - b[i]).abs()).fold(0.0, f64::max);
        t.record(diff);
    }
    t.finish()
}

pub fn random_params(rng: &mut ChaCha8Rng, n: usize, p: f64) -> CalibrationParams {
    let bg = rng.random_bool(0.5).then(|| rng.random_range(0..n));
    let mut adj_mean = logits(rng, n, 5.0);
    let mut var: Vec<f64> = (0..n).map(|_| 10f64.powf(rng.random_range(-3.0..3.0))).collect();
    if let Some(b) = bg {
        adj_mean[b] = 0.0;
        var[b] = 1.0;
    }
    CalibrationParams {
        adj_mean,
        var,
        beta: rng.random_range(-5.0..5.0),
        eps: 1e-5,
        sigma_exponent: p,
        bg_index: bg,
    }
}

pub fn inverse_composition(rng: &mut ChaCha8Rng, trials: usize) -> SuiteResult {
    let mut t = Tally::new("inverse_composition", 1e-9);
    for _ in 0..trials {
        let n = rng.random_range(2..=16);
        let params = random_params(rng, n, 1.0);
        let x = logits(rng, n, 3.0);
        let y = logn_normalize(&online_inverse(&x, &params).unwrap(), &params).unwrap();
        let err = x
            .iter()
            .zip(&y)
            .map(|(a, b)| (a - b).abs() / a.abs().max(1.0))
            .fold(0.0, f64::max);
        t.record(err);
    }
    t.finish()
}

pub fn logn_monotone(rng: &mut ChaCha8Rng, trials: usize) -> SuiteResult {
    // violation > 0 means a coordinate failed to increase
    let mut t = Tally::new("logn_strictly_increasing", 0.0);
    for _ in 0..trials {
        let n = rng.random_range(2..=8);
        let p = rng.random_range(1.0..3.0);
        let params = random_params(rng, n, p);
        let x = logits(rng, n, 3.0);
        let i = rng.random_range(0..n);
        let mut x2 = x.clone();
        x2[i] += rng.random_range(0.01..1.0);
        let a = logn_normalize(&x, &params).unwrap();
        let b = logn_normalize(&x2, &params).unwrap();
        t.record(if b[i] > a[i] { 0.0 } else { a[i] - b[i] + f64::MIN_POSITIVE });
    }
    t.finish()
}

/// Grid check that a negative beta amplifies the changing rate.
pub fn changing_rate_inequality() -> SuiteResult {
    let mut t = Tally::new("negative_beta_amplifies_changing_rate", 0.0);
    for i in 1..=19 {
        let s_b = 0.05 * i as f64;
        for delta in [-0.05, -0.01, 0.01, 0.05] {
            for beta in [-3.0, -2.0, -1.0] {
                let (Ok(k), Ok(k0)) = (changing_rate_k(delta, s_b, 0.5, beta), changing_rate_k(delta, s_b, 0.5, 0.0)) else {
                    continue;
                };
                // strict inequality: equality counts as a violation
                let margin = k.abs() - k0.abs();
                t.record(if margin > 0.0 { 0.0 } else { -margin + f64::MIN_POSITIVE });
            }
        }
    }
    t.finish()
}

/// The closed form of k equals the difference quotient of the log score.
pub fn changing_rate_quotient(rng: &mut ChaCha8Rng, trials: usize) -> SuiteResult {
    let mut t = Tally::new("changing_rate_matches_difference_quotient", 1e-8);
    while t.trials < trials {
        let s_b: f64 = rng.random_range(0.01..0.99);
        let delta: f64 = rng.random_range(-0.1..0.1);
        let s_f: f64 = rng.random_range(0.01..0.99);
        let beta: f64 = rng.random_range(-4.0..4.0);
        let Ok(k) = changing_rate_k(delta, s_b, s_f, beta) else {
            continue;
        };
        let q = (log_score(s_b + delta, s_f, beta) - log_score(s_b, s_f, beta)) / delta;
        t.record((k - q).abs() / q.abs().max(1.0));
    }
    t.finish()
}

pub fn beta_limit(rng: &mut ChaCha8Rng, trials: usize) -> SuiteResult {
    let mut t = Tally::new("background_takes_over_as_beta_decreases", 0.0);
    for _ in 0..trials {
        let n = rng.random_range(2..=10);
        let x = logits(rng, n, 2.0);
        let bg = rng.random_range(0..n);
        let mut prev: Option<Vec<f64>> = None;
        for beta in [0.0, -2.0, -4.0, -8.0] {
            let s = score_with_bg_calibration(&x, beta, bg, ShiftForm::BackgroundShift).unwrap();
            if let Some(p) = &prev {
                let mut v: f64 = (p[bg] - s[bg]).max(0.0);
                for i in (0..n).filter(|&i| i != bg) {
                    v = v.max(s[i] - p[i]);
                }
                t.record(v);
            }
            prev = Some(s);
        }
    }
    t.finish()
}

pub fn odds_monotone() -> SuiteResult {
    let mut t = Tally::new("background_odds_increasing", 0.0);
    let mut prev = background_odds(1e-4);
    for i in 2..10_000 {
        let b = background_odds(i as f64 * 1e-4);
        t.record(if b > prev { 0.0 } else { prev - b + f64::MIN_POSITIVE });
        prev = b;
    }
    t.finish()
}

pub fn softmax_identities(rng: &mut ChaCha8Rng, trials: usize) -> SuiteResult {
    let mut t = Tally::new("softmax_sum_and_shift_invariance", 1e-12);
    for _ in 0..trials {
        let n = rng.random_range(1..=20);
        let x = logits(rng, n, 10.0);
        let c = rng.random_range(-50.0..50.0);
        let p = softmax_scores(&x);
        let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
        let q = softmax_scores(&shifted);
        let sum_err = (p.iter().sum::<f64>() - 1.0).abs();
        let shift_err = p.iter().zip(&q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        t.record(sum_err.max(shift_err));
    }
    t.finish()
}

pub fn exact_stats_two_pass(rng: &mut ChaCha8Rng, trials: usize) -> SuiteResult {
    let mut t = Tally::new("exact_statistics_match_two_pass", 1e-10);
    for _ in 0..trials {
        let n = rng.random_range(2..=8);
        let m = rng.random_range(1..=300);
        let offset = rng.random_range(-100.0..100.0);
        let records: Vec<LogitRecord> = (0..m)
            .map(|_| {
                let x = logits(rng, n, 3.0).into_iter().map(|v| v + offset).collect();
                LogitRecord::new(rng.random_range(0..n), x)
            })
            .collect();
        let s = compute_exact(&records, StatsConfig::classification()).unwrap();
        let mut err: f64 = 0.0;
        for j in 0..n {
            let mean = records.iter().map(|r| r.logits[j]).sum::<f64>() / m as f64;
            let var = records.iter().map(|r| (r.logits[j] - mean).powi(2)).sum::<f64>() / m as f64;
            err = err
                .max((s.mean[j] - mean).abs() / mean.abs().max(1.0))
                .max((s.var[j] - var).abs() / var.abs().max(1.0));
        }
        t.record(err);
    }
    t.finish()
}

pub fn binary_round_trip(rng: &mut ChaCha8Rng, trials: usize) -> SuiteResult {
    let mut t = Tally::new("binary_dump_round_trip", 0.0);
    for _ in 0..trials {
        let n = rng.random_range(1..=12);
        let layout = ClassLayout::new(n, None).unwrap();
        let records: Vec<LogitRecord> = (0..rng.random_range(0..50))
            .map(|_| {
                // values representable in f32 survive exactly
                let x = logits(rng, n, 5.0).into_iter().map(|v| v as f32 as f64).collect();
                LogitRecord::new(rng.random_range(0..n), x)
            })
            .collect();
        let dump = Dump::new(layout, records).unwrap();
        let mut bytes = Vec::new();
        write_dump_binary(&mut bytes, &dump).unwrap();
        let back: Vec<LogitRecord> = BinaryDumpReader::new(&bytes[..])
            .unwrap()
            .collect::<crate::Result<_>>()
            .unwrap();
        t.record(if back == dump.records { 0.0 } else { 1.0 });
    }
    t.finish()
}

pub fn run_all(seed: u64) -> VerifyReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let suites = vec![
        shift_equivalence(&mut rng, 10_000),
        inverse_composition(&mut rng, 1_000),
        logn_monotone(&mut rng, 1_000),
        changing_rate_inequality(),
        changing_rate_quotient(&mut rng, 1_000),
        beta_limit(&mut rng, 500),
        odds_monotone(),
        softmax_identities(&mut rng, 1_000),
        exact_stats_two_pass(&mut rng, 100),
        binary_round_trip(&mut rng, 100),
    ];
    VerifyReport {
        seed,
        passed: suites.iter().all(|s| s.passed),
        suites,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass() {
        let report = run_all(0);
        for s in &report.suites {
            assert!(s.passed, "{s:?}");
            assert!(s.trials > 0);
        }
        assert!(report.passed);
    }

    #[test]
    fn tally_fails_on_nan() {
        let mut t = Tally::new("x", 1.0);
        t.record(f64::NAN);
        assert!(!t.finish().passed);
    }
}
