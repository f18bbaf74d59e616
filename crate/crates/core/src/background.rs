//! Score-level algebra of background calibration.
//!
//! Shifting the background logit by `-beta` and shifting every foreground
//! logit by `+beta` give the same softmax scores. Writing the foreground score
//! as `log s_i = log(1 / (1 + e^{-beta} B)) + log s_f` with
//! `B = s_b / (1 - s_b)` shows how beta rescales the influence of the
//! uncalibrated background probability `s_b`.

use serde::{Deserialize, Serialize};

use crate::calibrate::softmax_scores;
use crate::error::{Error, Result};

/// Where the background calibration shift is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftForm {
    /// Background logit becomes `x_bg - beta`.
    BackgroundShift,
    /// Every foreground logit becomes `x_c + beta`.
    ForegroundShift,
}

/// Softmax scores after background calibration by `beta`.
pub fn score_with_bg_calibration(logits: &[f64], beta: f64, bg_index: usize, form: ShiftForm) -> Result<Vec<f64>> {
    if bg_index >= logits.len() {
        return Err(Error::InvalidParameter(format!(
            "background index {bg_index} outside {} logits",
            logits.len()
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) || !beta.is_finite() {
        return Err(Error::NonFinite { record: 0 });
    }
    let shifted: Vec<f64> = match form {
        ShiftForm::BackgroundShift => logits
            .iter()
            .enumerate()
            .map(|(i, &x)| if i == bg_index { x - beta } else { x })
            .collect(),
        ShiftForm::ForegroundShift => logits
            .iter()
            .enumerate()
            .map(|(i, &x)| if i == bg_index { x } else { x + beta })
            .collect(),
    };
    Ok(softmax_scores(&shifted))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreDecomposition {
    /// Uncalibrated background probability.
    pub s_b: f64,
    /// Probability of the class conditioned on foreground.
    pub s_f: f64,
    /// `s_b / (1 - s_b)`.
    pub b: f64,
    /// Log of the calibrated foreground score.
    pub log_score: f64,
}

fn check_open_unit(name: &'static str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain {
            name,
            value: v,
            bound: "0 < value < 1",
        })
    }
}

/// Background odds `s_b / (1 - s_b)`.
pub fn background_odds(s_b: f64) -> f64 {
    s_b / (1.0 - s_b)
}

/// Log calibrated score as a function of `(s_b, s_f, beta)`.
pub fn log_score(s_b: f64, s_f: f64, beta: f64) -> f64 {
    -(((-beta).exp() * background_odds(s_b)).ln_1p()) + s_f.ln()
}

pub fn decompose_log_score(s_b: f64, s_f: f64, beta: f64) -> Result<ScoreDecomposition> {
    check_open_unit("s_b", s_b)?;
    check_open_unit("s_f", s_f)?;
    if !beta.is_finite() {
        return Err(Error::Domain {
            name: "beta",
            value: beta,
            bound: "finite",
        });
    }
    Ok(ScoreDecomposition {
        s_b,
        s_f,
        b: background_odds(s_b),
        log_score: log_score(s_b, s_f, beta),
    })
}

/// Reads `(s_b, s_f)` for foreground slot `class_slot` off raw logits.
pub fn split_scores(logits: &[f64], bg_index: usize, class_slot: usize) -> Result<(f64, f64)> {
    if bg_index >= logits.len() || class_slot >= logits.len() || class_slot == bg_index {
        return Err(Error::InvalidParameter(format!(
            "slots bg={bg_index}, class={class_slot} invalid for {} logits",
            logits.len()
        )));
    }
    let p = softmax_scores(logits);
    let s_b = p[bg_index];
    let fg: Vec<f64> = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != bg_index)
        .map(|(_, &x)| x)
        .collect();
    let local = if class_slot > bg_index { class_slot - 1 } else { class_slot };
    let s_f = softmax_scores(&fg)[local];
    Ok((s_b, s_f))
}

/// Difference quotient of [`log_score`] in `s_b`, evaluated in closed form.
///
/// `k = -(1/d) * log(1 + e^{-beta} * (d / ((1 - s_b)(1 - s_b - d))) / (1 + e^{-beta} B(s_b)))`
pub fn changing_rate_k(delta_sb: f64, s_b: f64, s_f: f64, beta: f64) -> Result<f64> {
    check_open_unit("s_b", s_b)?;
    check_open_unit("s_b + delta_sb", s_b + delta_sb)?;
    if delta_sb == 0.0 || !delta_sb.is_finite() {
        return Err(Error::Domain {
            name: "delta_sb",
            value: delta_sb,
            bound: "nonzero and finite",
        });
    }
    if !(1.0 - s_b - delta_sb > 0.0) {
        return Err(Error::Domain {
            name: "1 - s_b - delta_sb",
            value: 1.0 - s_b - delta_sb,
            bound: "> 0",
        });
    }
    if !beta.is_finite() {
        return Err(Error::Domain {
            name: "beta",
            value: beta,
            bound: "finite",
        });
    }
    // s_f only enters y additively, so it cancels in the quotient
    let _ = s_f;
    let a = (-beta).exp();
    let db = delta_sb / ((1.0 - s_b) * (1.0 - s_b - delta_sb));
    let ratio = a * db / (1.0 + a * background_odds(s_b));
    Ok(-ratio.ln_1p() / delta_sb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_checked_equivalence() {
        let x = [1.0, 0.0, 0.0];
        let expected = 1.0 / (std::f64::consts::E.powi(2) + 2.0);
        for form in [ShiftForm::BackgroundShift, ShiftForm::ForegroundShift] {
            let s = score_with_bg_calibration(&x, -1.0, 0, form).unwrap();
            assert!((s[1] - expected).abs() < 1e-15);
            assert!((s[2] - expected).abs() < 1e-15);
        }
        assert!((expected - 0.10651).abs() < 1e-5);
    }

    #[test]
    fn zero_beta_is_plain_softmax() {
        let x = [2.0, -1.0, 0.5, 0.1];
        let plain = softmax_scores(&x);
        for form in [ShiftForm::BackgroundShift, ShiftForm::ForegroundShift] {
            assert_eq!(score_with_bg_calibration(&x, 0.0, 2, form).unwrap(), plain);
        }
    }

    #[test]
    fn bad_index_rejected() {
        assert!(score_with_bg_calibration(&[0.0, 1.0], 0.0, 2, ShiftForm::BackgroundShift).is_err());
    }

    #[test]
    fn midpoint_odds() {
        let d = decompose_log_score(0.5, 0.3, 0.0).unwrap();
        assert_eq!(d.b, 1.0);
        assert!((d.log_score - (0.5f64.ln() + 0.3f64.ln())).abs() < 1e-15);
        assert!(decompose_log_score(1.0, 0.3, 0.0).is_err());
        assert!(decompose_log_score(0.5, 0.0, 0.0).is_err());
    }

    #[test]
    fn k_at_reference_point() {
        // y(0.6) - y(0.5) = -ln(2.5) + ln(2) = -ln(1.25)
        let k = changing_rate_k(0.1, 0.5, 0.4, 0.0).unwrap();
        assert!((k - (-10.0 * 1.25f64.ln())).abs() < 1e-12);
        let k_neg = changing_rate_k(0.1, 0.5, 0.4, -1.0).unwrap();
        assert!(k_neg.abs() > k.abs());
    }

    #[test]
    fn k_domain_guards() {
        assert!(changing_rate_k(0.0, 0.5, 0.5, 0.0).is_err());
        assert!(changing_rate_k(0.6, 0.5, 0.5, 0.0).is_err());
        assert!(changing_rate_k(-0.6, 0.5, 0.5, 0.0).is_err());
        assert!(changing_rate_k(0.1, 1.0, 0.5, 0.0).is_err());
        match changing_rate_k(0.5, 0.5, 0.5, 0.0) {
            Err(Error::Domain { .. }) => {}
            other => panic!("expected domain error, got {other:?}"),
        }
    }
}
