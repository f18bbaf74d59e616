//! Synthetic long-tail benchmarks.
//!
//! Classes are isotropic Gaussians whose counts fall off geometrically from
//! head to tail. The detection proxy adds background proposals drawn from one
//! broad Gaussian that overlaps every class.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::record::{ClassLayout, Matrix};

/// Spread of the background Gaussian relative to `noise_sigma`.
pub const BACKGROUND_SPREAD: f64 = 3.0;

// RNG streams; class means always come from stream 0 so that every split of a
// spec shares them.
const MEANS_STREAM: u64 = 0;
const OVERSAMPLE_STREAM: u64 = 1 << 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub max_count: u64,
    pub imbalance_ratio: f64,
    pub class_sep: f64,
    pub noise_sigma: f64,
    /// Background proposals per foreground proposal.
    #[serde(default)]
    pub bg_multiplier: f64,
    pub seed: u64,
    /// Background slot in detection datasets.
    #[serde(default)]
    pub bg_index: usize,
    /// Independent draw of samples around the same class means.
    #[serde(default)]
    pub split: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.num_classes < 2 {
            return bad(format!("num_classes {} < 2", self.num_classes));
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be positive".into());
        }
        if !(self.imbalance_ratio >= 1.0 && self.imbalance_ratio.is_finite()) {
            return bad(format!("imbalance_ratio {} < 1", self.imbalance_ratio));
        }
        if !(self.class_sep > 0.0 && self.class_sep.is_finite()) {
            return bad(format!("class_sep {} must be positive", self.class_sep));
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma {} must be positive", self.noise_sigma));
        }
        if !(self.bg_multiplier >= 0.0 && self.bg_multiplier.is_finite()) {
            return bad(format!("bg_multiplier {} must be >= 0", self.bg_multiplier));
        }
        if self.bg_index > self.num_classes {
            return bad(format!(
                "bg_index {} outside {} slots",
                self.bg_index,
                self.num_classes + 1
            ));
        }
        Ok(())
    }

    /// `round(max_count * ratio^(-c / (C - 1)))` for each class.
    pub fn analytic_counts(&self) -> Result<Vec<u64>> {
        self.validate()?;
        let span = (self.num_classes - 1) as f64;
        (0..self.num_classes)
            .map(|c| {
                let n = (self.max_count as f64 * self.imbalance_ratio.powf(-(c as f64) / span)).round();
                if n < 1.0 {
                    Err(Error::InfeasibleCounts {
                        class: c,
                        count: n as i64,
                    })
                } else {
                    Ok(n as u64)
                }
            })
            .collect()
    }

    pub fn background_count(&self) -> Result<u64> {
        let fg: u64 = self.analytic_counts()?.iter().sum();
        Ok((self.bg_multiplier * fg as f64).round() as u64)
    }

    /// Class means; pairwise distances are `class_sep` in expectation.
    pub fn class_means(&self) -> Matrix {
        let mut rng = self.rng(MEANS_STREAM);
        let scale = self.class_sep / (2.0 * self.feature_dim as f64).sqrt();
        let mut m = Matrix::zeros(self.num_classes, self.feature_dim);
        for v in m.as_mut_slice() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = scale * z;
        }
        m
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub features: Matrix,
    /// Slot labels under `layout`.
    pub labels: Vec<usize>,
    pub layout: ClassLayout,
    pub spec: SynthSpec,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Number of samples in each slot.
    pub fn slot_counts(&self) -> Vec<u64> {
        let mut counts = vec![0u64; self.layout.num_slots()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Labels as foreground class ids, or `None` for background samples.
    pub fn class_labels(&self) -> impl Iterator<Item = Option<usize>> + '_ {
        self.labels.iter().map(|&s| self.layout.class_of(s))
    }
}

fn sample_around(rng: &mut ChaCha8Rng, center: &[f64], sigma: f64, out: &mut Vec<f64>) {
    for &c in center {
        let z: f64 = StandardNormal.sample(rng);
        out.push(c + sigma * z);
    }
}

fn build(spec: &SynthSpec, layout: ClassLayout, bg_count: u64) -> Result<Dataset> {
    let counts = spec.analytic_counts()?;
    let means = spec.class_means();
    let mut rng = spec.rng(spec.split + 1);
    let d = spec.feature_dim;
    let total = counts.iter().sum::<u64>() + bg_count;
    let mut data = Vec::with_capacity(total as usize * d);
    let mut labels = Vec::with_capacity(total as usize);
    for (c, &n) in counts.iter().enumerate() {
        for _ in 0..n {
            sample_around(&mut rng, means.row(c), spec.noise_sigma, &mut data);
            labels.push(layout.slot_of(c));
        }
    }
    if let Some(bg) = layout.bg_index() {
        let mut center = vec![0.0; d];
        for row in means.iter_rows() {
            center.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        center.iter_mut().for_each(|a| *a /= spec.num_classes as f64);
        let sigma = BACKGROUND_SPREAD * spec.noise_sigma;
        for _ in 0..bg_count {
            sample_around(&mut rng, &center, sigma, &mut data);
            labels.push(bg);
        }
    }
    let features = Matrix::from_vec(labels.len(), d, data)?;
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.shuffle(&mut rng);
    Ok(Dataset {
        features: features.select_rows(&order),
        labels: order.iter().map(|&i| labels[i]).collect(),
        layout,
        spec: spec.clone(),
    })
}

/// Long-tail Gaussian-mixture classification data (no background).
pub fn generate_classification(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    if spec.bg_multiplier != 0.0 {
        return Err(Error::InvalidParameter(
            "classification data requires bg_multiplier = 0".into(),
        ));
    }
    build(spec, ClassLayout::classification(spec.num_classes), 0)
}

/// Foreground classes plus dominant background proposals.
pub fn generate_detection_proxy(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    if !(spec.bg_multiplier > 0.0) {
        return Err(Error::InvalidParameter(
            "detection proxy requires bg_multiplier > 0".into(),
        ));
    }
    let layout = ClassLayout::detection(spec.num_classes, spec.bg_index)?;
    build(spec, layout, spec.background_count()?)
}

/// Repeat factor for a class with frequency fraction `freq`.
pub fn repeat_factor(freq: f64, threshold_frac: f64) -> u64 {
    if freq <= 0.0 || freq >= threshold_frac {
        return 1;
    }
    // guard against sqrt(4) landing a hair above 2
    let r = ((threshold_frac / freq).sqrt() - 1e-9).ceil();
    r.max(1.0) as u64
}

/// Duplicates samples of foreground classes rarer than `threshold_frac`.
///
/// A class with frequency fraction `f < t` appears `ceil(sqrt(t / f))` times
/// as often. Background samples are never repeated. Feature values are copied
/// unchanged, and the result is shuffled deterministically from the spec seed.
pub fn repeat_factor_oversample(dataset: &Dataset, threshold_frac: f64) -> Result<Dataset> {
    if !(threshold_frac > 0.0 && threshold_frac < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "threshold fraction {threshold_frac} outside (0, 1)"
        )));
    }
    let total = dataset.len() as f64;
    let counts = dataset.slot_counts();
    let factors: Vec<u64> = counts
        .iter()
        .enumerate()
        .map(|(slot, &n)| {
            if dataset.layout.is_background(slot) {
                1
            } else {
                repeat_factor(n as f64 / total, threshold_frac)
            }
        })
        .collect();
    if factors.iter().all(|&f| f == 1) {
        return Ok(dataset.clone());
    }
    let mut order = Vec::new();
    for (i, &l) in dataset.labels.iter().enumerate() {
        for _ in 0..factors[l] {
            order.push(i);
        }
    }
    let mut rng = dataset.spec.rng(OVERSAMPLE_STREAM + dataset.spec.split);
    order.shuffle(&mut rng);
    Ok(Dataset {
        features: dataset.features.select_rows(&order),
        labels: order.iter().map(|&i| dataset.labels[i]).collect(),
        layout: dataset.layout,
        spec: dataset.spec.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn spec(c: usize, max: u64, ratio: f64) -> SynthSpec {
        SynthSpec {
            num_classes: c,
            feature_dim: 4,
            max_count: max,
            imbalance_ratio: ratio,
            class_sep: 4.0,
            noise_sigma: 1.0,
            bg_multiplier: 0.0,
            seed: 7,
            bg_index: 0,
            split: 0,
        }
    }

    #[test]
    fn geometric_counts() {
        assert_eq!(spec(3, 100, 100.0).analytic_counts().unwrap(), vec![100, 10, 1]);
        assert_eq!(spec(5, 40, 1.0).analytic_counts().unwrap(), vec![40; 5]);
        let counts = spec(20, 300, 100.0).analytic_counts().unwrap();
        assert!(counts.windows(2).all(|w| w[0] >= w[1]));
        assert!(matches!(
            spec(3, 10, 100.0).analytic_counts(),
            Err(Error::InfeasibleCounts { class: 2, .. })
        ));
    }

    #[test]
    fn classification_counts_and_determinism() {
        let s = spec(3, 100, 100.0);
        let a = generate_classification(&s).unwrap();
        assert_eq!(a.slot_counts(), vec![100, 10, 1]);
        let b = generate_classification(&s).unwrap();
        assert_eq!(a, b);
        let other = generate_classification(&SynthSpec { split: 1, ..s.clone() }).unwrap();
        assert_ne!(a.features, other.features);
        assert_eq!(s.class_means(), SynthSpec { split: 1, ..s }.class_means());
    }

    #[test]
    fn detection_background_count() {
        let s = SynthSpec {
            bg_multiplier: 10.0,
            ..spec(3, 100, 10.0)
        };
        // counts [100, 32, 10]
        let d = generate_detection_proxy(&s).unwrap();
        let counts = d.slot_counts();
        assert_eq!(counts[0], 1420);
        assert_eq!(&counts[1..], &[100, 32, 10]);

        let s111 = SynthSpec {
            bg_multiplier: 10.0,
            ..spec(3, 100, 100.0)
        };
        assert_eq!(s111.background_count().unwrap(), 1110);
        assert!(generate_detection_proxy(&spec(3, 100, 100.0)).is_err());
        assert!(generate_classification(&s111).is_err());
    }

    #[test]
    fn repeat_factor_values() {
        assert_eq!(repeat_factor(0.025, 0.1), 2);
        assert_eq!(repeat_factor(0.1, 0.1), 1);
        assert_eq!(repeat_factor(0.5, 0.1), 1);
        assert_eq!(repeat_factor(0.001, 0.1), 10);
    }

    #[test]
    fn oversampling_above_threshold_is_identity() {
        let d = generate_classification(&spec(3, 50, 2.0)).unwrap();
        assert_eq!(repeat_factor_oversample(&d, 0.01).unwrap(), d);
        assert!(repeat_factor_oversample(&d, 1.5).is_err());
    }
}
