//! Seeded synthetic feature banks standing in for CNN activations.
//!
//! All randomness comes from `ChaCha8Rng::seed_from_u64(seed)` (rand_chacha),
//! so a seed reproduces the same bytes on every platform.
//!
//! Each class gets a prototype on the informative dimensions: a unit spike on
//! its own dimension plus small random positive offsets. A sample is
//! its class prototype plus bounded jitter and Gaussian noise of standard
//! deviation `noise_level`; the remaining dimensions carry label-independent
//! nuisance values. With `noise_level = 0` the classes stay separated by a
//! margin, so the problem is linearly separable.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataio::l2_normalize_columns;
use crate::error::{Error, Result};
use crate::spectral::{FeatureBank, LabelMatrix};

const JITTER: f64 = 0.05;
const NUISANCE_SCALE: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n: usize,
    pub d: usize,
    pub k: usize,
    pub noise_level: f64,
    pub informative_fraction: f64,
    pub seed: u64,
    /// Nonnegative, unit-norm sample columns.
    pub nonneg_l2: bool,
    /// Fraction of samples held out as the test split.
    pub test_fraction: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n: 200,
            d: 50,
            k: 3,
            noise_level: 0.5,
            informative_fraction: 0.5,
            seed: 0,
            nonneg_l2: true,
            test_fraction: 0.25,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d == 0 || self.k == 0 {
            return Err(Error::InvalidInput("synthetic sizes must be positive".into()));
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return Err(Error::InvalidInput("noise_level must be >= 0".into()));
        }
        if !(self.informative_fraction > 0.0 && self.informative_fraction <= 1.0) {
            return Err(Error::InvalidInput("informative_fraction must be in (0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::InvalidInput("test_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn informative_dims(&self) -> usize {
        ((self.informative_fraction * self.d as f64).round() as usize).clamp(1, self.d)
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub bank: FeatureBank,
    pub labels: LabelMatrix,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Balanced one-hot labels in seeded random order.
pub fn generate_labels(n: usize, k: usize, seed: u64) -> Result<LabelMatrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut classes: Vec<usize> = (0..n).map(|i| i % k).collect();
    classes.shuffle(&mut rng);
    LabelMatrix::one_hot(&classes, k)
}

/// Seeded (train, test) index split, both ascending.
pub fn split_indices(n: usize, test_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_test = ((n as f64) * test_fraction).round() as usize;
    let mut test = order[..n_test].to_vec();
    let mut train = order[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    (train, test)
}

/// Features for existing single-label targets; only `d`, `noise_level`,
/// `informative_fraction`, `seed` and `nonneg_l2` of `spec` are used.
pub fn synthesize_bank(name: &str, labels: &LabelMatrix, spec: &SynthSpec) -> Result<FeatureBank> {
    let all: Vec<usize> = (0..labels.k()).collect();
    synthesize_partial_bank(name, labels, spec, &all)
}

/// Like [`synthesize_bank`], but only the listed classes get their own
/// prototype. All other classes share one prototype, so the bank cannot tell
/// them apart; with no classes listed it is independent of the labels.
pub fn synthesize_partial_bank(
    name: &str,
    labels: &LabelMatrix,
    spec: &SynthSpec,
    classes: &[usize],
) -> Result<FeatureBank> {
    spec.validate()?;
    if let Some(&c) = classes.iter().find(|&&c| c >= labels.k()) {
        return Err(Error::InvalidInput(format!("class {c} out of range for {} classes", labels.k())));
    }
    let informative = spec.informative_dims();
    let k = labels.k();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut prototypes = DMatrix::from_fn(informative, k + 1, |r, c| {
        let spike = if c < k && r == c % informative { 1.0 } else { 0.0 };
        spike + 0.2 * rng.random::<f64>()
    });
    let shared = prototypes.column(k).into_owned();
    for c in (0..k).filter(|c| !classes.contains(c)) {
        prototypes.set_column(c, &shared);
    }

    let mut data = DMatrix::zeros(spec.d, labels.n());
    for i in 0..labels.n() {
        let class = labels.first_positive(i).ok_or_else(|| {
            Error::InvalidInput(format!("sample {i} has no positive label"))
        })?;
        for r in 0..spec.d {
            let value = if r < informative {
                let noise: f64 = rng.sample(StandardNormal);
                prototypes[(r, class)] + JITTER * rng.random_range(-1.0..1.0) + spec.noise_level * noise
            } else {
                NUISANCE_SCALE * rng.random::<f64>()
            };
            data[(r, i)] = value;
        }
    }
    if spec.nonneg_l2 {
        data.apply(|v| *v = v.abs());
        // jitter keeps every column away from zero
        let bank = FeatureBank::new(name, data)?;
        return Ok(l2_normalize_columns(&bank)?.0);
    }
    FeatureBank::new(name, data)
}

pub fn generate_synthetic(spec: &SynthSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let labels = generate_labels(spec.n, spec.k, spec.seed ^ 0x6c61_6265_6c73)?;
    let bank = synthesize_bank(&format!("synth{}", spec.seed), &labels, spec)?;
    let (train, test) = split_indices(spec.n, spec.test_fraction, spec.seed ^ 0x0073_706c_6974);
    Ok(SyntheticData {
        bank,
        labels,
        train,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::binary::{encode_bank, encode_labels};

    #[test]
    fn same_seed_same_bytes() {
        let spec = SynthSpec { seed: 42, ..Default::default() };
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(encode_bank(&a.bank), encode_bank(&b.bank));
        assert_eq!(encode_labels(&a.labels), encode_labels(&b.labels));
        assert_eq!(a.test, b.test);
        let c = generate_synthetic(&SynthSpec { seed: 43, ..spec }).unwrap();
        assert_ne!(encode_bank(&a.bank), encode_bank(&c.bank));
    }

    #[test]
    fn generated_labels_are_one_hot_and_balanced() {
        let labels = generate_labels(30, 3, 1).unwrap();
        assert!(labels.is_one_hot());
        assert!((0..3).all(|c| labels.positives(c) == 10));
        labels.check_trainable().unwrap();
    }

    #[test]
    fn split_is_disjoint_and_complete() {
        let (train, test) = split_indices(40, 0.25, 3);
        assert_eq!(test.len(), 10);
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..40).collect::<Vec<_>>());
    }

    #[test]
    fn nonneg_regime_has_unit_nonnegative_columns() {
        let data = generate_synthetic(&SynthSpec::default()).unwrap();
        for col in data.bank.data().column_iter() {
            assert!((col.norm() - 1.0).abs() < 1e-12);
            assert!(col.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn rejects_invalid_spec() {
        for spec in [
            SynthSpec { n: 0, ..Default::default() },
            SynthSpec { noise_level: -1.0, ..Default::default() },
            SynthSpec { informative_fraction: 0.0, ..Default::default() },
            SynthSpec { test_fraction: 1.0, ..Default::default() },
        ] {
            assert!(generate_synthetic(&spec).is_err());
        }
    }
}
