//! Multi-spectral time-series datasets.
//!
//! A sample is a `t×b` matrix stored timestep-major: all bands of timestep
//! 0, then timestep 1, and so on. Every sample of a [`Dataset`] shares `t`,
//! `b` and the domain id.

mod format;
mod generator;

pub use format::{load, load_csv, load_with_shape, save, save_csv, sample_bytes, FORMAT_VERSION, HEADER_BYTES, MAGIC};
pub use generator::{curve_value, default_curves, generate, ClassCurve, DomainShift, GeneratorConfig, SOURCE_DOMAIN_ID, TARGET_DOMAIN_ID};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// On-disk class value of a sample without a label.
pub const UNLABELED: i16 = -1;

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSample {
    pub id: u64,
    pub domain: u32,
    /// `None` for target-domain samples without a label.
    pub class: Option<usize>,
    /// `t·b` values, timestep-major.
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub steps: usize,
    pub bands: usize,
    pub classes: usize,
    pub domain: u32,
    pub samples: Vec<SequenceSample>,
}

impl Dataset {
    pub fn new(steps: usize, bands: usize, classes: usize, domain: u32) -> Self {
        Self {
            steps,
            bands,
            classes,
            domain,
            samples: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        self.samples.iter().all(|s| s.class.is_some())
    }

    /// Checks every invariant, naming the first offending sample.
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.bands == 0 {
            return Err(Error::Format {
                kind: "dataset",
                reason: format!("t={} b={} must both be positive", self.steps, self.bands),
            });
        }
        let width = self.steps * self.bands;
        for s in &self.samples {
            if s.values.len() != width {
                return Err(Error::Sample {
                    sample: s.id,
                    field: "values",
                    reason: format!("expected {width} values, found {}", s.values.len()),
                });
            }
            if let Some(pos) = s.values.iter().position(|v| !v.is_finite()) {
                return Err(Error::Sample {
                    sample: s.id,
                    field: "values",
                    reason: format!("non-finite value at position {pos}"),
                });
            }
            if let Some(c) = s.class {
                if c >= self.classes {
                    return Err(Error::Sample {
                        sample: s.id,
                        field: "class",
                        reason: format!("class {c} outside 0..{}", self.classes),
                    });
                }
            }
            if s.domain != self.domain {
                return Err(Error::Sample {
                    sample: s.id,
                    field: "domain",
                    reason: format!("domain {} in a dataset of domain {}", s.domain, self.domain),
                });
            }
        }
        Ok(())
    }

    /// One sample as a `t×b` tensor.
    pub fn sample_tensor(&self, index: usize) -> Tensor {
        let s = &self.samples[index];
        Tensor::new(
            [self.steps, self.bands],
            s.values.iter().map(|&v| v as f64).collect(),
        )
        .expect("validated sample width")
    }

    /// Gathers `indices` into a normalized batch.
    pub fn batch(&self, indices: &[usize], norm: &Normalizer) -> SequenceBatch {
        let width = self.steps * self.bands;
        let mut values = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            for (k, &v) in self.samples[i].values.iter().enumerate() {
                values.push(norm.apply(k % self.bands, v as f64));
            }
        }
        let labels = indices
            .iter()
            .map(|&i| self.samples[i].class)
            .collect::<Option<Vec<_>>>();
        SequenceBatch {
            steps: self.steps,
            bands: self.bands,
            values: Tensor::new([indices.len() * self.steps, self.bands], values)
                .expect("batch width"),
            labels,
            domain: self.domain,
        }
    }

    /// Flattened samples as an `n×(t·b)` matrix, used for raw-input
    /// domain-gap measurements.
    pub fn flat_rows(&self) -> Vec<Vec<f64>> {
        self.samples
            .iter()
            .map(|s| s.values.iter().map(|&v| v as f64).collect())
            .collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for s in &self.samples {
            if let Some(c) = s.class {
                counts[c] += 1;
            }
        }
        counts
    }

    fn with_samples(&self, samples: Vec<SequenceSample>) -> Self {
        Self {
            samples,
            ..Self::new(self.steps, self.bands, self.classes, self.domain)
        }
    }
}

/// A batch laid out as `[n·t, b]` with optional class labels.
#[derive(Clone, Debug)]
pub struct SequenceBatch {
    pub steps: usize,
    pub bands: usize,
    pub values: Tensor,
    pub labels: Option<Vec<usize>>,
    pub domain: u32,
}

impl SequenceBatch {
    pub fn len(&self) -> usize {
        self.values.rows() / self.steps.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-band standardization. Statistics come from the source training set
/// and are applied unchanged to every other dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(bands: usize) -> Self {
        Self {
            mean: vec![0.0; bands],
            std: vec![1.0; bands],
        }
    }

    pub fn fit(data: &Dataset) -> Self {
        let b = data.bands;
        let mut sum = vec![0.0; b];
        let mut sq = vec![0.0; b];
        let mut n = 0usize;
        for s in &data.samples {
            for (k, &v) in s.values.iter().enumerate() {
                sum[k % b] += v as f64;
                sq[k % b] += (v as f64) * (v as f64);
            }
            n += data.steps;
        }
        if n == 0 {
            return Self::identity(b);
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let var = (q / n as f64 - m * m).max(0.0);
                if var > 1e-24 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, band: usize, value: f64) -> f64 {
        (value - self.mean[band]) / self.std[band]
    }
}

/// Seeded, class-stratified split. `fraction` of every class goes to the
/// first output (rounded to the nearest sample).
pub fn split(data: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Invalid(format!("split fraction {fraction} outside (0, 1)")));
    }
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); data.classes + 1];
    for (i, s) in data.samples.iter().enumerate() {
        groups[s.class.unwrap_or(data.classes)].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (c, group) in groups.iter_mut().enumerate() {
        if group.is_empty() {
            continue;
        }
        if group.len() < 2 {
            return Err(Error::Invalid(format!(
                "class {} has {} sample(s); stratified split needs at least 2",
                if c == data.classes { "unlabeled".to_string() } else { c.to_string() },
                group.len()
            )));
        }
        group.shuffle(&mut rng);
        let take = (fraction * group.len() as f64).round() as usize;
        train.extend_from_slice(&group[..take]);
        test.extend_from_slice(&group[take..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    let pick = |idx: &[usize]| idx.iter().map(|&i| data.samples[i].clone()).collect();
    Ok((data.with_samples(pick(&train)), data.with_samples(pick(&test))))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn toy(per_class: usize, classes: usize) -> Dataset {
        let mut d = Dataset::new(3, 2, classes, 0);
        let mut id = 0;
        for c in 0..classes {
            for i in 0..per_class {
                d.samples.push(SequenceSample {
                    id,
                    domain: 0,
                    class: Some(c),
                    values: (0..6).map(|k| (c * 10 + i) as f32 + k as f32 * 0.5).collect(),
                });
                id += 1;
            }
        }
        d
    }

    #[test]
    fn split_is_stratified_exhaustive_and_seeded() {
        let d = toy(10, 3);
        let (a, b) = split(&d, 0.5, 7).unwrap();
        assert_eq!(a.class_counts(), vec![5, 5, 5]);
        assert_eq!(b.class_counts(), vec![5, 5, 5]);
        let mut ids: Vec<u64> = a.samples.iter().chain(&b.samples).map(|s| s.id).collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..30).collect::<Vec<_>>());
        let (a2, _) = split(&d, 0.5, 7).unwrap();
        assert_eq!(a, a2);
        let (a3, _) = split(&d, 0.5, 8).unwrap();
        assert_ne!(a, a3);
    }

    #[test]
    fn split_rejects_bad_inputs() {
        assert!(split(&toy(10, 2), 1.0, 0).is_err());
        assert!(split(&toy(10, 2), 0.0, 0).is_err());
        assert!(split(&toy(1, 2), 0.5, 0).is_err());
    }

    #[test]
    fn normalizer_standardizes_bands() {
        let d = toy(4, 2);
        let n = Normalizer::fit(&d);
        let all: Vec<usize> = (0..d.len()).collect();
        let batch = d.batch(&all, &n);
        for band in 0..2 {
            let col: Vec<f64> = (0..batch.values.rows()).map(|r| batch.values.at(r, band)).collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-9);
        }
        assert_eq!(batch.labels.as_ref().unwrap().len(), 8);
        assert_eq!(batch.len(), 8);
    }

    #[test]
    fn validation_names_the_sample() {
        let mut d = toy(2, 2);
        d.samples[3].class = Some(2);
        match d.validate() {
            Err(Error::Sample { sample, field, .. }) => {
                assert_eq!(sample, 3);
                assert_eq!(field, "class");
            }
            other => panic!("{other:?}"),
        }
    }

    proptest::proptest! {
        #[test]
        fn split_proportions_within_one_sample(per_class in 2usize..30, fraction in 0.05f64..0.95, seed in 0u64..1000) {
            let d = toy(per_class, 3);
            let (a, b) = split(&d, fraction, seed).unwrap();
            for c in a.class_counts() {
                proptest::prop_assert!((c as f64 - fraction * per_class as f64).abs() <= 1.0);
            }
            proptest::prop_assert_eq!(a.len() + b.len(), d.len());
        }
    }
}
