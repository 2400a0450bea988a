//! Synthetic two-domain phenology data.
//!
//! Class `c`, band `j` follows the clean curve
//! `v(τ) = baseline[c][j] + amplitude[c][j]·exp(−(τ−peak[c])²/(2·width[c]²))`.
//! The target domain sees `gain·v(τ − shift) + offset[j]`. Both domains then
//! get i.i.d. Gaussian noise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, SequenceSample};
use crate::error::{Error, Result};

pub const SOURCE_DOMAIN_ID: u32 = 0;
pub const TARGET_DOMAIN_ID: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassCurve {
    pub peak: f64,
    pub width: f64,
    /// One per band.
    pub amplitude: Vec<f64>,
    /// One per band.
    pub baseline: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainShift {
    pub gain: f64,
    /// Additive offset, one per band.
    pub offset: Vec<f64>,
    /// Delay of the target curves in timesteps.
    pub shift: i64,
}

impl DomainShift {
    pub fn none(bands: usize) -> Self {
        Self {
            gain: 1.0,
            offset: vec![0.0; bands],
            shift: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub classes: usize,
    pub samples_per_class: usize,
    pub steps: usize,
    pub bands: usize,
    /// Amplitude scale `A`; default offsets and noise are fractions of it.
    pub amplitude: f64,
    pub curves: Vec<ClassCurve>,
    pub shift: DomainShift,
    pub noise: f64,
    /// Std of a per-sample multiplicative amplitude factor around 1.
    pub amplitude_jitter: f64,
    /// Std of a per-sample peak-time offset, in timesteps.
    pub peak_jitter: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self::new(5, 400, 16, 4, 1.0)
    }
}

impl GeneratorConfig {
    /// Default curves and the default shift for the given shape:
    /// gain 1.15, offset `0.1·A`, a 2-step delay and noise `0.05·A`.
    pub fn new(classes: usize, samples_per_class: usize, steps: usize, bands: usize, amplitude: f64) -> Self {
        Self {
            classes,
            samples_per_class,
            steps,
            bands,
            amplitude,
            curves: default_curves(classes, steps, bands, amplitude),
            shift: DomainShift {
                gain: 1.15,
                offset: vec![0.1 * amplitude; bands],
                shift: 2,
            },
            noise: 0.05 * amplitude,
            amplitude_jitter: 0.1,
            peak_jitter: 0.5,
            seed: 0,
        }
    }

    /// Recomputes the curves after a shape change.
    pub fn reset_curves(&mut self) {
        self.curves = default_curves(self.classes, self.steps, self.bands, self.amplitude);
        self.shift.offset.resize(self.bands, 0.1 * self.amplitude);
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.classes < 2 {
            return bad(format!("generator.classes must be at least 2, got {}", self.classes));
        }
        if self.samples_per_class == 0 || self.steps == 0 || self.bands == 0 {
            return bad("generator.samples_per_class, steps and bands must be positive".into());
        }
        if self.classes > i16::MAX as usize {
            return bad("generator.classes does not fit the file format".into());
        }
        if self.noise < 0.0 || !self.noise.is_finite() {
            return bad(format!("generator.noise must be a finite value >= 0, got {}", self.noise));
        }
        if !(self.amplitude_jitter >= 0.0 && self.peak_jitter >= 0.0) {
            return bad("generator jitter must be >= 0".into());
        }
        if self.shift.shift.unsigned_abs() as usize >= self.steps {
            return bad(format!(
                "generator.shift ({}) must be smaller than steps ({}) in magnitude",
                self.shift.shift, self.steps
            ));
        }
        if self.shift.offset.len() != self.bands {
            return bad(format!("generator.offset needs {} values", self.bands));
        }
        if self.curves.len() != self.classes {
            return bad(format!("{} class curves for {} classes", self.curves.len(), self.classes));
        }
        for (c, curve) in self.curves.iter().enumerate() {
            if curve.amplitude.len() != self.bands || curve.baseline.len() != self.bands {
                return bad(format!("class {c} curve needs {} values per band field", self.bands));
            }
            if curve.width <= 0.0 || !curve.width.is_finite() {
                return bad(format!("class {c} width must be positive"));
            }
        }
        Ok(())
    }
}

/// Classes differ in peak time, width and per-band baseline; every class
/// shares the same band amplitude pattern. Peaks sit in the first two thirds
/// of the season, spaced `t/8` apart for five classes, so a delayed target
/// curve stays inside the series.
pub fn default_curves(classes: usize, steps: usize, bands: usize, amplitude: f64) -> Vec<ClassCurve> {
    let t = steps as f64;
    let k = classes.max(2) as f64;
    let band_amplitude: Vec<f64> = (0..bands).map(|j| amplitude * (0.8 - 0.2 * (j % 3) as f64)).collect();
    (0..classes)
        .map(|c| ClassCurve {
            peak: t * (0.15 + 0.5 * c as f64 / (k - 1.0)),
            width: t / 8.0 * if c % 2 == 0 { 1.0 } else { 1.5 },
            amplitude: band_amplitude.clone(),
            baseline: (0..bands)
                .map(|j| amplitude * 0.1 * ((c * (j + 1)) % 3) as f64)
                .collect(),
        })
        .collect()
}

/// Clean value of `curve` at (real) time `tau` for band `band`.
pub fn curve_value(curve: &ClassCurve, band: usize, tau: f64, amp_scale: f64, peak_offset: f64) -> f64 {
    let d = tau - (curve.peak + peak_offset);
    curve.baseline[band] + amp_scale * curve.amplitude[band] * (-(d * d) / (2.0 * curve.width * curve.width)).exp()
}

const JITTER_STREAM: u64 = 2;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Source (domain 0) and target (domain 1) datasets, both labeled. Sample
/// ids run `0..k·n` class-major in each domain. The per-sample jitter is
/// shared, so sample `i` of the target is sample `i` of the source seen
/// through the shift, with its own noise.
pub fn generate(config: &GeneratorConfig) -> Result<(Dataset, Dataset)> {
    config.validate()?;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut jitter_rng = stream(config.seed, JITTER_STREAM);
    let mut jitter = Vec::with_capacity(config.classes * config.samples_per_class);
    for _ in 0..config.classes * config.samples_per_class {
        let amp_scale = 1.0 + config.amplitude_jitter * normal.sample(&mut jitter_rng);
        let peak_offset = config.peak_jitter * normal.sample(&mut jitter_rng);
        jitter.push((amp_scale, peak_offset));
    }
    let build = |domain: u32, shift: &DomainShift| {
        let mut rng = stream(config.seed, domain as u64);
        let mut data = Dataset::new(config.steps, config.bands, config.classes, domain);
        for (c, curve) in config.curves.iter().enumerate() {
            for i in 0..config.samples_per_class {
                let id = c * config.samples_per_class + i;
                let (amp_scale, peak_offset) = jitter[id];
                let mut values = Vec::with_capacity(config.steps * config.bands);
                for tau in 0..config.steps {
                    let at = tau as f64 - shift.shift as f64;
                    for j in 0..config.bands {
                        let clean = shift.gain * curve_value(curve, j, at, amp_scale, peak_offset) + shift.offset[j];
                        let z: f64 = normal.sample(&mut rng);
                        values.push((clean + config.noise * z) as f32);
                    }
                }
                data.samples.push(SequenceSample {
                    id: id as u64,
                    domain,
                    class: Some(c),
                    values,
                });
            }
        }
        data
    };
    let source = build(SOURCE_DOMAIN_ID, &DomainShift::none(config.bands));
    let target = build(TARGET_DOMAIN_ID, &config.shift);
    Ok((source, target))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet() -> GeneratorConfig {
        let mut g = GeneratorConfig::new(4, 6, 12, 3, 1.0);
        g.noise = 0.0;
        g
    }

    #[test]
    fn zero_shift_zero_noise_gives_identical_samples() {
        let mut g = quiet();
        g.shift = DomainShift::none(3);
        let (s, t) = generate(&g).unwrap();
        assert_eq!(s.samples.len(), t.samples.len());
        for (a, b) in s.samples.iter().zip(&t.samples) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.class, b.class);
            assert_eq!(a.values, b.values);
        }
        assert_eq!(s.domain, 0);
        assert_eq!(t.domain, 1);
    }

    #[test]
    fn target_is_gain_shift_offset_of_source_curve() {
        let mut g = quiet();
        g.amplitude_jitter = 0.0;
        g.peak_jitter = 0.0;
        g.shift.offset = vec![0.1, -0.2, 0.3];
        let (s, t) = generate(&g).unwrap();
        let (b, d) = (g.bands, g.shift.shift as usize);
        for (ss, ts) in s.samples.iter().zip(&t.samples) {
            let curve = &g.curves[ss.class.unwrap()];
            for tau in 0..g.steps {
                for j in 0..b {
                    let want = g.shift.gain * curve_value(curve, j, tau as f64 - d as f64, 1.0, 0.0) + g.shift.offset[j];
                    assert_eq!(ts.values[tau * b + j], want as f32);
                    if tau >= d {
                        let src = ss.values[(tau - d) * b + j] as f64;
                        let rel = (ts.values[tau * b + j] as f64 - (g.shift.gain * src + g.shift.offset[j])).abs();
                        assert!(rel < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn deterministic_in_config_and_seed() {
        let g = GeneratorConfig::new(3, 5, 8, 2, 1.0);
        assert_eq!(generate(&g).unwrap(), generate(&g).unwrap());
        let mut h = g.clone();
        h.seed = 1;
        assert_ne!(generate(&g).unwrap().0, generate(&h).unwrap().0);
    }

    #[test]
    fn default_classes_are_distinct() {
        let g = GeneratorConfig::default();
        let width = g.steps * g.bands;
        let clean = |c: usize| -> Vec<f64> {
            (0..width)
                .map(|k| curve_value(&g.curves[c], k % g.bands, (k / g.bands) as f64, 1.0, 0.0))
                .collect()
        };
        for a in 0..g.classes {
            for b in a + 1..g.classes {
                let dist = clean(a)
                    .iter()
                    .zip(clean(b))
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0, f64::max);
                assert!(dist > 0.0, "classes {a} and {b} coincide");
            }
        }
    }

    #[test]
    fn default_shift_opens_a_raw_gap() {
        use crate::analysis::{mmd_squared, KernelConfig};
        let raw = |d: &Dataset| {
            let rows: Vec<f64> = d.samples.iter().flat_map(|s| s.values.iter().map(|&v| v as f64)).collect();
            crate::analysis::FeatureSet::new(
                crate::autodiff::Tensor::new([d.len(), d.steps * d.bands], rows).unwrap(),
                d.domain,
                None,
            )
            .unwrap()
        };
        let mut g = GeneratorConfig::new(5, 60, 16, 4, 1.0);
        let (s, t) = generate(&g).unwrap();
        let (s, t) = (raw(&s), raw(&t));
        let sigma = KernelConfig::default().sigma(&s, &t).unwrap();
        let shifted = mmd_squared(&s, &t, sigma).unwrap();
        g.shift = DomainShift::none(g.bands);
        let (s0, t0) = generate(&g).unwrap();
        let flat = mmd_squared(&raw(&s0), &raw(&t0), sigma).unwrap();
        assert!(shifted > 10.0 * flat.abs(), "{shifted} vs {flat}");
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut g = quiet();
        g.noise = -1.0;
        assert!(generate(&g).is_err());
        let mut g = quiet();
        g.shift.shift = 12;
        assert!(generate(&g).is_err());
        let mut g = quiet();
        g.shift.shift = -11;
        assert!(generate(&g).is_ok());
        let mut g = quiet();
        g.classes = 1;
        assert!(generate(&g).is_err());
    }
}
