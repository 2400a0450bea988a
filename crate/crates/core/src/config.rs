//! Flat `section.key=value` run configuration.
//!
//! Files hold one assignment per line; `#` starts a comment. Overrides are
//! applied after the file, in order. [`RunConfig::to_text`] writes every
//! key, and parsing that text gives back the same configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::analysis::{Bandwidth, KernelConfig};
use crate::data::GeneratorConfig;
use crate::error::{Error, Result};
use crate::trainer::{Mode, TrainConfig};

/// The λ_max values compared by `train --sweep`.
pub const DEFAULT_SWEEP: [f64; 3] = [1.0, 0.5, 0.2];

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    /// Pooled tokens dumped per evaluation, capped at the dataset size.
    pub features: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            features: 10_000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub generator: GeneratorConfig,
    pub train: TrainConfig,
    pub sweep: Vec<f64>,
    pub kernel: KernelConfig,
    pub eval: EvalConfig,
    pub project_dims: usize,
    pub gradcheck_seeds: u64,
    pub gradcheck_tolerance: f64,
    /// Keys given explicitly (file or override), as opposed to defaults.
    pub explicit: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig::default(),
            train: TrainConfig::default(),
            sweep: DEFAULT_SWEEP.to_vec(),
            kernel: KernelConfig::default(),
            eval: EvalConfig::default(),
            project_dims: 2,
            gradcheck_seeds: 20,
            gradcheck_tolerance: crate::diagnostics::DEFAULT_TOLERANCE,
            explicit: Vec::new(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value.split(',').map(|v| parse(key, v)).collect()
}

fn fmt_list(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn path_value(value: &str) -> Option<PathBuf> {
    let v = value.trim();
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn path_text(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or(String::new(), |p| p.display().to_string())
}

/// Splits `key=value`, trimming both sides.
pub fn split_assignment(line: &str) -> Result<(String, String)> {
    let (k, v) = line
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("expected key=value, got {line:?}")))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(Error::Config(format!("empty key in {line:?}")));
    }
    Ok((k.to_string(), v.trim().to_string()))
}

/// Generator keys that change the shape, and with it every derived default.
const GENERATOR_SHAPE: [&str; 5] = [
    "generator.classes",
    "generator.samples_per_class",
    "generator.steps",
    "generator.bands",
    "generator.amplitude",
];

impl RunConfig {
    /// Every recognised key, in snapshot order.
    pub fn keys() -> Vec<&'static str> {
        let mut keys = GENERATOR_SHAPE.to_vec();
        keys.extend([
            "generator.noise",
            "generator.gain",
            "generator.offset",
            "generator.shift",
            "generator.amplitude_jitter",
            "generator.peak_jitter",
            "generator.seed",
            "encoder.steps",
            "encoder.bands",
            "encoder.d_model",
            "encoder.n_layers",
            "encoder.n_heads",
            "encoder.d_inner",
            "encoder.input_hidden",
            "head.hidden",
            "head.classes",
            "train.mode",
            "train.batch_size",
            "train.epochs",
            "train.seed",
            "train.lr",
            "train.lr_decay",
            "train.lambda_max",
            "train.gamma",
            "train.lambda_sweep",
            "train.source",
            "train.target",
            "adam.beta1",
            "adam.beta2",
            "adam.eps",
            "kernel.bandwidth",
            "kernel.seed",
            "eval.features",
            "eval.seed",
            "project.dims",
            "gradcheck.seeds",
            "gradcheck.tolerance",
        ]);
        keys
    }

    /// Defaults, then `assignments` in order (later ones win).
    pub fn from_assignments(assignments: &[(String, String)]) -> Result<Self> {
        let known = Self::keys();
        let mut values: BTreeMap<&str, &str> = BTreeMap::new();
        let mut explicit = Vec::new();
        for (k, v) in assignments {
            let key = known
                .iter()
                .find(|&&x| x == k)
                .ok_or_else(|| Error::Config(format!("unknown config key {k:?}")))?;
            values.insert(key, v);
            if !explicit.contains(k) {
                explicit.push(k.clone());
            }
        }

        let mut c = RunConfig::default();
        let shape = |key: &str, default: usize| -> Result<usize> {
            values.get(key).map_or(Ok(default), |v| parse(key, v))
        };
        let d = GeneratorConfig::default();
        let amplitude = values
            .get("generator.amplitude")
            .map_or(Ok(d.amplitude), |v| parse("generator.amplitude", v))?;
        c.generator = GeneratorConfig::new(
            shape("generator.classes", d.classes)?,
            shape("generator.samples_per_class", d.samples_per_class)?,
            shape("generator.steps", d.steps)?,
            shape("generator.bands", d.bands)?,
            amplitude,
        );
        for (key, value) in &values {
            if !GENERATOR_SHAPE.contains(key) {
                c.set(key, value)?;
            }
        }
        c.explicit = explicit;
        Ok(c)
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let g = &mut self.generator;
        let t = &mut self.train;
        match key {
            "generator.noise" => g.noise = parse(key, v)?,
            "generator.gain" => g.shift.gain = parse(key, v)?,
            "generator.offset" => {
                let list = parse_list(key, v)?;
                g.shift.offset = match list.len() {
                    1 => vec![list[0]; g.bands],
                    _ => list,
                };
            }
            "generator.shift" => g.shift.shift = parse(key, v)?,
            "generator.amplitude_jitter" => g.amplitude_jitter = parse(key, v)?,
            "generator.peak_jitter" => g.peak_jitter = parse(key, v)?,
            "generator.seed" => g.seed = parse(key, v)?,
            "encoder.steps" => t.encoder.steps = parse(key, v)?,
            "encoder.bands" => t.encoder.bands = parse(key, v)?,
            "encoder.d_model" => t.encoder.d_model = parse(key, v)?,
            "encoder.n_layers" => t.encoder.n_layers = parse(key, v)?,
            "encoder.n_heads" => t.encoder.n_heads = parse(key, v)?,
            "encoder.d_inner" => t.encoder.d_inner = parse(key, v)?,
            "encoder.input_hidden" => {
                t.encoder.input_hidden = match v.trim() {
                    "" | "none" | "0" => None,
                    other => Some(parse(key, other)?),
                }
            }
            "head.hidden" => t.head.hidden = parse(key, v)?,
            "head.classes" => t.head.classes = parse(key, v)?,
            "train.mode" => {
                t.mode = match v.trim() {
                    "baseline" => Mode::Baseline,
                    "dann" => Mode::Dann,
                    other => return Err(Error::Config(format!("train.mode must be baseline or dann, got {other:?}"))),
                }
            }
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.epochs" => t.schedules.epochs = parse(key, v)?,
            "train.seed" => t.seed = parse(key, v)?,
            "train.lr" => t.schedules.lr = parse(key, v)?,
            "train.lr_decay" => t.schedules.decay = parse(key, v)?,
            "train.lambda_max" => t.schedules.lambda_max = parse(key, v)?,
            "train.gamma" => t.schedules.gamma = parse(key, v)?,
            "train.lambda_sweep" => self.sweep = parse_list(key, v)?,
            "train.source" => t.source = path_value(v),
            "train.target" => t.target = path_value(v),
            "adam.beta1" => t.adam.beta1 = parse(key, v)?,
            "adam.beta2" => t.adam.beta2 = parse(key, v)?,
            "adam.eps" => t.adam.eps = parse(key, v)?,
            "kernel.bandwidth" => {
                self.kernel.bandwidth = match v.trim() {
                    "median" => Bandwidth::Median,
                    other => Bandwidth::Fixed(parse(key, other)?),
                }
            }
            "kernel.seed" => self.kernel.seed = parse(key, v)?,
            "eval.features" => self.eval.features = parse(key, v)?,
            "eval.seed" => self.eval.seed = parse(key, v)?,
            "project.dims" => self.project_dims = parse(key, v)?,
            "gradcheck.seeds" => self.gradcheck_seeds = parse(key, v)?,
            "gradcheck.tolerance" => self.gradcheck_tolerance = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parses file text followed by `overrides` (each `key=value`).
    pub fn parse_text(text: &str, overrides: &[String]) -> Result<Self> {
        let mut assignments = Vec::new();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if !line.is_empty() {
                assignments.push(split_assignment(line)?);
            }
        }
        for o in overrides {
            assignments.push(split_assignment(o)?);
        }
        Self::from_assignments(&assignments)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::parse_text(&text, overrides)
    }

    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.iter().any(|k| k == key)
    }

    fn value_of(&self, key: &str) -> String {
        let g = &self.generator;
        let t = &self.train;
        match key {
            "generator.classes" => g.classes.to_string(),
            "generator.samples_per_class" => g.samples_per_class.to_string(),
            "generator.steps" => g.steps.to_string(),
            "generator.bands" => g.bands.to_string(),
            "generator.amplitude" => g.amplitude.to_string(),
            "generator.noise" => g.noise.to_string(),
            "generator.gain" => g.shift.gain.to_string(),
            "generator.offset" => fmt_list(&g.shift.offset),
            "generator.shift" => g.shift.shift.to_string(),
            "generator.amplitude_jitter" => g.amplitude_jitter.to_string(),
            "generator.peak_jitter" => g.peak_jitter.to_string(),
            "generator.seed" => g.seed.to_string(),
            "encoder.steps" => t.encoder.steps.to_string(),
            "encoder.bands" => t.encoder.bands.to_string(),
            "encoder.d_model" => t.encoder.d_model.to_string(),
            "encoder.n_layers" => t.encoder.n_layers.to_string(),
            "encoder.n_heads" => t.encoder.n_heads.to_string(),
            "encoder.d_inner" => t.encoder.d_inner.to_string(),
            "encoder.input_hidden" => t.encoder.input_hidden.map_or("none".into(), |h| h.to_string()),
            "head.hidden" => t.head.hidden.to_string(),
            "head.classes" => t.head.classes.to_string(),
            "train.mode" => t.mode.name().to_string(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.epochs" => t.schedules.epochs.to_string(),
            "train.seed" => t.seed.to_string(),
            "train.lr" => t.schedules.lr.to_string(),
            "train.lr_decay" => t.schedules.decay.to_string(),
            "train.lambda_max" => t.schedules.lambda_max.to_string(),
            "train.gamma" => t.schedules.gamma.to_string(),
            "train.lambda_sweep" => fmt_list(&self.sweep),
            "train.source" => path_text(&t.source),
            "train.target" => path_text(&t.target),
            "adam.beta1" => t.adam.beta1.to_string(),
            "adam.beta2" => t.adam.beta2.to_string(),
            "adam.eps" => t.adam.eps.to_string(),
            "kernel.bandwidth" => match self.kernel.bandwidth {
                Bandwidth::Median => "median".into(),
                Bandwidth::Fixed(s) => s.to_string(),
            },
            "kernel.seed" => self.kernel.seed.to_string(),
            "eval.features" => self.eval.features.to_string(),
            "eval.seed" => self.eval.seed.to_string(),
            "project.dims" => self.project_dims.to_string(),
            "gradcheck.seeds" => self.gradcheck_seeds.to_string(),
            "gradcheck.tolerance" => self.gradcheck_tolerance.to_string(),
            other => unreachable!("key list and value_of disagree on {other}"),
        }
    }

    /// Every key with its resolved value.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for key in Self::keys() {
            let s = key.split('.').next().unwrap_or("");
            if s != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                section = s;
            }
            let _ = writeln!(out, "{key}={}", self.value_of(key));
        }
        out
    }

    /// Writes `config.resolved` into `dir`.
    pub fn write_snapshot(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("config.resolved");
        fs::write(&path, self.to_text()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
