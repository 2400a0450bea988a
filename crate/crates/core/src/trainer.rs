//! Training loops for the plain classifier and the adversarial model,
//! evaluation, and the per-epoch run log.
//!
//! Every random choice comes from its own ChaCha stream keyed by the run
//! seed, a purpose and (for shuffles) the epoch, so the batch order is a
//! pure function of the seed and encoder/label-head initialization is the
//! same in both modes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::analysis::FeatureSet;
use crate::autodiff::Tensor;
use crate::checkpoint::{self, Model};
use crate::dann::{self, DannParams, HeadConfig, HeadParams};
use crate::data::{Dataset, Normalizer};
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::metrics::{ConfusionMatrix, MetricsRecord};
use crate::optim::{AdamConfig, AdamState, FeatureAdam, Schedules};

/// Inference batch size; results do not depend on it.
pub const EVAL_BATCH: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Baseline,
    Dann,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Dann => "dann",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    /// Also holds the epoch count.
    pub schedules: Schedules,
    pub adam: AdamConfig,
    pub mode: Mode,
    pub source: Option<PathBuf>,
    pub target: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    /// Stop after this many epochs of the schedule (for resumable runs).
    pub stop_after: Option<usize>,
    /// Checkpoint to continue from.
    pub resume: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            seed: 0,
            encoder: EncoderConfig::default(),
            head: HeadConfig::default(),
            schedules: Schedules::default(),
            adam: AdamConfig::default(),
            mode: Mode::Dann,
            source: None,
            target: None,
            out_dir: None,
            stop_after: None,
            resume: None,
        }
    }
}

impl TrainConfig {
    pub fn epochs(&self) -> usize {
        self.schedules.epochs
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if self.mode == Mode::Dann && self.schedules.epochs == 0 {
            return Err(Error::Config("train.epochs must be at least 1 for dann".into()));
        }
        self.encoder.validate()?;
        self.head.validate()
    }
}

/// One completed epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lambda: f64,
    pub lr: f64,
    /// Mean source cross-entropy over the epoch's steps.
    pub loss_y: f64,
    /// Mean domain term over the epoch's steps; 0 for the plain classifier.
    pub loss_d: f64,
    /// Accuracy on the whole source training set after the epoch.
    pub acc_train: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub records: Vec<EpochRecord>,
}

impl RunLog {
    pub const HEADER: &'static str = "epoch,lambda,lr,loss_y,loss_d,acc_train";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.epoch, r.lambda, r.lr, r.loss_y, r.loss_d, r.acc_train
            );
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |reason: String| Error::Format { kind: "run log", reason };
        let mut lines = text.lines();
        if lines.next() != Some(Self::HEADER) {
            return Err(bad("missing header".into()));
        }
        let mut records = Vec::new();
        for (i, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad(format!("row {} has {} fields", i + 1, f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("row {}: bad number {s:?}", i + 1)));
            records.push(EpochRecord {
                epoch: f[0].parse().map_err(|_| bad(format!("row {}: bad epoch", i + 1)))?,
                lambda: num(f[1])?,
                lr: num(f[2])?,
                loss_y: num(f[3])?,
                loss_d: num(f[4])?,
                acc_train: num(f[5])?,
            });
        }
        Ok(Self { records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Final model, its log and the optimizer state needed to resume.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: RunLog,
    pub optim: Vec<(String, Tensor)>,
}

// ----- random streams ---------------------------------------------------

const STREAM_ENCODER: u64 = 1;
const STREAM_LABEL: u64 = 2;
const STREAM_DOMAIN: u64 = 3;
const STREAM_SHUFFLE_SOURCE: u64 = 4;
const STREAM_SHUFFLE_TARGET: u64 = 5;

fn stream(seed: u64, purpose: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose << 32 | epoch as u64);
    rng
}

fn permutation(n: usize, seed: u64, purpose: u64, epoch: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut stream(seed, purpose, epoch));
    p
}

/// Initial parameters; the domain head is drawn only for adversarial runs
/// and from its own stream, so `θ_f` and `θ_y` match across modes.
pub fn init_params(config: &TrainConfig) -> Result<DannParams> {
    let enc = EncoderParams::init(&config.encoder, &mut stream(config.seed, STREAM_ENCODER, 0))?;
    let label = HeadParams::init(
        config.encoder.d_model,
        &config.head,
        &mut stream(config.seed, STREAM_LABEL, 0),
    )?;
    let domain = match config.mode {
        Mode::Baseline => None,
        Mode::Dann => Some(HeadParams::init(
            config.encoder.d_model,
            &config.head.domain(),
            &mut stream(config.seed, STREAM_DOMAIN, 0),
        )?),
    };
    Ok(DannParams {
        encoder: enc,
        label,
        domain,
    })
}

// ----- optimizer bundle -------------------------------------------------

struct Optimizers {
    feature: FeatureAdam,
    feature_plain: AdamState,
    label: AdamState,
    domain: Option<AdamState>,
}

impl Optimizers {
    fn new(params: &DannParams, adam: AdamConfig) -> Self {
        Self {
            feature: FeatureAdam::new(&params.encoder, adam),
            feature_plain: AdamState::new(&params.encoder, adam),
            label: AdamState::new(&params.label, adam),
            domain: params.domain.as_ref().map(|d| AdamState::new(d, adam)),
        }
    }

    fn export(&self, params: &DannParams, mode: Mode) -> Vec<(String, Tensor)> {
        let mut out = match mode {
            Mode::Dann => self.feature.export("optim/encoder.", &params.encoder),
            Mode::Baseline => self.feature_plain.export("optim/encoder.", &params.encoder),
        };
        out.extend(self.label.export("optim/label.", &params.label));
        if let (Some(st), Some(d)) = (&self.domain, &params.domain) {
            out.extend(st.export("optim/domain.", d));
        }
        out
    }

    fn import(
        params: &DannParams,
        mode: Mode,
        adam: AdamConfig,
        blocks: &std::collections::HashMap<String, Tensor>,
    ) -> Result<Self> {
        let mut opt = Self::new(params, adam);
        match mode {
            Mode::Dann => opt.feature = FeatureAdam::import("optim/encoder.", &params.encoder, adam, blocks)?,
            Mode::Baseline => {
                opt.feature_plain = AdamState::import("optim/encoder.", &params.encoder, adam, blocks)?
            }
        }
        opt.label = AdamState::import("optim/label.", &params.label, adam, blocks)?;
        if let Some(d) = &params.domain {
            opt.domain = Some(AdamState::import("optim/domain.", d, adam, blocks)?);
        }
        Ok(opt)
    }
}

// ----- evaluation ---------------------------------------------------------

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Predicted classes and pooled tokens for `indices`, in batches.
fn predict(model: &Model, data: &Dataset, indices: &[usize]) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut preds = Vec::with_capacity(indices.len());
    let mut tokens = Vec::with_capacity(indices.len() * model.encoder.d_model);
    for chunk in indices.chunks(EVAL_BATCH) {
        let batch = data.batch(chunk, &model.normalizer);
        let (tok, probs) = dann::infer(&model.encoder, &model.params, &batch)?;
        for r in 0..probs.rows() {
            preds.push(argmax(probs.row(r)));
        }
        tokens.extend_from_slice(tok.data());
    }
    Ok((preds, tokens))
}

fn check_compatible(model: &Model, data: &Dataset) -> Result<()> {
    if data.steps != model.encoder.steps || data.bands != model.encoder.bands {
        return Err(Error::shape(
            "dataset",
            &[data.steps, data.bands],
            &[model.encoder.steps, model.encoder.bands],
        ));
    }
    if data.classes > model.head.classes {
        return Err(Error::Invalid(format!(
            "dataset has {} classes, model predicts {}",
            data.classes, model.head.classes
        )));
    }
    Ok(())
}

/// Accuracy of `model` on every labeled sample of `data`.
pub fn accuracy_on(model: &Model, data: &Dataset) -> Result<f64> {
    let (cm, _) = confusion(model, data)?;
    crate::metrics::accuracy(&cm)
}

fn confusion(model: &Model, data: &Dataset) -> Result<(ConfusionMatrix, Vec<f64>)> {
    check_compatible(model, data)?;
    let labeled: Vec<usize> = (0..data.len()).filter(|&i| data.samples[i].class.is_some()).collect();
    if labeled.len() != data.len() {
        return Err(Error::Invalid(format!(
            "evaluation needs class labels; {} of {} samples are unlabeled",
            data.len() - labeled.len(),
            data.len()
        )));
    }
    let (preds, tokens) = predict(model, data, &labeled)?;
    let truth: Vec<usize> = labeled.iter().map(|&i| data.samples[i].class.expect("labeled")).collect();
    Ok((ConfusionMatrix::from_predictions(model.head.classes, &truth, &preds)?, tokens))
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub confusion: ConfusionMatrix,
    pub metrics: MetricsRecord,
    /// Pooled tokens of a seeded subset of the samples.
    pub features: FeatureSet,
}

/// Runs inference on `data`; `feature_subset` caps the dumped token count
/// (a seeded random subset, kept in dataset order).
pub fn evaluate(model: &Model, data: &Dataset, feature_subset: usize, seed: u64) -> Result<Evaluation> {
    let (cm, tokens) = confusion(model, data)?;
    let metrics = MetricsRecord::from_matrix(&cm)?;
    let d = model.encoder.d_model;
    let n = data.len();
    let take = feature_subset.min(n);
    let mut chosen: Vec<usize> = if take == n {
        (0..n).collect()
    } else {
        sample(&mut ChaCha8Rng::seed_from_u64(seed), n, take).into_vec()
    };
    chosen.sort_unstable();
    let mut rows = Vec::with_capacity(take * d);
    for &i in &chosen {
        rows.extend_from_slice(&tokens[i * d..(i + 1) * d]);
    }
    let labels = chosen.iter().map(|&i| data.samples[i].class).collect::<Option<Vec<_>>>();
    let features = FeatureSet::new(Tensor::new([take, d], rows)?, data.domain, labels)?;
    Ok(Evaluation {
        confusion: cm,
        metrics,
        features,
    })
}

/// Pooled tokens for every sample (labels optional).
pub fn extract_features(model: &Model, data: &Dataset) -> Result<FeatureSet> {
    check_compatible(model, data)?;
    let all: Vec<usize> = (0..data.len()).collect();
    let (_, tokens) = predict(model, data, &all)?;
    let labels = data.samples.iter().map(|s| s.class).collect::<Option<Vec<_>>>();
    FeatureSet::new(Tensor::new([data.len(), model.encoder.d_model], tokens)?, data.domain, labels)
}

// ----- training -----------------------------------------------------------

fn check_data(config: &TrainConfig, source: &Dataset, target: Option<&Dataset>) -> Result<()> {
    source.validate()?;
    if source.is_empty() {
        return Err(Error::Invalid("source dataset is empty".into()));
    }
    if !source.is_labeled() {
        return Err(Error::Invalid("source dataset has unlabeled samples".into()));
    }
    if source.steps != config.encoder.steps || source.bands != config.encoder.bands {
        return Err(Error::Config(format!(
            "source samples are {}×{} but encoder expects {}×{}",
            source.steps, source.bands, config.encoder.steps, config.encoder.bands
        )));
    }
    if source.classes != config.head.classes {
        return Err(Error::Config(format!(
            "source dataset has {} classes but head.classes is {}",
            source.classes, config.head.classes
        )));
    }
    if let Some(t) = target {
        t.validate()?;
        if t.is_empty() {
            return Err(Error::Invalid("target dataset is empty".into()));
        }
        if (t.steps, t.bands) != (source.steps, source.bands) {
            return Err(Error::shape(
                "target dataset",
                &[t.steps, t.bands],
                &[source.steps, source.bands],
            ));
        }
    }
    Ok(())
}

fn write_outputs(out: Option<&Path>, file: &str, model: &Model, extra: &[(String, Tensor)]) -> Result<()> {
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        checkpoint::save(dir.join(file), model, extra)?;
    }
    Ok(())
}

/// Trains in `config.mode`. `target` is required for adversarial runs and
/// ignored otherwise. Writes `model.tdpt` and `runlog.csv` into `out` when
/// given; on a non-finite loss or gradient the model from the end of the
/// previous epoch is written to `last_good.tdpt` and an error is returned.
pub fn train(config: &TrainConfig, source: &Dataset, target: Option<&Dataset>, out: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    let target = match config.mode {
        Mode::Baseline => None,
        Mode::Dann => Some(target.ok_or_else(|| Error::Config("dann mode needs a target dataset".into()))?),
    };
    check_data(config, source, target)?;

    let (mut model, mut opt, mut log, start) = match &config.resume {
        None => {
            let params = init_params(config)?;
            let opt = Optimizers::new(&params, config.adam);
            let model = Model {
                encoder: config.encoder.clone(),
                head: config.head,
                params,
                normalizer: Normalizer::fit(source),
            };
            (model, opt, RunLog::default(), 0)
        }
        Some(path) => {
            let (model, blocks) = checkpoint::load(path)?;
            if model.encoder != config.encoder || model.head != config.head {
                return Err(Error::Config("resume checkpoint does not match the configured model".into()));
            }
            if model.params.domain.is_some() != (config.mode == Mode::Dann) {
                return Err(Error::Config("resume checkpoint was trained in the other mode".into()));
            }
            let opt = Optimizers::import(&model.params, config.mode, config.adam, &blocks)?;
            let epoch = blocks
                .get("train/epoch")
                .and_then(|t| t.data().first().copied())
                .ok_or_else(|| Error::Config("resume checkpoint has no train/epoch block".into()))?
                as usize;
            let log = match out.map(|d| d.join("runlog.csv")).filter(|p| p.exists()) {
                Some(p) => RunLog::load(p)?,
                None => RunLog::default(),
            };
            (model, opt, log, epoch)
        }
    };

    let epochs = config.epochs();
    let end = config.stop_after.map_or(epochs, |s| s.min(epochs));
    let ns = source.len();
    let nt = target.map_or(0, |t| t.len());
    let span = ns.max(nt);
    let steps = span.div_ceil(config.batch_size);

    for epoch in start..end {
        let lambda = match config.mode {
            Mode::Baseline => 0.0,
            Mode::Dann => config.schedules.lambda_at_epoch(epoch)?,
        };
        let lr = config.schedules.lr_at(epoch);
        let perm_s = permutation(ns, config.seed, STREAM_SHUFFLE_SOURCE, epoch);
        let perm_t = permutation(nt, config.seed, STREAM_SHUFFLE_TARGET, epoch);
        let last_good = model.clone();
        let last_opt = opt.export(&model.params, config.mode);

        let fail = |e: Error| -> Result<TrainOutcome> {
            let mut extra = last_opt.clone();
            extra.push(("train/epoch".into(), Tensor::scalar(epoch as f64)));
            write_outputs(out, "last_good.tdpt", &last_good, &extra)?;
            if let Some(dir) = out {
                log.save(dir.join("runlog.csv"))?;
            }
            Err(e)
        };

        let (mut sum_y, mut sum_d) = (0.0, 0.0);
        for step in 0..steps {
            let lo = step * config.batch_size;
            let hi = ((step + 1) * config.batch_size).min(span);
            let src_idx: Vec<usize> = (lo..hi).map(|p| perm_s[p % ns]).collect();
            let src = source.batch(&src_idx, &model.normalizer);
            let result = match target {
                None => step_baseline(config, &mut model, &mut opt, &src, lr),
                Some(t) => {
                    let tgt_idx: Vec<usize> = (lo..hi).map(|p| perm_t[p % nt]).collect();
                    let tgt = t.batch(&tgt_idx, &model.normalizer);
                    step_dann(config, &mut model, &mut opt, &src, &tgt, lambda, lr)
                }
            };
            match result {
                Ok((ly, ld)) if ly.is_finite() && ld.is_finite() => {
                    sum_y += ly;
                    sum_d += ld;
                }
                Ok(_) => return fail(Error::NonFinite(format!("loss at epoch {epoch}, step {step}"))),
                Err(e @ Error::NonFinite(_)) => return fail(e),
                Err(e) => return Err(e),
            }
        }
        let acc_train = accuracy_on(&model, source)?;
        log.records.push(EpochRecord {
            epoch,
            lambda,
            lr,
            loss_y: sum_y / steps as f64,
            loss_d: sum_d / steps as f64,
            acc_train,
        });
    }

    let mut optim = opt.export(&model.params, config.mode);
    optim.push(("train/epoch".into(), Tensor::scalar(end.max(start) as f64)));
    write_outputs(out, "model.tdpt", &model, &optim)?;
    if let Some(dir) = out {
        log.save(dir.join("runlog.csv"))?;
    }
    Ok(TrainOutcome { model, log, optim })
}

fn step_baseline(
    config: &TrainConfig,
    model: &mut Model,
    opt: &mut Optimizers,
    src: &crate::data::SequenceBatch,
    lr: f64,
) -> Result<(f64, f64)> {
    let p = &mut model.params;
    let (loss, gf, gy) = dann::label_loss(&config.encoder, &p.encoder, &p.label, src)?;
    if !loss.is_finite() {
        return Ok((loss, 0.0));
    }
    opt.feature_plain.step("encoder", &mut p.encoder, &gf, lr)?;
    opt.label.step("label", &mut p.label, &gy, lr)?;
    Ok((loss, 0.0))
}

fn step_dann(
    config: &TrainConfig,
    model: &mut Model,
    opt: &mut Optimizers,
    src: &crate::data::SequenceBatch,
    tgt: &crate::data::SequenceBatch,
    lambda: f64,
    lr: f64,
) -> Result<(f64, f64)> {
    let (loss, grads) = dann::total_loss(&config.encoder, &model.params, src, tgt, lambda)?;
    if !loss.total.is_finite() {
        return Ok((loss.label, loss.domain()));
    }
    let p = &mut model.params;
    opt.feature.step(&mut p.encoder, &grads.feature_label, &grads.feature_domain, lambda, lr)?;
    opt.label.step("label", &mut p.label, &grads.label, lr)?;
    let (Some(st), Some(d)) = (opt.domain.as_mut(), p.domain.as_mut()) else {
        return Err(Error::Invalid("adversarial step without a domain head".into()));
    };
    st.step("domain", d, &grads.domain, lr)?;
    Ok((loss.label, loss.domain()))
}

/// Plain classifier on `source` only.
pub fn train_baseline(config: &TrainConfig, source: &Dataset, out: Option<&Path>) -> Result<TrainOutcome> {
    let mut c = config.clone();
    c.mode = Mode::Baseline;
    train(&c, source, None, out)
}

/// Adversarial training on a labeled source and an unlabeled target.
pub fn train_dann(config: &TrainConfig, source: &Dataset, target: &Dataset, out: Option<&Path>) -> Result<TrainOutcome> {
    let mut c = config.clone();
    c.mode = Mode::Dann;
    train(&c, source, Some(target), out)
}
