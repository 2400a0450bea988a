//! Label predictor, domain discriminator and the adversarial loss.
//!
//! Both heads are `norm → linear(hidden) → ReLU → linear(k)`. In training
//! the domain head sees the pooled token through a gradient reversal layer.
//! Source samples carry domain label 0 and target samples domain label 1.

use rand::Rng;

use crate::autodiff::{self, linear_var, Graph, Tensor, Var};
use crate::data::SequenceBatch;
use crate::encoder::{self, fan_in_uniform, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::params::{param_group, ParamTree};

pub const SOURCE_DOMAIN: usize = 0;
pub const TARGET_DOMAIN: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadConfig {
    pub hidden: usize,
    pub classes: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            classes: 9,
        }
    }
}

impl HeadConfig {
    /// The discriminator: same hidden width, two outputs.
    pub fn domain(&self) -> Self {
        Self {
            hidden: self.hidden,
            classes: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::Config("head.hidden must be at least 1".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!(
                "head.classes must be at least 2, got {}",
                self.classes
            )));
        }
        Ok(())
    }
}

param_group! {
    pub struct HeadParams { norm_gain, norm_bias, hidden, hidden_bias, out, out_bias }
}

impl HeadParams {
    pub fn init(d_model: usize, config: &HeadConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            norm_gain: Tensor::from_fn([d_model], |_| 1.0),
            norm_bias: Tensor::zeros([d_model]),
            hidden: fan_in_uniform(rng, d_model, config.hidden),
            hidden_bias: Tensor::zeros([config.hidden]),
            out: fan_in_uniform(rng, config.hidden, config.classes),
            out_bias: Tensor::zeros([config.classes]),
        })
    }

    pub fn classes(&self) -> usize {
        self.out_bias.len()
    }
}

/// `θ_f`, `θ_y` and, for adversarial models, `θ_d`.
#[derive(Clone, Debug, PartialEq)]
pub struct DannParams {
    pub encoder: EncoderParams,
    pub label: HeadParams,
    /// `None` for a plain classifier.
    pub domain: Option<HeadParams>,
}

impl DannParams {
    /// Visits every tensor with the checkpoint block names.
    pub fn visit_blocks<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.encoder.visit_named("encoder/", f);
        self.label.visit_named("label/", f);
        if let Some(d) = &self.domain {
            d.visit_named("domain/", f);
        }
    }

    pub fn visit_blocks_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.encoder.visit_named_mut("encoder/", f);
        self.label.visit_named_mut("label/", f);
        if let Some(d) = &mut self.domain {
            d.visit_named_mut("domain/", f);
        }
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count()
            + self.label.param_count()
            + self.domain.as_ref().map_or(0, |d| d.param_count())
    }
}

/// Current adversarial weight and the schedule that produced it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LambdaState {
    pub lambda_max: f64,
    pub gamma: f64,
    pub current: f64,
}

impl Default for LambdaState {
    fn default() -> Self {
        Self {
            lambda_max: 0.2,
            gamma: 10.0,
            current: 0.0,
        }
    }
}

impl LambdaState {
    /// Moves to training progress `p`; `current` never decreases.
    pub fn advance(&mut self, progress: f64) -> Result<f64> {
        let next = crate::optim::lambda_at(progress, self.lambda_max, self.gamma)?;
        self.current = self.current.max(next);
        Ok(self.current)
    }
}

// ----- tensor-level pieces ---------------------------------------------

/// Forward pass of the reversal layer: the identity.
pub fn grl_forward(x: &Tensor) -> Tensor {
    x.clone()
}

/// Backward pass of the reversal layer: exact negation.
pub fn grl_backward(upstream: &Tensor) -> Tensor {
    let mut out = upstream.clone();
    out.data_mut().iter_mut().for_each(|v| *v = -*v);
    out
}

/// Logits of a head applied to tokens `[n, d_model]`.
pub fn head_logits(g: &mut Graph, head: &HeadParams<Var>, tokens: Var) -> Result<Var> {
    let x = g.layer_norm(tokens, head.norm_gain, head.norm_bias)?;
    let h = linear_var(g, x, head.hidden, head.hidden_bias)?;
    let h = g.relu(h);
    linear_var(g, h, head.out, head.out_bias)
}

fn head_probabilities(token: &Tensor, head: &HeadParams) -> Result<Tensor> {
    if !token.is_finite() {
        return Err(Error::NonFinite("token".into()));
    }
    let d = head.norm_gain.len();
    if token.len() != d {
        return Err(Error::shape("head input", token.shape(), &[d]));
    }
    let x = token.clone().reshape([1, d])?;
    let x = autodiff::layer_norm(&x, &head.norm_gain, &head.norm_bias)?;
    let h = autodiff::relu(&autodiff::linear(&x, &head.hidden, &head.hidden_bias)?);
    let logits = autodiff::linear(&h, &head.out, &head.out_bias)?;
    autodiff::softmax_rows(&logits).reshape([head.classes()])
}

/// Class probabilities for one pooled token.
pub fn predict_label(token: &Tensor, head: &HeadParams) -> Result<Tensor> {
    head_probabilities(token, head)
}

/// `[P(source), P(target)]` for one pooled token.
pub fn predict_domain(token: &Tensor, head: &HeadParams) -> Result<Tensor> {
    if head.classes() != 2 {
        return Err(Error::Invalid(format!(
            "domain head has {} outputs, expected 2",
            head.classes()
        )));
    }
    head_probabilities(token, head)
}

/// Pooled tokens and label probabilities for a batch, without gradients.
pub fn infer(
    config: &EncoderConfig,
    params: &DannParams,
    batch: &SequenceBatch,
) -> Result<(Tensor, Tensor)> {
    check_batch(config, batch, "batch")?;
    let mut g = Graph::new();
    let enc = params.encoder.map(&mut |t| g.constant(t.clone()));
    let head = params.label.map(&mut |t| g.constant(t.clone()));
    let x = g.constant(batch.values.clone());
    let tokens = encoder::features(&mut g, config, &enc, x)?;
    let logits = head_logits(&mut g, &head, tokens)?;
    let probs = g.softmax_rows(logits);
    Ok((g.value(tokens).clone(), g.value(probs).clone()))
}

fn check_batch(config: &EncoderConfig, batch: &SequenceBatch, what: &'static str) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Invalid(format!("{what} is empty")));
    }
    if batch.steps != config.steps || batch.bands != config.bands {
        return Err(Error::shape(
            what,
            &[batch.steps, batch.bands],
            &[config.steps, config.bands],
        ));
    }
    Ok(())
}

fn source_labels(batch: &SequenceBatch, classes: usize) -> Result<&[usize]> {
    let labels = batch
        .labels
        .as_deref()
        .ok_or_else(|| Error::Invalid("source batch has unlabeled samples".into()))?;
    if let Some(&c) = labels.iter().find(|&&c| c >= classes) {
        return Err(Error::ClassIndex { index: c, classes });
    }
    Ok(labels)
}

// ----- losses ----------------------------------------------------------

/// Loss components of one adversarial step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DannLoss {
    /// `L_y − λ·(L_d,src + L_d,tgt)`.
    pub total: f64,
    pub label: f64,
    pub domain_source: f64,
    pub domain_target: f64,
}

impl DannLoss {
    /// The bracketed domain term.
    pub fn domain(&self) -> f64 {
        self.domain_source + self.domain_target
    }
}

/// Gradients per parameter partition, each in `ParamTree` order.
#[derive(Clone, Debug)]
pub struct DannGradients {
    /// `∂L_y/∂θ_f`.
    pub feature_label: Vec<Tensor>,
    /// Domain-path gradient of `θ_f` after the reversal layer, i.e.
    /// `−∂(L_d,src + L_d,tgt)/∂θ_f`, not yet scaled by `λ`.
    pub feature_domain: Vec<Tensor>,
    /// `∂L_y/∂θ_y`.
    pub label: Vec<Tensor>,
    /// `∂(L_d,src + L_d,tgt)/∂θ_d`; descending it trains the discriminator.
    pub domain: Vec<Tensor>,
    pub lambda: f64,
}

impl DannGradients {
    /// `∂L_y/∂θ_f + λ·(reversed domain gradient)`: the derivative of the
    /// total loss with respect to `θ_f`.
    pub fn feature_total(&self) -> Vec<Tensor> {
        self.feature_label
            .iter()
            .zip(&self.feature_domain)
            .map(|(a, b)| {
                let mut t = a.clone();
                t.data_mut()
                    .iter_mut()
                    .zip(b.data())
                    .for_each(|(x, y)| *x += self.lambda * y);
                t
            })
            .collect()
    }
}

/// Source cross-entropy and its gradients for `θ_f` and `θ_y`.
pub fn label_loss(
    config: &EncoderConfig,
    encoder_params: &EncoderParams,
    label: &HeadParams,
    src: &SequenceBatch,
) -> Result<(f64, Vec<Tensor>, Vec<Tensor>)> {
    check_batch(config, src, "source batch")?;
    let labels = source_labels(src, label.classes())?;
    let mut g = Graph::new();
    let enc = encoder_params.bind(&mut g);
    let head = label.bind(&mut g);
    let x = g.constant(src.values.clone());
    let tokens = encoder::features(&mut g, config, &enc, x)?;
    let logits = head_logits(&mut g, &head, tokens)?;
    let loss = g.cross_entropy(logits, labels)?;
    g.backward(loss)?;
    Ok((
        g.value(loss).data()[0],
        EncoderParams::grads(&g, &enc),
        HeadParams::grads(&g, &head),
    ))
}

/// Adversarial loss and per-partition gradients for one source/target
/// batch pair. Class labels on the target batch are ignored.
pub fn total_loss(
    config: &EncoderConfig,
    params: &DannParams,
    src: &SequenceBatch,
    tgt: &SequenceBatch,
    lambda: f64,
) -> Result<(DannLoss, DannGradients)> {
    total_loss_in(&mut Graph::new(), config, params, src, tgt, lambda)
}

/// [`total_loss`] recorded on a caller-supplied (empty) graph, which stays
/// inspectable afterwards.
pub fn total_loss_in(
    g: &mut Graph,
    config: &EncoderConfig,
    params: &DannParams,
    src: &SequenceBatch,
    tgt: &SequenceBatch,
    lambda: f64,
) -> Result<(DannLoss, DannGradients)> {
    let domain = params
        .domain
        .as_ref()
        .ok_or_else(|| Error::Invalid("model has no domain head".into()))?;
    check_batch(config, src, "source batch")?;
    check_batch(config, tgt, "target batch")?;
    let labels = source_labels(src, params.label.classes())?;

    let enc = params.encoder.bind(g);
    let label_head = params.label.bind(g);
    let domain_head = domain.bind(g);

    let xs = g.constant(src.values.clone());
    let xt = g.constant(tgt.values.clone());
    let fs = encoder::features(g, config, &enc, xs)?;
    let ft = encoder::features(g, config, &enc, xt)?;

    let ly_logits = head_logits(g, &label_head, fs)?;
    let ly = g.cross_entropy(ly_logits, labels)?;

    let rs = g.grad_reverse(fs);
    let rt = g.grad_reverse(ft);
    let ds = head_logits(g, &domain_head, rs)?;
    let dt = head_logits(g, &domain_head, rt)?;
    let lds = g.cross_entropy(ds, &vec![SOURCE_DOMAIN; src.len()])?;
    let ldt = g.cross_entropy(dt, &vec![TARGET_DOMAIN; tgt.len()])?;
    let ld = g.add(lds, ldt)?;

    g.backward(ly)?;
    let feature_label = EncoderParams::grads(g, &enc);
    let label_grads = HeadParams::grads(g, &label_head);
    g.zero_grad();
    g.backward(ld)?;
    let feature_domain = EncoderParams::grads(g, &enc);
    let domain_grads = HeadParams::grads(g, &domain_head);

    let scalar = |v: Var| g.value(v).data()[0];
    let loss = DannLoss {
        total: scalar(ly) - lambda * scalar(ld),
        label: scalar(ly),
        domain_source: scalar(lds),
        domain_target: scalar(ldt),
    };
    Ok((
        loss,
        DannGradients {
            feature_label,
            feature_domain,
            label: label_grads,
            domain: domain_grads,
            lambda,
        },
    ))
}
