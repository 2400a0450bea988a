//! Transformer-encoder feature extractor.
//!
//! A `t×b` sample is projected to `t×d_model`, a learnable positional table
//! is added, `n_layers` post-norm encoder layers are applied, and the result
//! is max-pooled over time into a single `d_model` token.
//!
//! Every graph-level function works on a batch laid out as
//! `[batch·t, width]`, timestep-major inside each sample.

use rand::Rng;

use crate::autodiff::{linear_var, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{param_group, ParamTree};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    /// Timesteps per sample.
    pub steps: usize,
    /// Spectral bands per timestep.
    pub bands: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_inner: usize,
    /// Width of an optional first dense stage (`b → hidden → d_model`).
    pub input_hidden: Option<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            steps: 45,
            bands: 10,
            d_model: 128,
            n_layers: 3,
            n_heads: 2,
            d_inner: 128,
            input_hidden: None,
        }
    }
}

impl EncoderConfig {
    /// `n_layers = 0` is accepted and makes the encoder the bare embedding.
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("steps", self.steps),
            ("bands", self.bands),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_inner", self.d_inner),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("encoder.{name} must be at least 1")));
        }
        if self.input_hidden == Some(0) {
            return Err(Error::Config("encoder.input_hidden must be at least 1".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "encoder.d_model ({}) must be divisible by encoder.n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }
}

param_group! {
    /// One post-norm encoder layer.
    pub struct LayerParams {
        w_q, w_k, w_v, w_o,
        ff1, ff1_bias, ff2, ff2_bias,
        norm1_gain, norm1_bias, norm2_gain, norm2_bias,
    }
}

param_group! {
    /// Second stage of the two-stage input projection.
    pub struct HiddenProjection { bias, weight }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<T = Tensor> {
    /// `b×d_model`, or `b×hidden` when `hidden` is present.
    pub input: T,
    pub hidden: Option<HiddenProjection<T>>,
    /// Learnable positional table, `t×d_model`.
    pub positions: T,
    pub layers: Vec<LayerParams<T>>,
}

impl<T> EncoderParams<T> {
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        f(format!("{prefix}input"), &self.input);
        if let Some(h) = &self.hidden {
            h.visit(&format!("{prefix}input_hidden."), f);
        }
        f(format!("{prefix}positions"), &self.positions);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("{prefix}layer{i}."), f);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut T)) {
        f(format!("{prefix}input"), &mut self.input);
        if let Some(h) = &mut self.hidden {
            h.visit_mut(&format!("{prefix}input_hidden."), f);
        }
        f(format!("{prefix}positions"), &mut self.positions);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("{prefix}layer{i}."), f);
        }
    }

    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> EncoderParams<U> {
        EncoderParams {
            input: f(&self.input),
            hidden: self.hidden.as_ref().map(|h| h.map(f)),
            positions: f(&self.positions),
            layers: self.layers.iter().map(|l| l.map(f)).collect(),
        }
    }
}

impl ParamTree for EncoderParams {
    type Bound = EncoderParams<Var>;

    fn visit_named<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.visit(prefix, &mut |n, t| f(n, t));
    }

    fn visit_named_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.visit_mut(prefix, &mut |n, t| f(n, t));
    }

    fn bind(&self, g: &mut Graph) -> Self::Bound {
        self.map(&mut |t| g.param(t.clone()))
    }

    fn bound_vars(bound: &Self::Bound) -> Vec<Var> {
        let mut out = Vec::new();
        bound.visit("", &mut |_, v| out.push(*v));
        out
    }
}

/// `U(−√(1/fan_in), √(1/fan_in))` over a `fan_in×fan_out` matrix.
pub(crate) fn fan_in_uniform(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (1.0 / fan_in as f64).sqrt();
    Tensor::from_fn([fan_in, fan_out], |_| rng.random_range(-a..=a))
}

impl EncoderParams {
    /// Fan-in uniform weights, zero biases, unit norm gains and a zero
    /// positional table.
    pub fn init(config: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let (input, hidden) = match config.input_hidden {
            None => (fan_in_uniform(rng, config.bands, d), None),
            Some(h) => {
                let input = fan_in_uniform(rng, config.bands, h);
                let weight = fan_in_uniform(rng, h, d);
                (
                    input,
                    Some(HiddenProjection {
                        bias: Tensor::zeros([h]),
                        weight,
                    }),
                )
            }
        };
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                w_q: fan_in_uniform(rng, d, d),
                w_k: fan_in_uniform(rng, d, d),
                w_v: fan_in_uniform(rng, d, d),
                w_o: fan_in_uniform(rng, d, d),
                ff1: fan_in_uniform(rng, d, config.d_inner),
                ff1_bias: Tensor::zeros([config.d_inner]),
                ff2: fan_in_uniform(rng, config.d_inner, d),
                ff2_bias: Tensor::zeros([d]),
                norm1_gain: Tensor::from_fn([d], |_| 1.0),
                norm1_bias: Tensor::zeros([d]),
                norm2_gain: Tensor::from_fn([d], |_| 1.0),
                norm2_bias: Tensor::zeros([d]),
            })
            .collect();
        Ok(Self {
            input,
            hidden,
            positions: Tensor::zeros([config.steps, d]),
            layers,
        })
    }

    /// Zero-filled parameters with the shapes `config` implies.
    pub fn zeros(config: &EncoderConfig) -> Result<Self> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut p = Self::init(config, &mut rng)?;
        p.visit_mut("", &mut |_, t| t.data_mut().fill(0.0));
        Ok(p)
    }
}

// ----- graph-level forward ---------------------------------------------

/// `x·W_in + P` for a batch `x` of shape `[batch·t, b]`.
pub fn embed(g: &mut Graph, config: &EncoderConfig, p: &EncoderParams<Var>, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 2 || shape[1] != config.bands || !shape[0].is_multiple_of(config.steps) {
        return Err(Error::shape("embed", &shape, &[config.steps, config.bands]));
    }
    let mut h = g.matmul(x, p.input)?;
    if let Some(hidden) = &p.hidden {
        let biased = g.add_tiled(h, hidden.bias)?;
        let act = g.relu(biased);
        h = g.matmul(act, hidden.weight)?;
    }
    g.add_tiled(h, p.positions)
}

/// `Softmax(Q·Kᵀ/√d)·V` over batched `[n, t, d]` inputs.
pub fn attention(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<Var> {
    let (sq, sk, sv) = (g.shape(q).to_vec(), g.shape(k).to_vec(), g.shape(v).to_vec());
    if sq.len() != 3 || sq != sk || sq != sv {
        return Err(Error::shape("attention", &sq, &sk));
    }
    let scores = g.batch_matmul(q, k, true)?;
    let scaled = g.scale(scores, 1.0 / (sq[2] as f64).sqrt());
    let weights = g.softmax_rows(scaled);
    g.batch_matmul(weights, v, false)
}

/// Multi-head self-attention on `[batch·t, d_model]`.
pub fn multi_head(
    g: &mut Graph,
    config: &EncoderConfig,
    layer: &LayerParams<Var>,
    x: Var,
    batch: usize,
) -> Result<Var> {
    let (t, h) = (config.steps, config.n_heads);
    let q = g.matmul(x, layer.w_q)?;
    let k = g.matmul(x, layer.w_k)?;
    let v = g.matmul(x, layer.w_v)?;
    let q = g.split_heads(q, batch, t, h)?;
    let k = g.split_heads(k, batch, t, h)?;
    let v = g.split_heads(v, batch, t, h)?;
    let heads = attention(g, q, k, v)?;
    let merged = g.merge_heads(heads, batch, t, h)?;
    g.matmul(merged, layer.w_o)
}

/// Attention and feed-forward sublayers, each followed by residual add and
/// layer normalization.
pub fn encoder_layer(
    g: &mut Graph,
    config: &EncoderConfig,
    layer: &LayerParams<Var>,
    x: Var,
    batch: usize,
) -> Result<Var> {
    let att = multi_head(g, config, layer, x, batch)?;
    let res = g.add(x, att)?;
    let x1 = g.layer_norm(res, layer.norm1_gain, layer.norm1_bias)?;
    let inner = linear_var(g, x1, layer.ff1, layer.ff1_bias)?;
    let inner = g.relu(inner);
    let ff = linear_var(g, inner, layer.ff2, layer.ff2_bias)?;
    let res = g.add(x1, ff)?;
    g.layer_norm(res, layer.norm2_gain, layer.norm2_bias)
}

/// Embedding followed by every encoder layer: `X^L`, `[batch·t, d_model]`.
pub fn encode(g: &mut Graph, config: &EncoderConfig, p: &EncoderParams<Var>, x: Var) -> Result<Var> {
    let mut h = embed(g, config, p, x)?;
    let batch = g.shape(x)[0] / config.steps;
    for layer in &p.layers {
        h = encoder_layer(g, config, layer, h, batch)?;
    }
    Ok(h)
}

/// Temporal max-pooling to one token per sample: `[batch, d_model]`.
pub fn pool(g: &mut Graph, config: &EncoderConfig, encoded: Var) -> Result<Var> {
    g.max_over_time(encoded, config.steps)
}

/// `encode` then `pool`.
pub fn features(g: &mut Graph, config: &EncoderConfig, p: &EncoderParams<Var>, x: Var) -> Result<Var> {
    let h = encode(g, config, p, x)?;
    pool(g, config, h)
}

// ----- single-sample conveniences --------------------------------------

fn check_sample(config: &EncoderConfig, sample: &Tensor) -> Result<()> {
    if sample.shape() != [config.steps, config.bands] {
        return Err(Error::shape(
            "sample",
            sample.shape(),
            &[config.steps, config.bands],
        ));
    }
    if !sample.is_finite() {
        return Err(Error::NonFinite("input sample".into()));
    }
    Ok(())
}

fn run_sample(
    config: &EncoderConfig,
    params: &EncoderParams,
    sample: &Tensor,
    f: impl FnOnce(&mut Graph, &EncoderParams<Var>, Var) -> Result<Var>,
) -> Result<Tensor> {
    check_sample(config, sample)?;
    let mut g = Graph::new();
    let p = params.map(&mut |t| g.constant(t.clone()));
    let x = g.constant(sample.clone());
    let y = f(&mut g, &p, x)?;
    Ok(g.value(y).clone())
}

/// `X^{l₀}` for one `t×b` sample.
pub fn embed_sample(config: &EncoderConfig, params: &EncoderParams, sample: &Tensor) -> Result<Tensor> {
    run_sample(config, params, sample, |g, p, x| embed(g, config, p, x))
}

/// `X^L` for one `t×b` sample.
pub fn encode_sample(config: &EncoderConfig, params: &EncoderParams, sample: &Tensor) -> Result<Tensor> {
    run_sample(config, params, sample, |g, p, x| encode(g, config, p, x))
}

/// Pooled token `x^L` for one `t×b` sample.
pub fn features_sample(config: &EncoderConfig, params: &EncoderParams, sample: &Tensor) -> Result<Tensor> {
    let t = run_sample(config, params, sample, |g, p, x| features(g, config, p, x))?;
    t.reshape([config.d_model])
}

/// Single-head attention on plain `t×d` matrices.
pub fn attention_matrices(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let mut lift = |t: &Tensor| -> Result<Var> {
        let shape = [1, t.shape()[0], t.last_dim()];
        Ok(g.constant(t.clone().reshape(shape)?))
    };
    let (q, k, v) = (lift(q)?, lift(k)?, lift(v)?);
    let out = attention(&mut g, q, k, v)?;
    let s = g.shape(out).to_vec();
    g.value(out).clone().reshape([s[1], s[2]])
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::{grad_check, grad_check_with, DEFAULT_STEP};

    fn small() -> EncoderConfig {
        EncoderConfig {
            steps: 4,
            bands: 2,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_inner: 16,
            input_hidden: None,
        }
    }

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_fn([r, c], |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::default().validate().is_ok());
        let mut c = small();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        c = small();
        c.bands = 0;
        assert!(c.validate().is_err());
        assert_eq!(EncoderConfig::default().d_head(), 64);
    }

    #[test]
    fn parameter_count_is_a_function_of_config() {
        let c = small();
        let a = EncoderParams::init(&c, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = EncoderParams::init(&c, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a.shapes(), b.shapes());
        let per_layer = 4 * 64 + 8 * 16 + 16 + 16 * 8 + 8 + 4 * 8;
        assert_eq!(a.param_count(), 2 * 8 + 4 * 8 + 2 * per_layer);
    }

    #[test]
    fn embed_identity_projection_pads_input() {
        let c = EncoderConfig { n_layers: 0, ..small() };
        let mut p = EncoderParams::zeros(&c).unwrap();
        for i in 0..c.bands {
            p.input.data_mut()[i * c.d_model + i] = 1.0;
        }
        let x = Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0], &[7.0, 8.0]]);
        let y = embed_sample(&c, &p, &x).unwrap();
        for s in 0..4 {
            assert_eq!(&y.row(s)[..2], x.row(s));
            assert!(y.row(s)[2..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn zero_input_embeds_to_positional_table() {
        let c = small();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = EncoderParams::init(&c, &mut rng).unwrap();
        p.positions = rand_matrix(&mut rng, 4, 8);
        let y = embed_sample(&c, &p, &Tensor::zeros([4, 2])).unwrap();
        assert_eq!(y, p.positions);
    }

    #[test]
    fn embed_matches_naive_loops() {
        let c = small();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = EncoderParams::init(&c, &mut rng).unwrap();
        p.positions = rand_matrix(&mut rng, 4, 8);
        let x = rand_matrix(&mut rng, 4, 2);
        let y = embed_sample(&c, &p, &x).unwrap();
        for s in 0..4 {
            for j in 0..8 {
                let mut acc = 0.0;
                for b in 0..2 {
                    acc += x.at(s, b) * p.input.at(b, j);
                }
                acc += p.positions.at(s, j);
                assert!((y.at(s, j) - acc).abs() < 1e-14);
            }
        }
        assert!(embed_sample(&c, &p, &Tensor::zeros([3, 2])).is_err());
        let mut bad = x.clone();
        bad.data_mut()[0] = f64::NAN;
        assert!(embed_sample(&c, &p, &bad).is_err());
    }

    #[test]
    fn two_stage_projection_shapes() {
        let c = EncoderConfig {
            input_hidden: Some(6),
            ..small()
        };
        let p = EncoderParams::init(&c, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(p.input.shape(), &[2, 6]);
        assert_eq!(p.hidden.as_ref().unwrap().weight.shape(), &[6, 8]);
        let y = encode_sample(&c, &p, &Tensor::from_fn([4, 2], |i| i as f64 * 0.1)).unwrap();
        assert_eq!(y.shape(), &[4, 8]);
    }

    #[test]
    fn attention_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let v = rand_matrix(&mut rng, 3, 2);
        let k = rand_matrix(&mut rng, 3, 2);
        let out = attention_matrices(&Tensor::zeros([3, 2]), &k, &v).unwrap();
        for j in 0..2 {
            let mean = (v.at(0, j) + v.at(1, j) + v.at(2, j)) / 3.0;
            for r in 0..3 {
                assert!((out.at(r, j) - mean).abs() < 1e-15);
            }
        }

        let q1 = rand_matrix(&mut rng, 1, 3);
        let v1 = rand_matrix(&mut rng, 1, 3);
        assert_eq!(attention_matrices(&q1, &q1, &v1).unwrap(), v1);

        let q = Tensor::matrix(&[&[1.0], &[0.0]]);
        let v = Tensor::matrix(&[&[1.0], &[2.0]]);
        let out = attention_matrices(&q, &q, &v).unwrap();
        let e = std::f64::consts::E;
        let expect = (e * 1.0 + 2.0) / (e + 1.0);
        assert!((out.at(0, 0) - expect).abs() < 1e-15);
        assert!((out.at(0, 0) - 1.2689).abs() < 1e-4);
    }

    #[test]
    fn attention_weights_are_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut g = Graph::new();
        let q = g.constant(rand_matrix(&mut rng, 5, 4).reshape([1, 5, 4]).unwrap());
        let k = g.constant(rand_matrix(&mut rng, 5, 4).reshape([1, 5, 4]).unwrap());
        let s = g.batch_matmul(q, k, true).unwrap();
        let w = g.softmax_rows(s);
        for r in g.value(w).data().chunks(5) {
            assert!(r.iter().all(|&x| x >= 0.0));
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn single_head_equals_attention_of_projections() {
        let c = EncoderConfig {
            n_heads: 1,
            ..small()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = EncoderParams::init(&c, &mut rng).unwrap();
        let x = rand_matrix(&mut rng, 4, 8);
        let mut g = Graph::new();
        let lp = p.layers[0].map(&mut |t| g.constant(t.clone()));
        let xv = g.constant(x);
        let mh = multi_head(&mut g, &c, &lp, xv, 1).unwrap();
        let q = g.matmul(xv, lp.w_q).unwrap();
        let k = g.matmul(xv, lp.w_k).unwrap();
        let v = g.matmul(xv, lp.w_v).unwrap();
        let [q, k, v] = [q, k, v].map(|t| g.reshape(t, &[1, 4, 8]).unwrap());
        let a = attention(&mut g, q, k, v).unwrap();
        let a = g.reshape(a, &[4, 8]).unwrap();
        let direct = g.matmul(a, lp.w_o).unwrap();
        assert_eq!(g.value(mh), g.value(direct));
    }

    #[test]
    fn multi_head_output_shape() {
        for heads in [1, 2, 4, 8] {
            let c = EncoderConfig { n_heads: heads, ..small() };
            let p = EncoderParams::init(&c, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
            let mut g = Graph::new();
            let lp = p.layers[0].map(&mut |t| g.constant(t.clone()));
            let x = g.constant(Tensor::from_fn([3 * 4, 8], |i| (i as f64).sin()));
            let y = multi_head(&mut g, &c, &lp, x, 3).unwrap();
            assert_eq!(g.shape(y), &[12, 8]);
        }
    }

    #[test]
    fn encoder_layer_gradient_matches_finite_differences() {
        let c = small();
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(20 + seed);
            let p = EncoderParams::init(&c, &mut rng).unwrap();
            let x = rand_matrix(&mut rng, 8, 8);
            let w = rand_matrix(&mut rng, 8, 8);
            let f = |g: &mut Graph, x: Var| {
                let lp = p.layers[0].map(&mut |t| g.constant(t.clone()));
                let y = encoder_layer(g, &c, &lp, x, 2)?;
                let wv = g.constant(w.clone());
                let prod = g.mul(y, wv)?;
                Ok(g.sum(prod))
            };
            let mut probe = Graph::new();
            let xv = probe.constant(x.clone());
            f(&mut probe, xv).unwrap();
            if probe.kink_margin() < 1e-4 {
                continue;
            }
            let r = grad_check(f, &x, DEFAULT_STEP).unwrap();
            assert!(r.max_rel_error < 1e-4, "seed {seed}: {}", r.max_rel_error);
        }
    }

    #[test]
    fn multi_head_block_gradient_matches_finite_differences() {
        let c = small();
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let p = EncoderParams::init(&c, &mut rng).unwrap();
        let x = rand_matrix(&mut rng, 8, 8);
        let w = rand_matrix(&mut rng, 8, 8);
        let f = |g: &mut Graph, x: Var| {
            let lp = p.layers[0].map(&mut |t| g.constant(t.clone()));
            let y = multi_head(g, &c, &lp, x, 2)?;
            let wv = g.constant(w.clone());
            let prod = g.mul(y, wv)?;
            Ok(g.sum(prod))
        };
        let r = grad_check(f, &x, DEFAULT_STEP).unwrap();
        assert!(r.max_rel_error < 1e-4, "{}", r.max_rel_error);
        let bad = grad_check_with(f, &x, DEFAULT_STEP, |g| {
            g.inject_fault(crate::autodiff::OpKind::SoftmaxRows, 0.0)
        })
        .unwrap();
        assert!(bad.max_rel_error > 1e-2);
    }

    #[test]
    fn zero_layer_encoder_is_the_embedding() {
        let c = EncoderConfig { n_layers: 0, ..small() };
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let p = EncoderParams::init(&c, &mut rng).unwrap();
        let x = rand_matrix(&mut rng, 4, 2);
        assert_eq!(encode_sample(&c, &p, &x).unwrap(), embed_sample(&c, &p, &x).unwrap());
    }

    #[test]
    fn encode_is_finite_over_many_random_trials() {
        let c = small();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let mut p = EncoderParams::init(&c, &mut rng).unwrap();
            p.positions = rand_matrix(&mut rng, 4, 8);
            let x = Tensor::from_fn([4, 2], |_| rng.random_range(-10.0..10.0));
            let y = encode_sample(&c, &p, &x).unwrap();
            assert!(y.is_finite());
        }
    }

    #[test]
    fn positional_table_breaks_permutation_invariance() {
        let c = small();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut p = EncoderParams::init(&c, &mut rng).unwrap();
        let x = rand_matrix(&mut rng, 4, 2);
        let reverse = |t: &Tensor| {
            let d = t.last_dim();
            let mut out = t.clone();
            for s in 0..4 {
                out.data_mut()[s * d..(s + 1) * d].copy_from_slice(t.row(3 - s));
            }
            out
        };
        // Without positions the encoder is permutation-equivariant.
        let a = encode_sample(&c, &p, &x).unwrap();
        let b = encode_sample(&c, &p, &reverse(&x)).unwrap();
        assert!(a.max_abs_diff(&reverse(&b)) < 1e-12);

        p.positions = rand_matrix(&mut rng, 4, 8);
        let a = encode_sample(&c, &p, &x).unwrap();
        let b = encode_sample(&c, &p, &reverse(&x)).unwrap();
        let diff = Tensor::from_fn([32], |i| a.data()[i] - reverse(&b).data()[i]);
        assert!(diff.norm() > 1e-6);
    }

    #[test]
    fn pool_matches_naive_loop() {
        let c = small();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let p = EncoderParams::init(&c, &mut rng).unwrap();
        let x = rand_matrix(&mut rng, 4, 2);
        let enc = encode_sample(&c, &p, &x).unwrap();
        let token = features_sample(&c, &p, &x).unwrap();
        for j in 0..8 {
            let mut m = f64::NEG_INFINITY;
            for s in 0..4 {
                m = m.max(enc.at(s, j));
            }
            assert_eq!(token.data()[j], m);
        }

        let one = EncoderConfig { steps: 1, ..c.clone() };
        let mut g = Graph::new();
        let row = Tensor::from_fn([1, 8], |i| i as f64);
        let xv = g.constant(row.clone());
        let pooled = pool(&mut g, &one, xv).unwrap();
        assert_eq!(g.value(pooled).data(), row.data());

        let mut g = Graph::new();
        let flat = Tensor::from_fn([4, 8], |i| (i % 8) as f64);
        let xv = g.constant(flat);
        let pooled = pool(&mut g, &c, xv).unwrap();
        assert_eq!(g.value(pooled).data(), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn encode_is_deterministic() {
        let c = small();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let p = EncoderParams::init(&c, &mut rng).unwrap();
        let x = rand_matrix(&mut rng, 4, 2);
        assert_eq!(encode_sample(&c, &p, &x).unwrap(), encode_sample(&c, &p, &x).unwrap());
    }
}
