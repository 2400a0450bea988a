//! Finite-difference self-check of every differentiable op and of the full
//! adversarial model, as run by `tdann gradcheck` and the acceptance suite.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{compare_gradient, grad_check_with, linear_var, GradCheck, Graph, OpKind, Tensor, Var, DEFAULT_STEP};
use crate::dann::{self, DannParams, HeadConfig, HeadParams};
use crate::data::SequenceBatch;
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::params::ParamTree;

pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub seeds: u64,
    pub tolerance: f64,
    pub step: f64,
    /// Scales the backward pass of one op family; for testing the checker.
    pub fault: Option<(OpKind, f64)>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            seeds: 20,
            tolerance: DEFAULT_TOLERANCE,
            step: DEFAULT_STEP,
            fault: None,
        }
    }
}

/// Worst relative error of one check over all seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckEntry {
    pub name: String,
    pub worst: f64,
    pub worst_seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SuiteReport {
    pub entries: Vec<CheckEntry>,
    pub tolerance: f64,
}

impl SuiteReport {
    fn record(&mut self, name: &str, seed: u64, err: f64) {
        match self.entries.iter_mut().find(|e| e.name == name) {
            Some(e) => {
                // NaN counts as the worst possible error
                if err > e.worst || err.is_nan() {
                    e.worst = err;
                    e.worst_seed = seed;
                }
            }
            None => self.entries.push(CheckEntry {
                name: name.to_string(),
                worst: err,
                worst_seed: seed,
            }),
        }
    }

    pub fn worst(&self) -> f64 {
        self.entries.iter().map(|e| e.worst).fold(0.0, |a, b| if b.is_nan() { b } else { a.max(b) })
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.worst < self.tolerance)
    }

    pub fn report(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let verdict = if e.worst < self.tolerance { "ok" } else { "FAIL" };
            let _ = writeln!(out, "{:<28} worst_rel_err={:.3e} seed={} {verdict}", e.name, e.worst, e.worst_seed);
        }
        let _ = writeln!(
            out,
            "overall worst_rel_err={:.3e} tolerance={:e} {}",
            self.worst(),
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        );
        out
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], margin: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(margin..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// `sum(y ⊙ w)` for fixed random `w`.
fn probe(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = uniform(&mut rng, g.shape(y));
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

type OpCase<'a> = (&'static str, Box<dyn Fn(&mut Graph, Var) -> Result<Var> + 'a>, Tensor);

fn op_cases(seed: u64) -> Vec<OpCase<'static>> {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let x = away_from_zero(&mut rng, &[3, 4], 1e-3);
    let other = uniform(&mut rng, &[3, 4]);
    let w = uniform(&mut rng, &[4, 5]);
    let bias = uniform(&mut rng, &[5]);
    let gain = uniform(&mut rng, &[4]);
    let shift = uniform(&mut rng, &[4]);
    let a3 = uniform(&mut rng, &[2, 3, 4]);
    let b3 = uniform(&mut rng, &[2, 4, 3]);
    let heads = uniform(&mut rng, &[6, 4]);
    let merged = uniform(&mut rng, &[4, 3, 2]);
    let mut ordered: Vec<f64> = (0..12).map(|i| i as f64 * 0.01).collect();
    for i in (1..ordered.len()).rev() {
        ordered.swap(i, rng.random_range(0..=i));
    }
    let pooled = Tensor::new([4, 3], ordered).expect("12 values");
    let targets = [0usize, 3, 1];

    let (w2, b2) = (w.clone(), bias.clone());
    let (x2, w3) = (x.clone(), w.clone());
    let (g1, s1) = (gain.clone(), shift.clone());
    let (x3, s2) = (x.clone(), shift.clone());
    let (x4, g2) = (x.clone(), gain.clone());
    let (o1, o2) = (other.clone(), other.clone());
    let (b3c, a3c, a3d) = (b3.clone(), a3.clone(), a3.clone());
    let mat = uniform(&mut rng, &[4, 2]);
    let lhs = uniform(&mut rng, &[3, 4]);
    vec![
        ("matmul", Box::new(move |g: &mut Graph, a| {
            let b = g.constant(mat.clone());
            let y = g.matmul(a, b)?;
            probe(g, y, seed)
        }), x.clone()),
        ("matmul_rhs", Box::new(move |g: &mut Graph, b| {
            let a = g.constant(lhs.clone());
            let y = g.matmul(a, b)?;
            probe(g, y, seed)
        }), w.clone()),
        ("batch_matmul", Box::new(move |g: &mut Graph, a| {
            let b = g.constant(b3c.clone());
            let y = g.batch_matmul(a, b, false)?;
            probe(g, y, seed)
        }), a3.clone()),
        ("batch_matmul_rhs", Box::new(move |g: &mut Graph, b| {
            let a = g.constant(a3c.clone());
            let y = g.batch_matmul(a, b, false)?;
            probe(g, y, seed)
        }), b3.clone()),
        ("batch_matmul_transposed", Box::new(move |g: &mut Graph, b| {
            let a = g.constant(a3d.clone());
            let y = g.batch_matmul(a, b, true)?;
            probe(g, y, seed)
        }), a3.clone()),
        ("add", Box::new(move |g: &mut Graph, a| {
            let b = g.constant(o1.clone());
            let y = g.add(a, b)?;
            probe(g, y, seed)
        }), x.clone()),
        ("add_tiled", Box::new(move |g: &mut Graph, b| {
            let a = g.constant(o2.clone());
            let y = g.add_tiled(a, b)?;
            probe(g, y, seed)
        }), shift.clone()),
        ("mul", Box::new(move |g: &mut Graph, a| {
            let y = g.mul(a, a)?;
            probe(g, y, seed)
        }), x.clone()),
        ("scale", Box::new(move |g: &mut Graph, a| {
            let y = g.scale(a, -1.7);
            probe(g, y, seed)
        }), x.clone()),
        ("relu", Box::new(move |g: &mut Graph, a| {
            let y = g.relu(a);
            probe(g, y, seed)
        }), x.clone()),
        ("softmax_rows", Box::new(move |g: &mut Graph, a| {
            let y = g.softmax_rows(a);
            probe(g, y, seed)
        }), x.clone()),
        ("layer_norm", Box::new(move |g: &mut Graph, a| {
            let (gn, b) = (g.constant(g1.clone()), g.constant(s1.clone()));
            let y = g.layer_norm(a, gn, b)?;
            probe(g, y, seed)
        }), x.clone()),
        ("layer_norm_gain", Box::new(move |g: &mut Graph, gn| {
            let (a, b) = (g.constant(x3.clone()), g.constant(s2.clone()));
            let y = g.layer_norm(a, gn, b)?;
            probe(g, y, seed)
        }), gain.clone()),
        ("layer_norm_bias", Box::new(move |g: &mut Graph, b| {
            let (a, gn) = (g.constant(x4.clone()), g.constant(g2.clone()));
            let y = g.layer_norm(a, gn, b)?;
            probe(g, y, seed)
        }), shift),
        ("linear", Box::new(move |g: &mut Graph, a| {
            let (wv, bv) = (g.constant(w2.clone()), g.constant(b2.clone()));
            let y = linear_var(g, a, wv, bv)?;
            probe(g, y, seed)
        }), x.clone()),
        ("linear_weight", Box::new(move |g: &mut Graph, wv| {
            let (a, bv) = (g.constant(x2.clone()), g.param(bias.clone()));
            let y = linear_var(g, a, wv, bv)?;
            probe(g, y, seed)
        }), w3),
        ("cross_entropy", Box::new(move |g: &mut Graph, a| g.cross_entropy(a, &targets)), x.clone()),
        ("max_over_time", Box::new(move |g: &mut Graph, a| {
            let y = g.max_over_time(a, 4)?;
            probe(g, y, seed)
        }), pooled),
        ("split_heads", Box::new(move |g: &mut Graph, a| {
            let y = g.split_heads(a, 2, 3, 2)?;
            probe(g, y, seed)
        }), heads),
        ("merge_heads", Box::new(move |g: &mut Graph, a| {
            let y = g.merge_heads(a, 2, 3, 2)?;
            probe(g, y, seed)
        }), merged),
        ("grad_reverse", Box::new(move |g: &mut Graph, a| {
            let y = g.grad_reverse(a);
            probe(g, y, seed)
        }), x.clone()),
        ("reshape", Box::new(move |g: &mut Graph, a| {
            let y = g.reshape(a, &[4, 3])?;
            probe(g, y, seed)
        }), x.clone()),
        ("sum", Box::new(move |g: &mut Graph, a| {
            let y = g.mul(a, a)?;
            Ok(g.sum(y))
        }), x),
    ]
}

/// The reversal op's backward is checked against the negated derivative
/// of the same function without it; everything else against plain finite
/// differences.
fn check_op(name: &str, f: &dyn Fn(&mut Graph, Var) -> Result<Var>, at: &Tensor, opts: &SuiteOptions) -> Result<GradCheck> {
    let prepare = |g: &mut Graph| {
        if let Some((kind, factor)) = opts.fault {
            g.inject_fault(kind, factor);
        }
    };
    if name != "grad_reverse" {
        return grad_check_with(f, at, opts.step, prepare);
    }
    let mut g = Graph::new();
    prepare(&mut g);
    let x = g.param(at.clone());
    let out = f(&mut g, x)?;
    g.backward(out)?;
    let mut flipped = g.grad(x);
    flipped.data_mut().iter_mut().for_each(|v| *v = -*v);
    compare_gradient(
        &flipped,
        |p| {
            let mut g = Graph::new();
            let x = g.constant(p.clone());
            let out = f(&mut g, x)?;
            Ok(g.value(out).data()[0])
        },
        at,
        opts.step,
    )
}

/// Model used for the whole-pipeline check.
pub fn small_model_config() -> (EncoderConfig, HeadConfig) {
    (
        EncoderConfig {
            steps: 4,
            bands: 2,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_inner: 16,
            input_hidden: None,
        },
        HeadConfig { hidden: 8, classes: 3 },
    )
}

struct Point {
    params: DannParams,
    src: SequenceBatch,
    tgt: SequenceBatch,
    lambda: f64,
}

fn model_point(seed: u64, attempt: u64, config: &EncoderConfig, head: &HeadConfig) -> Result<Point> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(attempt);
    let mut encoder = EncoderParams::init(config, &mut rng)?;
    // random positions so the table takes part in the check
    encoder
        .positions
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = rng.random_range(-0.5..0.5));
    let mut jitter = |h: &mut HeadParams| {
        h.visit_mut("", &mut |_, t| t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1)));
    };
    let mut label = HeadParams::init(config.d_model, head, &mut ChaCha8Rng::seed_from_u64(seed ^ attempt << 8))?;
    let mut domain = HeadParams::init(config.d_model, &head.domain(), &mut ChaCha8Rng::seed_from_u64(!seed ^ attempt))?;
    jitter(&mut label);
    jitter(&mut domain);
    let mut batch = |n: usize, labels: bool| SequenceBatch {
        steps: config.steps,
        bands: config.bands,
        values: uniform(&mut rng, &[n * config.steps, config.bands]),
        labels: labels.then(|| (0..n).map(|i| i % head.classes).collect()),
        domain: 0,
    };
    let src = batch(3, true);
    let tgt = batch(3, false);
    Ok(Point {
        params: DannParams {
            encoder,
            label,
            domain: Some(domain),
        },
        src,
        tgt,
        lambda: rng.random_range(0.05..1.0),
    })
}

/// Checks `θ_f` and `θ_y` against the total loss and `θ_d` against the
/// domain term, at a point whose ReLU inputs and pooled maxima sit at least
/// `10·step` from a kink (resampled otherwise).
fn check_model(seed: u64, opts: &SuiteOptions, report: &mut SuiteReport) -> Result<()> {
    let (config, head) = small_model_config();
    let mut attempt = 0;
    let (point, grads) = loop {
        let point = model_point(seed, attempt, &config, &head)?;
        let mut g = Graph::new();
        if let Some((kind, factor)) = opts.fault {
            g.inject_fault(kind, factor);
        }
        let (_, grads) = dann::total_loss_in(&mut g, &config, &point.params, &point.src, &point.tgt, point.lambda)?;
        if g.kink_margin() > 10.0 * opts.step {
            break (point, grads);
        }
        attempt += 1;
        if attempt > 100 {
            return Err(Error::Invalid("no kink-free point found for the model check".into()));
        }
    };
    let flat = |ts: &[Tensor]| Tensor::vector(&ts.iter().flat_map(|t| t.data().to_vec()).collect::<Vec<_>>());
    let Point { params, src, tgt, lambda } = point;
    let loss_at = |p: &DannParams| dann::total_loss(&config, p, &src, &tgt, lambda).map(|r| r.0);

    let r = compare_gradient(
        &flat(&grads.feature_total()),
        |x| {
            let mut q = params.clone();
            q.encoder.unflatten(x.data());
            Ok(loss_at(&q)?.total)
        },
        &Tensor::vector(&params.encoder.flatten()),
        opts.step,
    )?;
    report.record("model/feature_extractor", seed, r.max_rel_error);

    let r = compare_gradient(
        &flat(&grads.label),
        |x| {
            let mut q = params.clone();
            q.label.unflatten(x.data());
            Ok(loss_at(&q)?.total)
        },
        &Tensor::vector(&params.label.flatten()),
        opts.step,
    )?;
    report.record("model/label_head", seed, r.max_rel_error);

    let domain = params.domain.clone().expect("domain head");
    let r = compare_gradient(
        &flat(&grads.domain),
        |x| {
            let mut q = params.clone();
            q.domain.as_mut().expect("domain head").unflatten(x.data());
            Ok(loss_at(&q)?.domain())
        },
        &Tensor::vector(&domain.flatten()),
        opts.step,
    )?;
    report.record("model/domain_head", seed, r.max_rel_error);
    Ok(())
}

/// Runs every op check and the whole-model check for seeds `0..opts.seeds`.
pub fn run_suite(opts: &SuiteOptions) -> Result<SuiteReport> {
    let mut report = SuiteReport {
        entries: Vec::new(),
        tolerance: opts.tolerance,
    };
    for seed in 0..opts.seeds {
        for (name, f, at) in op_cases(seed) {
            let r = check_op(name, f.as_ref(), &at, opts)?;
            report.record(&format!("op/{name}"), seed, r.max_rel_error);
        }
        check_model(seed, opts, &mut report)?;
    }
    Ok(report)
}

/// Parses a fault spec such as `relu:0.5`.
pub fn parse_fault(spec: &str) -> Result<(OpKind, f64)> {
    let (name, factor) = spec.split_once(':').unwrap_or((spec, "0.5"));
    let kind = match name {
        "matmul" => OpKind::MatMul,
        "batch_matmul" => OpKind::BatchMatMul,
        "add" => OpKind::Add,
        "add_tiled" => OpKind::AddTiled,
        "mul" => OpKind::Mul,
        "scale" => OpKind::Scale,
        "relu" => OpKind::Relu,
        "softmax_rows" => OpKind::SoftmaxRows,
        "layer_norm" => OpKind::LayerNorm,
        "cross_entropy" => OpKind::CrossEntropy,
        "max_over_time" => OpKind::MaxOverTime,
        "split_heads" => OpKind::SplitHeads,
        "merge_heads" => OpKind::MergeHeads,
        "grad_reverse" => OpKind::GradReverse,
        "sum" => OpKind::Sum,
        "reshape" => OpKind::Reshape,
        other => return Err(Error::Config(format!("unknown op {other:?} in fault spec"))),
    };
    let factor = factor
        .parse()
        .map_err(|_| Error::Config(format!("bad fault factor {factor:?}")))?;
    Ok((kind, factor))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_seed_passes() {
        let r = run_suite(&SuiteOptions {
            seeds: 1,
            ..SuiteOptions::default()
        })
        .unwrap();
        assert!(r.passed(), "{}", r.report());
        assert!(r.entries.iter().any(|e| e.name == "op/relu"));
        assert!(r.entries.iter().any(|e| e.name == "model/domain_head"));
    }

    #[test]
    fn corrupted_backward_fails() {
        let r = run_suite(&SuiteOptions {
            seeds: 1,
            fault: Some((OpKind::SoftmaxRows, 0.9)),
            ..SuiteOptions::default()
        })
        .unwrap();
        assert!(!r.passed());
        let bad: Vec<_> = r.entries.iter().filter(|e| e.worst >= r.tolerance).map(|e| e.name.as_str()).collect();
        assert!(bad.contains(&"op/softmax_rows"), "{bad:?}");
        assert!(bad.contains(&"model/feature_extractor"), "{bad:?}");
    }

    #[test]
    fn fault_specs() {
        assert_eq!(parse_fault("relu:0.25").unwrap(), (OpKind::Relu, 0.25));
        assert_eq!(parse_fault("sum").unwrap(), (OpKind::Sum, 0.5));
        assert!(parse_fault("nope:1").is_err());
    }
}
