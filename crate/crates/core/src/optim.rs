//! Adam with bias correction, the learning-rate decay and the adversarial
//! weight schedule.
//!
//! The feature extractor keeps two moment pairs: one fed by the label-loss
//! gradient and one by the reversed domain gradient. Its step is
//! `θ −= η·(m̂_y/(√v̂_y+ε) + λ·m̂_r/(√v̂_r+ε))`, where `r` is the reversed
//! gradient. Since reversal only flips the sign of `m̂`, this equals the
//! form written with the unreversed domain moments and a minus sign.

use std::collections::HashMap;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::params::ParamTree;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
        }
    }
}

/// Learning-rate and adversarial-weight schedules.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedules {
    pub lr: f64,
    pub decay: f64,
    pub lambda_max: f64,
    pub gamma: f64,
    pub epochs: usize,
}

impl Default for Schedules {
    fn default() -> Self {
        Self {
            lr: 0.001,
            decay: 0.99,
            lambda_max: 0.2,
            gamma: 10.0,
            epochs: 250,
        }
    }
}

impl Schedules {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        lr_at(epoch, self.lr, self.decay)
    }

    /// `λ` for a 0-based epoch, with progress `epoch / epochs`.
    pub fn lambda_at_epoch(&self, epoch: usize) -> Result<f64> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        lambda_at(epoch as f64 / self.epochs as f64, self.lambda_max, self.gamma)
    }
}

/// `λ_max·(2/(1+e^{−γp}) − 1)` for progress `p ∈ [0, 1]`.
pub fn lambda_at(progress: f64, lambda_max: f64, gamma: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&progress) {
        return Err(Error::Invalid(format!("progress {progress} outside [0, 1]")));
    }
    Ok(lambda_max * (2.0 / (1.0 + (-gamma * progress).exp()) - 1.0))
}

/// `η₀·decay^epoch`.
pub fn lr_at(epoch: usize, lr0: f64, decay: f64) -> f64 {
    lr0 * decay.powi(epoch as i32)
}

/// One pair of moment buffers, shaped like the parameters they track.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Moments {
    pub fn zeros(shapes: &[Vec<usize>]) -> Self {
        Self {
            m: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
        }
    }

    /// Folds in `grads` and returns the bias-corrected directions
    /// `m̂/(√v̂+ε)` for step number `t` (1-based).
    fn advance(&mut self, grads: &[Tensor], cfg: &AdamConfig, t: u64) -> Vec<Vec<f64>> {
        let c1 = 1.0 - cfg.beta1.powf(t as f64);
        let c2 = 1.0 - cfg.beta2.powf(t as f64);
        let mut out = Vec::with_capacity(grads.len());
        for ((m, v), g) in self.m.iter_mut().zip(&mut self.v).zip(grads) {
            let dir = m
                .data_mut()
                .iter_mut()
                .zip(v.data_mut())
                .zip(g.data())
                .map(|((m, v), &g)| {
                    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                    (*m / c1) / ((*v / c2).sqrt() + cfg.eps)
                })
                .collect();
            out.push(dir);
        }
        out
    }

    fn export(&self, prefix: &str, names: &[String], out: &mut Vec<(String, Tensor)>) {
        for (i, name) in names.iter().enumerate() {
            out.push((format!("{prefix}m/{name}"), self.m[i].clone()));
            out.push((format!("{prefix}v/{name}"), self.v[i].clone()));
        }
    }

    fn import(
        prefix: &str,
        names: &[String],
        shapes: &[Vec<usize>],
        blocks: &HashMap<String, Tensor>,
    ) -> Result<Self> {
        let fetch = |kind: &str, i: usize| -> Result<Tensor> {
            let key = format!("{prefix}{kind}/{}", names[i]);
            let t = blocks.get(&key).ok_or_else(|| Error::Format {
                kind: "checkpoint",
                reason: format!("missing optimizer block {key}"),
            })?;
            if t.shape() != shapes[i].as_slice() {
                return Err(Error::shape("optimizer block", t.shape(), &shapes[i]));
            }
            Ok(t.clone())
        };
        let mut m = Vec::new();
        let mut v = Vec::new();
        for i in 0..names.len() {
            m.push(fetch("m", i)?);
            v.push(fetch("v", i)?);
        }
        Ok(Self { m, v })
    }
}

fn param_names(params: &impl ParamTree) -> Vec<String> {
    params.named("").into_iter().map(|(n, _)| n).collect()
}

fn check_grads(block: &str, params: &impl ParamTree, grads: &[Tensor]) -> Result<()> {
    let named = params.named("");
    if named.len() != grads.len() {
        return Err(Error::Invalid(format!(
            "{block}: {} gradients for {} parameters",
            grads.len(),
            named.len()
        )));
    }
    for ((name, p), g) in named.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape("gradient", g.shape(), p.shape()));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {block}/{name}")));
        }
    }
    Ok(())
}

fn read_step(key: &str, blocks: &HashMap<String, Tensor>) -> Result<u64> {
    let t = blocks.get(key).ok_or_else(|| Error::Format {
        kind: "checkpoint",
        reason: format!("missing optimizer block {key}"),
    })?;
    Ok(t.data().first().copied().unwrap_or(0.0) as u64)
}

/// Single-moment Adam for one parameter partition.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub moments: Moments,
}

impl AdamState {
    pub fn new(params: &impl ParamTree, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: Moments::zeros(&params.shapes()),
        }
    }

    /// One update. `block` names the partition in error messages; nothing
    /// is modified when a gradient is non-finite.
    pub fn step(&mut self, block: &str, params: &mut impl ParamTree, grads: &[Tensor], lr: f64) -> Result<()> {
        check_grads(block, params, grads)?;
        self.step += 1;
        let dirs = self.moments.advance(grads, &self.config, self.step);
        let mut i = 0;
        params.visit_named_mut("", &mut |_, p| {
            p.data_mut()
                .iter_mut()
                .zip(&dirs[i])
                .for_each(|(p, d)| *p -= lr * d);
            i += 1;
        });
        Ok(())
    }

    pub fn export(&self, prefix: &str, params: &impl ParamTree) -> Vec<(String, Tensor)> {
        let mut out = vec![(format!("{prefix}step"), Tensor::scalar(self.step as f64))];
        self.moments.export(prefix, &param_names(params), &mut out);
        out
    }

    pub fn import(
        prefix: &str,
        params: &impl ParamTree,
        config: AdamConfig,
        blocks: &HashMap<String, Tensor>,
    ) -> Result<Self> {
        Ok(Self {
            config,
            step: read_step(&format!("{prefix}step"), blocks)?,
            moments: Moments::import(prefix, &param_names(params), &params.shapes(), blocks)?,
        })
    }
}

/// Dual-moment Adam for the feature extractor.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureAdam {
    pub config: AdamConfig,
    pub step: u64,
    /// Fed by `∂L_y/∂θ_f`.
    pub label: Moments,
    /// Fed by the reversed domain gradient.
    pub domain: Moments,
}

impl FeatureAdam {
    pub fn new(params: &impl ParamTree, config: AdamConfig) -> Self {
        let shapes = params.shapes();
        Self {
            config,
            step: 0,
            label: Moments::zeros(&shapes),
            domain: Moments::zeros(&shapes),
        }
    }

    /// With `λ = 0` the domain moments are still updated but the parameter
    /// change is exactly the single-moment step on the label gradient.
    pub fn step(
        &mut self,
        params: &mut impl ParamTree,
        label_grads: &[Tensor],
        reversed_domain_grads: &[Tensor],
        lambda: f64,
        lr: f64,
    ) -> Result<()> {
        check_grads("encoder (label path)", params, label_grads)?;
        check_grads("encoder (domain path)", params, reversed_domain_grads)?;
        self.step += 1;
        let dy = self.label.advance(label_grads, &self.config, self.step);
        let dd = self.domain.advance(reversed_domain_grads, &self.config, self.step);
        let mut i = 0;
        params.visit_named_mut("", &mut |_, p| {
            let data = p.data_mut();
            if lambda == 0.0 {
                data.iter_mut().zip(&dy[i]).for_each(|(p, a)| *p -= lr * a);
            } else {
                data.iter_mut()
                    .zip(dy[i].iter().zip(&dd[i]))
                    .for_each(|(p, (a, b))| *p -= lr * (a + lambda * b));
            }
            i += 1;
        });
        Ok(())
    }

    pub fn export(&self, prefix: &str, params: &impl ParamTree) -> Vec<(String, Tensor)> {
        let names = param_names(params);
        let mut out = vec![(format!("{prefix}step"), Tensor::scalar(self.step as f64))];
        self.label.export(&format!("{prefix}label."), &names, &mut out);
        self.domain.export(&format!("{prefix}domain."), &names, &mut out);
        out
    }

    pub fn import(
        prefix: &str,
        params: &impl ParamTree,
        config: AdamConfig,
        blocks: &HashMap<String, Tensor>,
    ) -> Result<Self> {
        let names = param_names(params);
        let shapes = params.shapes();
        Ok(Self {
            config,
            step: read_step(&format!("{prefix}step"), blocks)?,
            label: Moments::import(&format!("{prefix}label."), &names, &shapes, blocks)?,
            domain: Moments::import(&format!("{prefix}domain."), &names, &shapes, blocks)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dann::{HeadConfig, HeadParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn head(seed: u64) -> HeadParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        HeadParams::init(3, &HeadConfig { hidden: 4, classes: 2 }, &mut rng).unwrap()
    }

    fn grads_like(p: &HeadParams, seed: u64) -> Vec<Tensor> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        p.shapes()
            .into_iter()
            .map(|s| Tensor::from_fn(s, |_| rng.random_range(-1.0..1.0)))
            .collect()
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(lambda_at(0.0, 0.2, 10.0).unwrap(), 0.0);
        let mid = lambda_at(0.5, 0.2, 10.0).unwrap();
        assert!((mid - 0.2 * 2.5f64.tanh()).abs() < 1e-15);
        assert!((mid - 0.197320).abs() < 1e-5);
        let end = lambda_at(1.0, 0.2, 10.0).unwrap();
        assert!((end - 0.199982).abs() < 1e-5);
        assert!(0.2 - end < 2e-5);
        assert!(lambda_at(1.01, 0.2, 10.0).is_err());
        assert!(lambda_at(-0.1, 0.2, 10.0).is_err());
        assert!(lambda_at(f64::NAN, 0.2, 10.0).is_err());

        assert_eq!(lr_at(0, 0.001, 0.99), 0.001);
        assert!((lr_at(1, 0.001, 0.99) - 0.00099).abs() < 1e-18);
        assert!((lr_at(250, 0.001, 0.99) - 8.106e-5).abs() < 1e-8);
    }

    #[test]
    fn zero_gradients_leave_parameters() {
        let mut p = head(1);
        let before = p.clone();
        let zeros: Vec<Tensor> = p.shapes().into_iter().map(Tensor::zeros).collect();
        let mut st = AdamState::new(&p, AdamConfig::default());
        for _ in 0..5 {
            st.step("head", &mut p, &zeros, 0.01).unwrap();
        }
        assert_eq!(p, before);
        assert!(st.moments.m.iter().all(|t| t.norm() == 0.0));
        assert_eq!(st.step, 5);
    }

    #[test]
    fn one_step_unit_gradient() {
        let mut p = head(2);
        let before = p.clone();
        let ones: Vec<Tensor> = p.shapes().into_iter().map(|s| Tensor::from_fn(s, |_| 1.0)).collect();
        let mut st = AdamState::new(&p, AdamConfig::default());
        let lr = 0.001;
        st.step("head", &mut p, &ones, lr).unwrap();
        let want = -lr / (1.0 + 1e-7);
        for (a, b) in p.flatten().iter().zip(before.flatten()) {
            assert!(((a - b) - want).abs() < 1e-15);
        }
    }

    #[test]
    fn lambda_zero_feature_step_is_plain_adam() {
        let mut a = head(3);
        let mut b = a.clone();
        let mut single = AdamState::new(&a, AdamConfig::default());
        let mut dual = FeatureAdam::new(&b, AdamConfig::default());
        for s in 0..4 {
            let gy = grads_like(&a, s);
            let gd = grads_like(&a, s + 50);
            single.step("encoder", &mut a, &gy, 0.01).unwrap();
            dual.step(&mut b, &gy, &gd, 0.0, 0.01).unwrap();
        }
        assert_eq!(a, b);
        assert_eq!(single.moments, dual.label);
    }

    #[test]
    fn dual_step_matches_unreversed_form() {
        // θ −= η(a − λ·m̂_d/(√v̂_d+ε)) with moments of the unreversed gradient
        let mut p = head(4);
        let mut q = p.clone();
        let mut dual = FeatureAdam::new(&p, AdamConfig::default());
        let mut y = Moments::zeros(&q.shapes());
        let mut d = Moments::zeros(&q.shapes());
        let cfg = AdamConfig::default();
        let (lambda, lr) = (0.3, 0.01);
        for s in 1..=3u64 {
            let gy = grads_like(&p, s);
            let gd = grads_like(&p, s + 10);
            let rev: Vec<Tensor> = gd.iter().map(crate::dann::grl_backward).collect();
            dual.step(&mut p, &gy, &rev, lambda, lr).unwrap();
            let ay = y.advance(&gy, &cfg, s);
            let ad = d.advance(&gd, &cfg, s);
            let mut i = 0;
            q.visit_named_mut("", &mut |_, t| {
                for (k, v) in t.data_mut().iter_mut().enumerate() {
                    *v -= lr * (ay[i][k] - lambda * ad[i][k]);
                }
                i += 1;
            });
        }
        for (a, b) in p.flatten().iter().zip(q.flatten()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn nan_gradient_names_block_and_changes_nothing() {
        let mut p = head(5);
        let before = p.clone();
        let mut g = grads_like(&p, 1);
        g[2].data_mut()[0] = f64::NAN;
        let mut st = AdamState::new(&p, AdamConfig::default());
        let err = st.step("domain", &mut p, &g, 0.01).unwrap_err().to_string();
        assert!(err.contains("domain/hidden"), "{err}");
        assert_eq!(p, before);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn export_import_round_trip() {
        let mut p = head(6);
        let mut st = FeatureAdam::new(&p, AdamConfig::default());
        let (gy, gd) = (grads_like(&p, 1), grads_like(&p, 2));
        st.step(&mut p, &gy, &gd, 0.2, 0.01).unwrap();
        let blocks: HashMap<String, Tensor> = st.export("optim/feature.", &p).into_iter().collect();
        let back = FeatureAdam::import("optim/feature.", &p, AdamConfig::default(), &blocks).unwrap();
        assert_eq!(back, st);
    }

    proptest::proptest! {
        #[test]
        fn first_step_bounded_by_lr(g in proptest::collection::vec(-100.0f64..100.0, 28), lr in 1e-5f64..0.1) {
            let mut p = head(7);
            let before = p.flatten();
            let mut grads = Vec::new();
            let mut at = 0;
            for s in p.shapes() {
                let n: usize = s.iter().product();
                grads.push(Tensor::from_fn(s, |i| g[(at + i) % g.len()]));
                at += n;
            }
            let mut st = AdamState::new(&p, AdamConfig::default());
            st.step("head", &mut p, &grads, lr).unwrap();
            for (a, b) in p.flatten().iter().zip(before) {
                proptest::prop_assert!((a - b).abs() <= lr * (1.0 + 1e-9));
            }
        }

        #[test]
        fn lambda_schedule_monotone(p1 in 0.0f64..=1.0, p2 in 0.0f64..=1.0, gamma in 0.1f64..50.0) {
            let (lo, hi) = if p1 <= p2 { (p1, p2) } else { (p2, p1) };
            let a = lambda_at(lo, 0.2, gamma).unwrap();
            let b = lambda_at(hi, 0.2, gamma).unwrap();
            proptest::prop_assert!(a <= b && a >= 0.0 && b <= 0.2);
        }

        #[test]
        fn lr_strictly_decreasing(e in 0usize..1000, decay in 0.5f64..0.999) {
            let a = lr_at(e, 0.001, decay);
            let b = lr_at(e + 1, 0.001, decay);
            proptest::prop_assert!(b < a && b > 0.0);
        }
    }
}
