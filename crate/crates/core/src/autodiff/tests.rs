use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero by at least `margin`.
fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], margin: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(margin..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Scalar probe `sum(y ⊙ r)` so that checks do not collapse onto a
/// constant (a plain sum over softmax rows would).
fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, g.shape(y));
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

#[test]
fn matmul_identity_and_hand_case() {
    let m = Tensor::matrix(&[&[0.5, -2.0], &[3.0, 7.25]]);
    assert_eq!(matmul(&Tensor::identity(2), &m).unwrap(), m);
    let a = Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]);
    let b = Tensor::matrix(&[&[1.0], &[1.0]]);
    let c = matmul(&a, &b).unwrap();
    assert_eq!(c.shape(), &[2, 1]);
    assert_eq!(c.data(), &[3.0, 7.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let a = Tensor::zeros([2, 3]);
    let b = Tensor::zeros([2, 3]);
    let err = matmul(&a, &b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]"), "{err}");
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[3, 4]);
    let b = rand_tensor(&mut rng, &[4, 2]);
    let r = grad_check(
        |g, a| {
            let b = g.constant(b.clone());
            let c = g.matmul(a, b)?;
            Ok(g.sum(c))
        },
        &a,
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{}", r.max_rel_error);
    let r = grad_check(
        |g, b| {
            let a = g.constant(a.clone());
            let c = g.matmul(a, b)?;
            weighted_sum(g, c, 5)
        },
        &b,
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-6, "{}", r.max_rel_error);
}

#[test]
fn softmax_examples() {
    let u = softmax_rows(&Tensor::zeros([1, 4]));
    assert!(u.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    let big = softmax_rows(&Tensor::matrix(&[&[1000.0, 1000.0]]));
    assert_eq!(big.data(), &[0.5, 0.5]);
    let s = softmax_rows(&Tensor::matrix(&[&[0.0, 3f64.ln()]]));
    assert!((s.data()[0] - 0.25).abs() < 1e-15);
    assert!((s.data()[1] - 0.75).abs() < 1e-15);
}

#[test]
fn relu_examples() {
    let y = relu(&Tensor::vector(&[-1.0, 0.0, 2.0]));
    assert_eq!(y.data(), &[0.0, 0.0, 2.0]);

    let mut g = Graph::new();
    let x = g.param(Tensor::vector(&[-1.0, -0.5, -3.0]));
    let y = g.relu(x);
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    let s = weighted_sum(&mut g, y, 3).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(x).data().iter().all(|&v| v == 0.0));

    // subgradient at zero is zero
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(&[0.0]));
    let y = g.relu(x);
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).data(), &[0.0]);
}

#[test]
fn layer_norm_examples() {
    let gain = Tensor::vector(&[1.0, 1.0, 1.0]);
    let bias = Tensor::vector(&[0.1, -0.2, 0.3]);
    let y = layer_norm(&Tensor::matrix(&[&[4.0, 4.0, 4.0]]), &gain, &bias).unwrap();
    assert_eq!(y.data(), bias.data());

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[5, 3]);
    let y = layer_norm(&x, &gain, &bias).unwrap();
    let bias_mean = bias.data().iter().sum::<f64>() / 3.0;
    for r in 0..5 {
        let mean = y.row(r).iter().sum::<f64>() / 3.0;
        assert!((mean - bias_mean).abs() < 1e-6);
    }
}

#[test]
fn linear_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[2, 3, 4]);
    let y = linear(&x, &Tensor::identity(4), &Tensor::zeros([4])).unwrap();
    assert_eq!(y, x);
    let y = linear(
        &Tensor::matrix(&[&[3.0]]),
        &Tensor::matrix(&[&[2.0]]),
        &Tensor::vector(&[1.0]),
    )
    .unwrap();
    assert_eq!(y.data(), &[7.0]);
    assert!(linear(&x, &Tensor::zeros([3, 2]), &Tensor::zeros([2])).is_err());
}

#[test]
fn cross_entropy_examples() {
    let peaked = Tensor::matrix(&[&[60.0, 0.0, 0.0]]);
    assert!(cross_entropy(&peaked, &[0]).unwrap() < 1e-20);
    let uniform = Tensor::zeros([4, 5]);
    let l = cross_entropy(&uniform, &[0, 1, 2, 4]).unwrap();
    assert!((l - 5f64.ln()).abs() < 1e-15);
    let l = cross_entropy(&Tensor::matrix(&[&[0.0, 3f64.ln()]]), &[0]).unwrap();
    assert!((l - 4f64.ln()).abs() < 1e-15);
    assert!((l - 1.3863).abs() < 1e-4);
    assert!(matches!(
        cross_entropy(&uniform, &[0, 1, 2, 5]),
        Err(Error::ClassIndex { index: 5, classes: 5 })
    ));
}

#[test]
fn max_over_axis_examples() {
    let single = Tensor::matrix(&[&[0.5, -1.0, 2.0]]);
    let (v, a) = max_over_axis(&single).unwrap();
    assert_eq!(v.data(), single.data());
    assert_eq!(a, vec![0, 0, 0]);

    let col = Tensor::matrix(&[&[1.0], &[5.0], &[5.0]]);
    let (v, a) = max_over_axis(&col).unwrap();
    assert_eq!(v.data(), &[5.0]);
    assert_eq!(a, vec![1]);

    assert!(max_over_axis(&Tensor::zeros([0, 3])).is_err());
}

#[test]
fn max_gradient_routes_only_to_argmax() {
    let x = Tensor::matrix(&[&[1.0, 9.0], &[5.0, 2.0], &[5.0, 3.0]]);
    let mut g = Graph::new();
    let xv = g.param(x);
    let m = g.max_over_time(xv, 3).unwrap();
    let w = g.constant(Tensor::matrix(&[&[2.0, -3.0]]));
    let p = g.mul(m, w).unwrap();
    let s = g.sum(p);
    g.backward(s).unwrap();
    assert_eq!(g.grad(xv).data(), &[0.0, -3.0, 2.0, 0.0, 0.0, 0.0]);
}

#[test]
fn backward_twice_doubles_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut g = Graph::new();
    let x = g.param(rand_tensor(&mut rng, &[3, 4]));
    let w = g.param(rand_tensor(&mut rng, &[4, 4]));
    let h = g.matmul(x, w).unwrap();
    let s = g.softmax_rows(h);
    let out = weighted_sum(&mut g, s, 9).unwrap();
    g.backward(out).unwrap();
    let once = (g.grad(x), g.grad(w));
    g.backward(out).unwrap();
    for (twice, once) in [(g.grad(x), &once.0), (g.grad(w), &once.1)] {
        for (t, o) in twice.data().iter().zip(once.data()) {
            assert_eq!(*t, 2.0 * o);
        }
    }
    g.zero_grad();
    assert!(g.grad(x).data().iter().all(|&v| v == 0.0));
}

#[test]
fn grad_reverse_is_identity_forward_and_negation_backward() {
    let x = Tensor::vector(&[1.5, -0.25, 3.0]);
    let mut g = Graph::new();
    let v = g.param(x.clone());
    let r = g.grad_reverse(v);
    assert_eq!(g.value(r), &x);
    let w = g.constant(Tensor::vector(&[1.0, -2.0, 0.0]));
    let p = g.mul(r, w).unwrap();
    let s = g.sum(p);
    g.backward(s).unwrap();
    assert_eq!(g.grad(v).data(), &[-1.0, 2.0, -0.0]);
}

#[test]
#[allow(clippy::identity_op)]
fn split_and_merge_heads_are_inverse() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[2 * 3, 4]);
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let s = g.split_heads(xv, 2, 3, 2).unwrap();
    assert_eq!(g.shape(s), &[4, 3, 2]);
    // head 1 of batch 0, step 2 holds columns 2..4 of row 2
    assert_eq!(&g.value(s).data()[(1 * 3 + 2) * 2..(1 * 3 + 2) * 2 + 2], &x.row(2)[2..4]);
    let m = g.merge_heads(s, 2, 3, 2).unwrap();
    assert_eq!(g.value(m), &x);
}

/// Every differentiable op, checked against central differences at random
/// points drawn at least 1e-3 away from ReLU and max kinks.
#[test]
fn every_op_matches_finite_differences() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let x = rand_away_from_zero(&mut rng, &[3, 4], 1e-3);
        let w = rand_tensor(&mut rng, &[4, 5]);
        let bias = rand_tensor(&mut rng, &[5]);
        let gain = rand_tensor(&mut rng, &[4]);
        let lb = rand_tensor(&mut rng, &[4]);
        let b3 = rand_tensor(&mut rng, &[2, 4, 3]);
        let a3 = rand_tensor(&mut rng, &[2, 3, 4]);
        let targets = [0usize, 3, 1];

        type Case<'a> = (&'a str, Box<dyn Fn(&mut Graph, Var) -> Result<Var> + 'a>, Tensor);
        let cases: Vec<Case> = vec![
            ("relu", Box::new(|g, x| { let y = g.relu(x); weighted_sum(g, y, seed) }), x.clone()),
            ("softmax", Box::new(|g, x| { let y = g.softmax_rows(x); weighted_sum(g, y, seed) }), x.clone()),
            ("layer_norm", Box::new(|g, x| {
                let (gn, b) = (g.constant(gain.clone()), g.constant(lb.clone()));
                let y = g.layer_norm(x, gn, b)?;
                weighted_sum(g, y, seed)
            }), x.clone()),
            ("layer_norm_gain", Box::new(|g, gn| {
                let (x, b) = (g.constant(x.clone()), g.constant(lb.clone()));
                let y = g.layer_norm(x, gn, b)?;
                weighted_sum(g, y, seed)
            }), gain.clone()),
            ("linear", Box::new(|g, x| {
                let (wv, bv) = (g.constant(w.clone()), g.constant(bias.clone()));
                let y = linear_var(g, x, wv, bv)?;
                weighted_sum(g, y, seed)
            }), x.clone()),
            ("linear_bias", Box::new(|g, b| {
                let (xv, wv) = (g.constant(x.clone()), g.constant(w.clone()));
                let y = linear_var(g, xv, wv, b)?;
                weighted_sum(g, y, seed)
            }), bias.clone()),
            ("cross_entropy", Box::new(|g, x| g.cross_entropy(x, &targets)), x.clone()),
            ("bmm", Box::new(|g, a| {
                let b = g.constant(b3.clone());
                let y = g.batch_matmul(a, b, false)?;
                weighted_sum(g, y, seed)
            }), a3.clone()),
            ("bmm_nt", Box::new(|g, a| {
                let b = g.constant(a3.clone());
                let y = g.batch_matmul(a, b, true)?;
                weighted_sum(g, y, seed)
            }), a3.clone()),
            ("bmm_nt_rhs", Box::new(|g, b| {
                let a = g.constant(a3.clone());
                let y = g.batch_matmul(a, b, true)?;
                weighted_sum(g, y, seed)
            }), a3.clone()),
        ];
        for (name, f, at) in &cases {
            let r = grad_check(f, at, DEFAULT_STEP).unwrap();
            assert!(r.max_rel_error < 1e-4, "{name} seed {seed}: {}", r.max_rel_error);
        }

        // max over time with well-separated entries
        let mut vals: Vec<f64> = (0..12).map(|i| i as f64 * 0.01).collect();
        for i in (1..vals.len()).rev() {
            vals.swap(i, rng.random_range(0..=i));
        }
        let xm = Tensor::new([4, 3], vals).unwrap();
        let r = grad_check(
            |g, x| {
                let m = g.max_over_time(x, 4)?;
                weighted_sum(g, m, seed)
            },
            &xm,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "max seed {seed}: {}", r.max_rel_error);
    }
}

#[test]
fn injected_fault_is_detected() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_away_from_zero(&mut rng, &[3, 3], 1e-3);
    let f = |g: &mut Graph, x: Var| {
        let y = g.relu(x);
        weighted_sum(g, y, 1)
    };
    let ok = grad_check(f, &x, DEFAULT_STEP).unwrap();
    assert!(ok.max_rel_error < 1e-6);
    let bad = grad_check_with(f, &x, DEFAULT_STEP, |g| g.inject_fault(OpKind::Relu, 0.5)).unwrap();
    assert!(bad.max_rel_error > 0.1);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(row in prop::collection::vec(-1e3f64..1e3, 1..12)) {
        let n = row.len();
        let y = softmax_rows(&Tensor::new([1, n], row).unwrap());
        let total: f64 = y.data().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-6);
        prop_assert!(y.data().iter().all(|&v| v >= 0.0 && v.is_finite()));
    }

    #[test]
    fn forward_ops_stay_finite(vals in prop::collection::vec(-50.0f64..50.0, 12)) {
        let x = Tensor::new([3, 4], vals).unwrap();
        let ln = layer_norm(&x, &Tensor::vector(&[1.0; 4]), &Tensor::zeros([4])).unwrap();
        prop_assert!(ln.is_finite());
        prop_assert!(softmax_rows(&x).is_finite());
        prop_assert!(cross_entropy(&x, &[0, 1, 3]).unwrap().is_finite());
    }
}
