use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Denominator floor for relative errors.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Tensor,
    pub numeric: Tensor,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares a supplied gradient against central differences of `f` at `x`.
pub fn compare_gradient(
    analytic: &Tensor,
    mut f: impl FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    h: f64,
) -> Result<GradCheck> {
    if analytic.len() != x.len() {
        return Err(Error::shape("grad_check", analytic.shape(), x.shape()));
    }
    let f0 = f(x)?;
    if !f0.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    let mut probe = x.clone();
    let mut numeric = Tensor::zeros(x.shape().to_vec());
    let mut worst = (0.0, 0);
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("grad_check objective at coordinate {i}")));
        }
        let n = (up - down) / (2.0 * h);
        numeric.data_mut()[i] = n;
        let e = relative_error(analytic.data()[i], n);
        if e > worst.0 {
            worst = (e, i);
        }
    }
    Ok(GradCheck {
        max_rel_error: worst.0,
        worst_index: worst.1,
        analytic: analytic.clone(),
        numeric,
    })
}

/// Checks the backward pass of a scalar graph function `f` at `x`.
///
/// `f` receives a fresh graph and the differentiable input node and must
/// return a one-element node.
pub fn grad_check(
    f: impl Fn(&mut Graph, Var) -> Result<Var>,
    x: &Tensor,
    h: f64,
) -> Result<GradCheck> {
    grad_check_with(f, x, h, |_| {})
}

pub(crate) fn grad_check_with(
    f: impl Fn(&mut Graph, Var) -> Result<Var>,
    x: &Tensor,
    h: f64,
    prepare: impl Fn(&mut Graph),
) -> Result<GradCheck> {
    let mut g = Graph::new();
    prepare(&mut g);
    let input = g.param(x.clone());
    let out = f(&mut g, input)?;
    g.backward(out)?;
    let analytic = g.grad(input);
    compare_gradient(
        &analytic,
        |p| {
            let mut g = Graph::new();
            let input = g.constant(p.clone());
            let out = f(&mut g, input)?;
            Ok(g.value(out).data()[0])
        },
        x,
        h,
    )
}
