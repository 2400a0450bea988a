//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every forward op as it runs. [`Graph::backward`]
//! then walks the tape in reverse and accumulates gradients into the
//! leaves. Graphs are rebuilt for every batch.
//!
//! ```
//! use tdann::autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let a = g.param(Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]));
//! let b = g.constant(Tensor::matrix(&[&[1.0], &[1.0]]));
//! let c = g.matmul(a, b)?;
//! assert_eq!(g.value(c).data(), &[3.0, 7.0]);
//!
//! let loss = g.sum(c);
//! g.backward(loss)?;
//! assert_eq!(g.grad(a).data(), &[1.0, 1.0, 1.0, 1.0]);
//! # Ok::<(), tdann::Error>(())
//! ```

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod tensor;

pub use gradcheck::{compare_gradient, grad_check, relative_error, GradCheck, DEFAULT_STEP, REL_FLOOR};
pub(crate) use gradcheck::grad_check_with;
pub use graph::{Graph, OpKind, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Plain matrix product of two `m×k`, `k×n` tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let mut g = Graph::new();
    let (a, b) = (g.constant(a.clone()), g.constant(b.clone()));
    let c = g.matmul(a, b)?;
    Ok(g.value(c).clone())
}

pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let x = g.constant(x.clone());
    let y = g.softmax_rows(x);
    g.value(y).clone()
}

pub fn relu(x: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let x = g.constant(x.clone());
    let y = g.relu(x);
    g.value(y).clone()
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (x, gn, b) = (
        g.constant(x.clone()),
        g.constant(gain.clone()),
        g.constant(bias.clone()),
    );
    let y = g.layer_norm(x, gn, b)?;
    Ok(g.value(y).clone())
}

/// `x·W + b` with `b` broadcast over every leading axis of `x`.
pub fn linear(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (x, w, b) = (
        g.constant(x.clone()),
        g.constant(weight.clone()),
        g.constant(bias.clone()),
    );
    let y = linear_var(&mut g, x, w, b)?;
    Ok(g.value(y).clone())
}

/// Graph form of [`linear`].
pub fn linear_var(g: &mut Graph, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let out = g.value(weight).shape().get(1).copied().unwrap_or(0);
    if g.shape(bias) != [out] {
        return Err(Error::shape("linear", g.shape(weight), g.shape(bias)));
    }
    let xw = g.matmul(x, weight)?;
    g.add_tiled(xw, bias)
}

pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let loss = g.cross_entropy(l, targets)?;
    Ok(g.value(loss).data()[0])
}

/// Column-wise maximum of a `t×d` tensor with the winning row per column.
pub fn max_over_axis(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    if x.rank() != 2 || x.shape()[0] == 0 {
        return Err(Error::Invalid(format!(
            "max over an empty or non-matrix axis: {:?}",
            x.shape()
        )));
    }
    let (t, d) = (x.shape()[0], x.shape()[1]);
    let mut values = vec![0.0; d];
    let mut arg = vec![0; d];
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let m = g.max_over_time(xv, t)?;
    values.copy_from_slice(g.value(m).data());
    for (j, a) in arg.iter_mut().enumerate() {
        // first row attaining the max
        *a = (0..t).find(|&s| x.at(s, j) == values[j]).unwrap_or(0);
    }
    Ok((Tensor::vector(&values), arg))
}

#[cfg(test)]
mod tests;
