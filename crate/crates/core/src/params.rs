//! Parameter groups that exist in two forms: stored tensors and the graph
//! nodes they are bound to for one forward/backward pass.
//!
//! Field order is declared once per group and reused for naming, binding,
//! checkpointing and optimizer state.

use crate::autodiff::{Graph, Tensor, Var};

macro_rules! param_group {
    ($(#[$m:meta])* pub struct $name:ident { $($field:ident),* $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<T = $crate::autodiff::Tensor> {
            $(pub $field: T,)*
        }

        impl<T> $name<T> {
            pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> $name<U> {
                $name { $($field: f(&self.$field),)* }
            }

            pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
                $(f(format!("{prefix}{}", stringify!($field)), &self.$field);)*
            }

            pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut T)) {
                $(f(format!("{prefix}{}", stringify!($field)), &mut self.$field);)*
            }
        }

        impl $crate::params::ParamTree for $name {
            type Bound = $name<$crate::autodiff::Var>;

            fn visit_named<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a $crate::autodiff::Tensor)) {
                self.visit(prefix, &mut |n, t| f(n, t));
            }

            fn visit_named_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut $crate::autodiff::Tensor)) {
                self.visit_mut(prefix, &mut |n, t| f(n, t));
            }

            fn bind(&self, g: &mut $crate::autodiff::Graph) -> Self::Bound {
                self.map(&mut |t| g.param(t.clone()))
            }

            fn bound_vars(bound: &Self::Bound) -> Vec<$crate::autodiff::Var> {
                let mut out = Vec::new();
                bound.visit("", &mut |_, v| out.push(*v));
                out
            }
        }
    };
}

pub(crate) use param_group;

/// Anything that can list its tensors in a fixed order.
pub trait ParamTree {
    type Bound;

    fn visit_named<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor));
    fn visit_named_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor));
    fn bind(&self, g: &mut Graph) -> Self::Bound;
    fn bound_vars(bound: &Self::Bound) -> Vec<Var>;

    fn named(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit_named(prefix, &mut |n, t| out.push((n, t)));
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_named("", &mut |_, t| n += t.len());
        n
    }

    fn shapes(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        self.visit_named("", &mut |_, t| out.push(t.shape().to_vec()));
        out
    }

    /// Gradients of every tensor, in visiting order.
    fn grads(g: &Graph, bound: &Self::Bound) -> Vec<Tensor> {
        Self::bound_vars(bound).into_iter().map(|v| g.grad(v)).collect()
    }

    /// Flattens every tensor into one vector.
    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit_named("", &mut |_, t| out.extend_from_slice(t.data()));
        out
    }

    /// Inverse of [`ParamTree::flatten`]; panics if `flat` is too short.
    fn unflatten(&mut self, flat: &[f64]) {
        let mut at = 0;
        self.visit_named_mut("", &mut |_, t| {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        });
    }
}
