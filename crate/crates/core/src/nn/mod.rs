//! Minimal neural-network kernels with hand-written backward passes.
//!
//! Tensors are `(batch, channels, height, width)` arrays in standard layout.
//! Layers cache whatever forward state their backward pass needs; parameters
//! are reachable through [`visit`](Conv2d::visit_params)-style traversal so
//! the optimizer, EMA and checkpoints address them by hierarchical name.

pub mod act;
pub mod conv;
pub mod norm;
pub mod ops;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;

use crate::num::Scalar;

pub use act::{Gelu, Relu};
pub use conv::Conv2d;
pub use norm::ChannelLayerNorm;

pub type Tensor<S> = ndarray::Array4<S>;

/// How a parameter is filled by [`Param::randomize`]. Construction always
/// starts from zero so identity-at-zero-init properties hold by default.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zero,
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
    Const(f64),
}

#[derive(Debug, Clone)]
pub struct Param<S: Scalar> {
    pub value: ArrayD<S>,
    pub grad: ArrayD<S>,
    pub init: Init,
}

impl<S: Scalar> Param<S> {
    pub fn zeros(shape: &[usize], init: Init) -> Self {
        Param {
            value: ArrayD::zeros(IxDyn(shape)),
            grad: ArrayD::zeros(IxDyn(shape)),
            init,
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(S::zero());
    }

    pub fn randomize(&mut self, rng: &mut impl Rng) {
        match self.init {
            Init::Zero => self.value.fill(S::zero()),
            Init::Const(c) => self.value.fill(S::from_f64(c)),
            Init::Uniform(b) => {
                for v in self.value.iter_mut() {
                    *v = S::from_f64(rng.gen_range(-b..=b));
                }
            }
        }
    }
}

/// Kaiming-style uniform bound for a conv weight.
pub fn kaiming_bound(fan_in: usize) -> f64 {
    (1.0 / fan_in as f64).sqrt()
}

/// Parameter traversal callback: hierarchical name plus the parameter.
pub type ParamFn<'a, S> = dyn FnMut(String, &mut Param<S>) + 'a;

/// Joins a name onto a dotted prefix.
pub fn key(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
