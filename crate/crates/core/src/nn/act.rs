//! Elementwise activations with cached backward.

use crate::nn::Tensor;
use crate::num::{gelu, gelu_grad, Scalar};

#[derive(Default)]
pub struct Relu<S: Scalar> {
    cache: Option<Tensor<S>>,
}

impl<S: Scalar> Relu<S> {
    pub fn new() -> Self {
        Relu { cache: None }
    }

    pub fn forward(&mut self, x: &Tensor<S>) -> Tensor<S> {
        self.cache = Some(x.clone());
        x.mapv(|v| if v > S::zero() { v } else { S::zero() })
    }

    pub fn backward(&mut self, gy: &Tensor<S>) -> Tensor<S> {
        let x = self.cache.take().expect("forward before backward");
        let mut gx = gy.clone();
        gx.zip_mut_with(&x, |g, &v| {
            if v <= S::zero() {
                *g = S::zero();
            }
        });
        gx
    }
}

#[derive(Default)]
pub struct Gelu<S: Scalar> {
    cache: Option<Tensor<S>>,
}

impl<S: Scalar> Gelu<S> {
    pub fn new() -> Self {
        Gelu { cache: None }
    }

    pub fn forward(&mut self, x: &Tensor<S>) -> Tensor<S> {
        self.cache = Some(x.clone());
        x.mapv(gelu)
    }

    pub fn backward(&mut self, gy: &Tensor<S>) -> Tensor<S> {
        let x = self.cache.take().expect("forward before backward");
        let mut gx = gy.clone();
        gx.zip_mut_with(&x, |g, &v| *g = *g * gelu_grad(v));
        gx
    }
}
