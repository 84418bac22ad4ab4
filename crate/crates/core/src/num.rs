//! Scalar abstraction for the numeric kernels.
//!
//! Everything that computes (networks, losses, metrics kernels) is generic
//! over [`Scalar`] so the same code runs at `f32` for training and at `f64`
//! for finite-difference gradient checks.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::ScalarOperand;
use num_traits::{Float, ToPrimitive};

pub trait Scalar:
    Float + ToPrimitive + ScalarOperand + Sum + Debug + Display + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;

    fn to_f64_(self) -> f64 {
        self.to_f64().unwrap()
    }
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
}

/// tanh-form GELU; the analytic derivative in [`gelu_grad`] matches this
/// exact expression, which keeps finite-difference checks consistent.
pub fn gelu<S: Scalar>(x: S) -> S {
    let c = S::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let a = S::from_f64(0.044715);
    let inner = c * (x + a * x * x * x);
    let half = S::from_f64(0.5);
    half * x * (S::one() + inner.tanh())
}

pub fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::from_f64(0.797_884_560_802_865_4);
    let a = S::from_f64(0.044715);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let sech2 = S::one() - t * t;
    let dinner = c * (S::one() + three * a * x * x);
    half * (S::one() + t) + half * x * sech2 * dinner
}

pub fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}
