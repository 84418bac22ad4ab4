//! Adam optimizer with optional decoupled weight decay and global-norm
//! gradient clipping, plus the EMA parameter shadow.

use std::collections::BTreeMap;

use ndarray::ArrayD;

use crate::error::{Error, Result};
use crate::nn::Param;
use crate::num::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip threshold; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: Some(1.0),
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return Err(Error::config("Adam betas must lie in (0, 1)"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight decay must be nonnegative"));
        }
        Ok(())
    }
}

/// Per-parameter first/second moment state keyed by the hierarchical name.
#[derive(Debug, Clone)]
pub struct Adam<S: Scalar> {
    pub config: OptimConfig,
    pub step_count: u64,
    pub m: BTreeMap<String, ArrayD<S>>,
    pub v: BTreeMap<String, ArrayD<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(config: OptimConfig) -> Self {
        Adam {
            config,
            step_count: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Scales every gradient so the global L2 norm does not exceed the clip
    /// threshold. Returns the pre-clip norm.
    pub fn clip_gradients(&self, mut visit: impl FnMut(&mut dyn FnMut(String, &mut Param<S>))) -> f64 {
        let Some(clip) = self.config.grad_clip else {
            return f64::NAN;
        };
        let mut sq_sum = 0.0f64;
        visit(&mut |_, p| {
            for &g in p.grad.iter() {
                let g = g.to_f64_();
                sq_sum += g * g;
            }
        });
        let norm = sq_sum.sqrt();
        if norm > clip {
            let scale = S::from_f64(clip / norm);
            visit(&mut |_, p| p.grad.mapv_inplace(|x| x * scale));
        }
        norm
    }

    /// One Adam step at the given learning rate over all parameters.
    pub fn step(&mut self, lr: f64, visit: impl FnOnce(&mut dyn FnMut(String, &mut Param<S>))) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let b1 = S::from_f64(self.config.beta1);
        let b2 = S::from_f64(self.config.beta2);
        let one = S::one();
        let eps = S::from_f64(self.config.eps);
        let bc1 = S::from_f64(1.0 - self.config.beta1.powi(t));
        let bc2 = S::from_f64(1.0 - self.config.beta2.powi(t));
        let lr_s = S::from_f64(lr);
        let wd = S::from_f64(self.config.weight_decay);
        let use_wd = self.config.weight_decay != 0.0;
        let m_map = &mut self.m;
        let v_map = &mut self.v;
        visit(&mut |name, p| {
            let m = m_map
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(p.grad.raw_dim()));
            let v = v_map
                .entry(name)
                .or_insert_with(|| ArrayD::zeros(p.grad.raw_dim()));
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    let mut upd = mhat / (vhat.sqrt() + eps);
                    if use_wd {
                        upd = upd + wd * *w;
                    }
                    *w = *w - lr_s * upd;
                });
        });
    }
}

/// Exponential moving average of model parameters.
#[derive(Debug, Clone)]
pub struct EmaState<S: Scalar> {
    pub decay: f64,
    pub shadow: BTreeMap<String, ArrayD<S>>,
}

impl<S: Scalar> EmaState<S> {
    pub fn new(decay: f64) -> Self {
        EmaState {
            decay,
            shadow: BTreeMap::new(),
        }
    }

    /// shadow <- decay * shadow + (1 - decay) * params; uninitialized entries
    /// start from the current parameter values.
    pub fn update(&mut self, visit: impl FnOnce(&mut dyn FnMut(String, &mut Param<S>))) {
        let d = S::from_f64(self.decay);
        let one = S::one();
        let shadow = &mut self.shadow;
        visit(&mut |name, p| {
            let value: ArrayD<S> = p.value.clone();
            match shadow.get_mut(&name) {
                Some(s) => {
                    ndarray::Zip::from(s).and(&value).for_each(|s, &w| {
                        *s = d * *s + (one - d) * w;
                    });
                }
                None => {
                    shadow.insert(name, value);
                }
            }
        });
    }

    /// Copies the shadow into the model parameters.
    pub fn apply_to(&self, visit: impl FnOnce(&mut dyn FnMut(String, &mut Param<S>))) -> Result<()> {
        let mut missing = Vec::new();
        let shadow = &self.shadow;
        visit(&mut |name, p| match shadow.get(&name) {
            Some(s) => p.value.assign(s),
            None => missing.push(name),
        });
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::CheckpointKeys {
                missing,
                unexpected: vec![],
            })
        }
    }
}
