//! Per-pixel layer normalization over the channel dimension, with affine
//! scale and shift. This is the normalization used inside the transformer
//! blocks: statistics are taken across channels independently at every
//! spatial position.

use ndarray::Array4;

use crate::nn::{key, Init, Param, ParamFn, Tensor};
use crate::num::Scalar;

pub struct ChannelLayerNorm<S: Scalar> {
    pub gamma: Param<S>,
    pub beta: Param<S>,
    eps: f64,
    cache: Option<NormCache<S>>,
}

struct NormCache<S: Scalar> {
    xhat: Tensor<S>,
    inv_std: ndarray::Array3<S>,
}

impl<S: Scalar> ChannelLayerNorm<S> {
    pub fn new(channels: usize) -> Self {
        ChannelLayerNorm {
            gamma: Param::zeros(&[channels], Init::Const(1.0)),
            beta: Param::zeros(&[channels], Init::Zero),
            eps: 1e-6,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<S>) -> Tensor<S> {
        let (n, c, h, w) = x.dim();
        let cs = S::from_f64(c as f64);
        let eps = S::from_f64(self.eps);
        let mut xhat = Array4::zeros((n, c, h, w));
        let mut inv_std = ndarray::Array3::zeros((n, h, w));
        for b in 0..n {
            for i in 0..h {
                for j in 0..w {
                    let mut mean = S::zero();
                    for ch in 0..c {
                        mean = mean + x[[b, ch, i, j]];
                    }
                    mean = mean / cs;
                    let mut var = S::zero();
                    for ch in 0..c {
                        let d = x[[b, ch, i, j]] - mean;
                        var = var + d * d;
                    }
                    var = var / cs;
                    let istd = S::one() / (var + eps).sqrt();
                    inv_std[[b, i, j]] = istd;
                    for ch in 0..c {
                        xhat[[b, ch, i, j]] = (x[[b, ch, i, j]] - mean) * istd;
                    }
                }
            }
        }
        let mut y = xhat.clone();
        for b in 0..n {
            for ch in 0..c {
                let g = self.gamma.value[ch];
                let be = self.beta.value[ch];
                for i in 0..h {
                    for j in 0..w {
                        y[[b, ch, i, j]] = g * xhat[[b, ch, i, j]] + be;
                    }
                }
            }
        }
        self.cache = Some(NormCache { xhat, inv_std });
        y
    }

    pub fn backward(&mut self, gy: &Tensor<S>) -> Tensor<S> {
        let NormCache { xhat, inv_std } = self.cache.take().expect("forward before backward");
        let (n, c, h, w) = gy.dim();
        let cs = S::from_f64(c as f64);

        for ch in 0..c {
            let mut gg = S::zero();
            let mut gb = S::zero();
            for b in 0..n {
                for i in 0..h {
                    for j in 0..w {
                        gg = gg + gy[[b, ch, i, j]] * xhat[[b, ch, i, j]];
                        gb = gb + gy[[b, ch, i, j]];
                    }
                }
            }
            self.gamma.grad[ch] = self.gamma.grad[ch] + gg;
            self.beta.grad[ch] = self.beta.grad[ch] + gb;
        }

        let mut gx = Array4::zeros((n, c, h, w));
        for b in 0..n {
            for i in 0..h {
                for j in 0..w {
                    // ghat = gy * gamma; gx = istd*(ghat - mean(ghat) - xhat*mean(ghat*xhat))
                    let mut mean_g = S::zero();
                    let mut mean_gx = S::zero();
                    for ch in 0..c {
                        let gh = gy[[b, ch, i, j]] * self.gamma.value[ch];
                        mean_g = mean_g + gh;
                        mean_gx = mean_gx + gh * xhat[[b, ch, i, j]];
                    }
                    mean_g = mean_g / cs;
                    mean_gx = mean_gx / cs;
                    let istd = inv_std[[b, i, j]];
                    for ch in 0..c {
                        let gh = gy[[b, ch, i, j]] * self.gamma.value[ch];
                        gx[[b, ch, i, j]] =
                            istd * (gh - mean_g - xhat[[b, ch, i, j]] * mean_gx);
                    }
                }
            }
        }
        gx
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamFn<S>) {
        f(key(prefix, "gamma"), &mut self.gamma);
        f(key(prefix, "beta"), &mut self.beta);
    }
}
