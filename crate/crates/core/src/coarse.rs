//! Coarse demosaicing network: a convolutional trunk of recursive residual
//! groups whose dual attention blocks combine channel and spatial attention.

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::nn::ops;
use crate::nn::{key, Conv2d, Param, ParamFn, Relu, Tensor};
use crate::num::{sigmoid, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct CoarseNetConfig {
    pub channels: usize,
    pub n_rrg: usize,
    pub n_dab: usize,
    pub ca_reduction: usize,
    pub sa_kernel: usize,
}

impl Default for CoarseNetConfig {
    fn default() -> Self {
        CoarseNetConfig {
            channels: 64,
            n_rrg: 4,
            n_dab: 8,
            ca_reduction: 8,
            sa_kernel: 7,
        }
    }
}

impl CoarseNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels % self.ca_reduction != 0 {
            return Err(Error::config(format!(
                "channels {} not divisible by ca_reduction {}",
                self.channels, self.ca_reduction
            )));
        }
        if self.sa_kernel % 2 == 0 {
            return Err(Error::config(format!(
                "sa_kernel {} must be odd",
                self.sa_kernel
            )));
        }
        Ok(())
    }
}

/// Channel attention: per-channel gates from global average pooling through
/// a two-layer bottleneck and a sigmoid.
pub struct ChannelAttention<S: Scalar> {
    squeeze: Conv2d<S>,
    excite: Conv2d<S>,
    relu: Relu<S>,
    cache: Option<(Tensor<S>, Tensor<S>)>, // (input, gates)
}

impl<S: Scalar> ChannelAttention<S> {
    pub fn new(channels: usize, reduction: usize) -> Self {
        ChannelAttention {
            squeeze: Conv2d::new(channels, channels / reduction, 1, 1, true),
            excite: Conv2d::new(channels / reduction, channels, 1, 1, true),
            relu: Relu::new(),
            cache: None,
        }
    }

    pub fn forward(&mut self, u: &Tensor<S>) -> Tensor<S> {
        let z = ops::global_avg_pool(u);
        let a = self.squeeze.forward(&z);
        let a = self.relu.forward(&a);
        let a = self.excite.forward(&a);
        let gates = a.mapv(sigmoid);
        let mut y = u.clone();
        let (n, c, h, w) = u.dim();
        for b in 0..n {
            for ch in 0..c {
                let g = gates[[b, ch, 0, 0]];
                y.slice_mut(ndarray::s![b, ch, .., ..]).mapv_inplace(|v| v * g);
            }
        }
        self.cache = Some((u.clone(), gates));
        let _ = (h, w);
        y
    }

    pub fn backward(&mut self, gy: &Tensor<S>) -> Tensor<S> {
        let (u, gates) = self.cache.take().expect("forward before backward");
        let (n, c, h, w) = u.dim();
        // product rule: through the scaled input and through the gates
        let mut gu = gy.clone();
        let mut ggate = Tensor::zeros((n, c, 1, 1));
        for b in 0..n {
            for ch in 0..c {
                let g = gates[[b, ch, 0, 0]];
                let mut acc = S::zero();
                for i in 0..h {
                    for j in 0..w {
                        acc = acc + gy[[b, ch, i, j]] * u[[b, ch, i, j]];
                    }
                }
                ggate[[b, ch, 0, 0]] = acc * g * (S::one() - g); // sigmoid'
                gu.slice_mut(ndarray::s![b, ch, .., ..]).mapv_inplace(|v| v * g);
            }
        }
        let ga = self.excite.backward(&ggate);
        let ga = self.relu.backward(&ga);
        let gz = self.squeeze.backward(&ga);
        gu + ops::global_avg_pool_backward(&gz, h, w)
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamFn<S>) {
        self.squeeze.visit_params(&key(prefix, "squeeze"), f);
        self.excite.visit_params(&key(prefix, "excite"), f);
    }
}

/// Spatial attention: a single-channel gate map from concatenated channel
/// mean and max pooled maps through a wide convolution and a sigmoid.
pub struct SpatialAttention<S: Scalar> {
    conv: Conv2d<S>,
    cache: Option<SaCache<S>>,
}

struct SaCache<S: Scalar> {
    input: Tensor<S>,
    gates: Tensor<S>,
    argmax: Array3<usize>,
}

impl<S: Scalar> SpatialAttention<S> {
    pub fn new(kernel: usize) -> Self {
        SpatialAttention {
            conv: Conv2d::new(2, 1, kernel, 1, true),
            cache: None,
        }
    }

    pub fn forward(&mut self, u: &Tensor<S>) -> Tensor<S> {
        let mean = ops::channel_mean(u);
        let (max, argmax) = ops::channel_max(u);
        let pooled = ops::concat_channels(&[&mean, &max]);
        let a = self.conv.forward(&pooled);
        let gates = a.mapv(sigmoid);
        let (n, c, h, w) = u.dim();
        let mut y = u.clone();
        for b in 0..n {
            for ch in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        y[[b, ch, i, j]] = y[[b, ch, i, j]] * gates[[b, 0, i, j]];
                    }
                }
            }
        }
        self.cache = Some(SaCache {
            input: u.clone(),
            gates,
            argmax,
        });
        y
    }

    pub fn backward(&mut self, gy: &Tensor<S>) -> Tensor<S> {
        let SaCache {
            input,
            gates,
            argmax,
        } = self.cache.take().expect("forward before backward");
        let (n, c, h, w) = input.dim();
        let mut gu = gy.clone();
        let mut ggate = Tensor::zeros((n, 1, h, w));
        for b in 0..n {
            for i in 0..h {
                for j in 0..w {
                    let g = gates[[b, 0, i, j]];
                    let mut acc = S::zero();
                    for ch in 0..c {
                        acc = acc + gy[[b, ch, i, j]] * input[[b, ch, i, j]];
                        gu[[b, ch, i, j]] = gu[[b, ch, i, j]] * g;
                    }
                    ggate[[b, 0, i, j]] = acc * g * (S::one() - g);
                }
            }
        }
        let gpooled = self.conv.backward(&ggate);
        let parts = ops::split_channels(&gpooled, &[1, 1]);
        gu + ops::channel_mean_backward(&parts[0], c)
            + ops::channel_max_backward(&parts[1], &argmax, c)
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamFn<S>) {
        self.conv.visit_params(&key(prefix, "conv"), f);
    }
}

/// Dual attention block: t + Conv1x1(Concat(CA(U), SA(U))) with
/// U = Conv3x3(ReLU(Conv3x3(t))).
pub struct Dab<S: Scalar> {
    conv1: Conv2d<S>,
    relu: Relu<S>,
    conv2: Conv2d<S>,
    ca: ChannelAttention<S>,
    sa: SpatialAttention<S>,
    fuse: Conv2d<S>,
    channels: usize,
}

impl<S: Scalar> Dab<S> {
    pub fn new(cfg: &CoarseNetConfig) -> Self {
        let c = cfg.channels;
        Dab {
            conv1: Conv2d::new(c, c, 3, 1, true),
            relu: Relu::new(),
            conv2: Conv2d::new(c, c, 3, 1, true),
            ca: ChannelAttention::new(c, cfg.ca_reduction),
            sa: SpatialAttention::new(cfg.sa_kernel),
            fuse: Conv2d::new(2 * c, c, 1, 1, true),
            channels: c,
        }
    }

    pub fn forward(&mut self, x: &Tensor<S>) -> Tensor<S> {
        assert_eq!(x.dim().1, self.channels, "dab channel count");
        let u1 = self.conv1.forward(x);
        let r = self.relu.forward(&u1);
        let u = self.conv2.forward(&r);
        let ca = self.ca.forward(&u);
        let sa = self.sa.forward(&u);
        let cat = ops::concat_channels(&[&ca, &sa]);
        let d = self.fuse.forward(&cat);
        x + &d
    }

    pub fn backward(&mut self, gy: &Tensor<S>) -> Tensor<S> {
        let gcat = self.fuse.backward(gy);
        let c = self.channels;
        let parts = ops::split_channels(&gcat, &[c, c]);
        let gu = self.ca.backward(&parts[0]) + self.sa.backward(&parts[1]);
        let gr = self.conv2.backward(&gu);
        let gu1 = self.relu.backward(&gr);
        self.conv1.backward(&gu1) + gy
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamFn<S>) {
        self.conv1.visit_params(&key(prefix, "conv1"), f);
        self.conv2.visit_params(&key(prefix, "conv2"), f);
        self.ca.visit_params(&key(prefix, "ca"), f);
        self.sa.visit_params(&key(prefix, "sa"), f);
        self.fuse.visit_params(&key(prefix, "fuse"), f);
    }
}

/// Recursive residual group: a chain of DABs, a closing conv, and a group
/// residual.
pub struct Rrg<S: Scalar> {
    dabs: Vec<Dab<S>>,
    conv: Conv2d<S>,
}

impl<S: Scalar> Rrg<S> {
    pub fn new(cfg: &CoarseNetConfig) -> Self {
        Rrg {
            dabs: (0..cfg.n_dab).map(|_| Dab::new(cfg)).collect(),
            conv: Conv2d::new(cfg.channels, cfg.channels, 3, 1, true),
        }
    }

    pub fn forward(&mut self, x: &Tensor<S>) -> Tensor<S> {
        let mut t = x.clone();
        for dab in &mut self.dabs {
            t = dab.forward(&t);
        }
        x + &self.conv.forward(&t)
    }

    pub fn backward(&mut self, gy: &Tensor<S>) -> Tensor<S> {
        let mut g = self.conv.backward(gy);
        for dab in self.dabs.iter_mut().rev() {
            g = dab.backward(&g);
        }
        g + gy
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamFn<S>) {
        for (j, dab) in self.dabs.iter_mut().enumerate() {
            dab.visit_params(&key(prefix, &format!("dab{j}")), f);
        }
        self.conv.visit_params(&key(prefix, "conv"), f);
    }
}

/// The full coarse trunk: head conv, RRG chain, tail conv, global residual.
pub struct CoarseNet<S: Scalar> {
    pub config: CoarseNetConfig,
    head: Conv2d<S>,
    rrgs: Vec<Rrg<S>>,
    tail: Conv2d<S>,
}

impl<S: Scalar> CoarseNet<S> {
    pub fn new(cfg: CoarseNetConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(CoarseNet {
            head: Conv2d::new(3, cfg.channels, 3, 1, true),
            rrgs: (0..cfg.n_rrg).map(|_| Rrg::new(&cfg)).collect(),
            tail: Conv2d::new(cfg.channels, 3, 3, 1, true),
            config: cfg,
        })
    }

    pub fn forward(&mut self, x: &Tensor<S>) -> Tensor<S> {
        let mut f = self.head.forward(x);
        for rrg in &mut self.rrgs {
            f = rrg.forward(&f);
        }
        x + &self.tail.forward(&f)
    }

    pub fn backward(&mut self, gy: &Tensor<S>) -> Tensor<S> {
        let mut g = self.tail.backward(gy);
        for rrg in self.rrgs.iter_mut().rev() {
            g = rrg.backward(&g);
        }
        self.head.backward(&g) + gy
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamFn<S>) {
        self.head.visit_params(&key(prefix, "head"), f);
        for (i, rrg) in self.rrgs.iter_mut().enumerate() {
            rrg.visit_params(&key(prefix, &format!("rrg{i}")), f);
        }
        self.tail.visit_params(&key(prefix, "tail"), f);
    }

    pub fn param_count(&mut self) -> usize {
        let mut total = 0;
        self.visit_params("", &mut |_, p: &mut Param<S>| total += p.len());
        total
    }
}
