//! Pixel correction network: a 4-level encoder-decoder of transformer
//! blocks (channel-wise attention + gated feed-forward) whose decoder skips
//! are enriched by multi-scale gating modules.

use ndarray::ArrayD;

use crate::error::{Error, Result};
use crate::nn::ops;
use crate::nn::{key, ChannelLayerNorm, Conv2d, Gelu, Init, Param, ParamFn, Tensor};
use crate::num::{sigmoid, Scalar};

/// How decoder skips are fused.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionMode {
    Msgm,
    SimpleConcat,
    SingleGate,
}

impl FusionMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "msgm" => Ok(FusionMode::Msgm),
            "simple_concat" => Ok(FusionMode::SimpleConcat),
            "single_gate" => Ok(FusionMode::SingleGate),
            other => Err(Error::config(format!("unknown fusion mode '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Msgm => "msgm",
            FusionMode::SimpleConcat => "simple_concat",
            FusionMode::SingleGate => "single_gate",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionNetConfig {
    pub base_dim: usize,
    /// Encoder levels 1-3 plus the latent level.
    pub blocks_per_level: [usize; 4],
    pub refinement_blocks: usize,
    pub heads_per_level: [usize; 4],
    pub ffn_expansion: f64,
    pub fusion_mode: FusionMode,
    /// Evaluate the second gate from the already-updated first half, reading
    /// the gating equations strictly sequentially instead of symmetrically.
    pub sequential_gates: bool,
}

impl Default for CorrectionNetConfig {
    fn default() -> Self {
        CorrectionNetConfig {
            base_dim: 48,
            blocks_per_level: [4, 6, 6, 8],
            refinement_blocks: 4,
            heads_per_level: [1, 2, 4, 8],
            ffn_expansion: 2.66,
            fusion_mode: FusionMode::Msgm,
            sequential_gates: false,
        }
    }
}

impl CorrectionNetConfig {
    /// Feature width at a level (1-based; level 4 is the latent).
    pub fn dim_at(&self, level: usize) -> usize {
        self.base_dim << (level - 1)
    }

    pub fn validate(&self) -> Result<()> {
        for level in 1..=4 {
            let dim = self.dim_at(level);
            let heads = self.heads_per_level[level - 1];
            if heads == 0 || dim % heads != 0 {
                return Err(Error::config(format!(
                    "level {level} dim {dim} not divisible by heads {heads}"
                )));
            }
        }
        if self.base_dim % 2 != 0 {
            return Err(Error::config("base_dim must be even"));
        }
        Ok(())
    }
}

// ------------------------------------------------------------------- MDTA

/// Channel-transposed multi-head attention with depth-wise convs on the
/// query/key/value path and a learnable per-head temperature.
pub struct Mdta<S: Scalar> {
    norm: ChannelLayerNorm<S>,
    qkv: Conv2d<S>,
    qkv_dw: Conv2d<S>,
    temperature: Param<S>,
    proj: Conv2d<S>,
    heads: usize,
    channels: usize,
    cache: Option<MdtaCache<S>>,
    /// Attention matrices from the most recent forward, for inspection.
    pub last_attention: Option<Tensor<S>>,
}

struct MdtaCache<S: Scalar> {
    qh: Tensor<S>,
    kh: Tensor<S>,
    vh: Tensor<S>,
    qn: Tensor<S>,
    kn: Tensor<S>,
    qnorms: ArrayD<S>,
    knorms: ArrayD<S>,
    sim: Tensor<S>,
    attn: Tensor<S>,
    spatial: (usize, usize),
}

impl<S: Scalar> Mdta<S> {
    pub fn new(channels: usize, heads: usize) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(Error::config(format!(
                "channels {channels} not divisible by heads {heads}"
            )));
        }
        Ok(Mdta {
            norm: ChannelLayerNorm::new(channels),
            qkv: Conv2d::new(channels, channels * 3, 1, 1, false),
            qkv_dw: Conv2d::depthwise(channels * 3, 3, false),
            temperature: Param::zeros(&[heads], Init::Const(1.0)),
            proj: Conv2d::new(channels, channels, 1, 1, false),
            heads,
            channels,
            cache: None,
            last_attention: None,
        })
    }

    pub fn forward(&mut self, x: &Tensor<S>) -> Tensor<S> {
        let (_, c, h, w) = x.dim();
        assert_eq!(c, self.channels);
        let xn = self.norm.forward(x);
        let qkv = self.qkv.forward(&xn);
        let qkv = self.qkv_dw.forward(&qkv);
        let parts = ops::split_channels(&qkv, &[c, c, c]);
        let qh = ops::to_heads(&parts[0], self.heads);
        let kh = ops::to_heads(&parts[1], self.heads);
        let vh = ops::to_heads(&parts[2], self.heads);
        let (qn, qnorms) = ops::l2_normalize_rows(&qh);
        let (kn, knorms) = ops::l2_normalize_rows(&kh);
        let sim = ops::bmm(&qn, &kn, false, true);
        let scaled = {
            let mut s = sim.clone();
            for hd in 0..self.heads {
                let t = self.temperature.value[hd];
                s.slice_mut(ndarray::s![.., hd, .., ..]).mapv_inplace(|v| v * t);
            }
            s
        };
        let attn = ops::softmax_lastdim(&scaled);
        let outh = ops::bmm(&attn, &vh, false, false);
        let out = ops::from_heads(&outh, h, w);
        let y = x + &self.proj.forward(&out);
        self.last_attention = Some(attn.clone());
        self.cache = Some(MdtaCache {
            qh,
            kh,
            vh,
            qn,
            kn,
            qnorms,
            knorms,
            sim,
            attn,
            spatial: (h, w),
        });
        y
    }

    pub fn backward(&mut self, gy: &Tensor<S>) -> Tensor<S> {
        let cache = self.cache.take().expect("forward before backward");
        let (h, w) = cache.spatial;
        let gout = self.proj.backward(gy);
        let gouth = ops::to_heads(&gout, self.heads);
        let gattn = ops::bmm(&gouth, &cache.vh, false, true);
        let gvh = ops::bmm(&cache.attn, &gouth, true, false);
        let gscaled = ops::softmax_backward(&cache.attn, &gattn);
        let mut gsim = gscaled.clone();
        for hd in 0..self.heads {
            let t = self.temperature.value[hd];
            let gt: S = gscaled
                .slice(ndarray::s![.., hd, .., ..])
                .iter()
                .zip(cache.sim.slice(ndarray::s![.., hd, .., ..]).iter())
                .map(|(&g, &s)| g * s)
                .sum();
            self.temperature.grad[hd] = self.temperature.grad[hd] + gt;
            gsim.slice_mut(ndarray::s![.., hd, .., ..]).mapv_inplace(|v| v * t);
        }
        let gqn = ops::bmm(&gsim, &cache.kn, false, false);
        let gkn = ops::bmm(&gsim, &cache.qn, true, false);
        let gqh = ops::l2_normalize_rows_backward(&cache.qh, &cache.qnorms, &gqn);
        let gkh = ops::l2_normalize_rows_backward(&cache.kh, &cache.knorms, &gkn);
        let gq = ops::from_heads(&gqh, h, w);
        let gk = ops::from_heads(&gkh, h, w);
        let gv = ops::from_heads(&gvh, h, w);
        let gqkv = ops::concat_channels(&[&gq, &gk, &gv]);
        let g = self.qkv_dw.backward(&gqkv);
        let g = self.qkv.backward(&g);
        gy + &self.norm.backward(&g)
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamFn<S>) {
        self.norm.visit_params(&key(prefix, "norm"), f);
        self.qkv.visit_params(&key(prefix, "qkv"), f);
        self.qkv_dw.visit_params(&key(prefix, "qkv_dw"), f);
        f(key(prefix, "temperature"), &mut self.temperature);
        self.proj.visit_params(&key(prefix, "proj"), f);
    }
}

// ------------------------------------------------------------------- GDFN

/// Gated feed-forward: two depth-wise conv paths from a shared expansion,
/// one GELU-activated, joined by elementwise product.
pub struct Gdfn<S: Scalar> {
    norm: ChannelLayerNorm<S>,
    expand: Conv2d<S>,
    dw: Conv2d<S>,
    gelu: Gelu<S>,
    project: Conv2d<S>,
    hidden: usize,
    cache: Option<(Tensor<S>, Tensor<S>)>, // (gelu(p1), p2)
}

impl<S: Scalar> Gdfn<S> {
    pub fn new(channels: usize, expansion: f64) -> Self {
        let hidden = ((channels as f64 * expansion).round() as usize).max(1);
        Gdfn {
            norm: ChannelLayerNorm::new(channels),
            expand: Conv2d::new(channels, hidden * 2, 1, 1, false),
            dw: Conv2d::depthwise(hidden * 2, 3, false),
            gelu: Gelu::new(),
            project: Conv2d::new(hidden, channels, 1, 1, false),
            hidden,
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor<S>) -> Tensor<S> {
        let xn = self.norm.forward(x);
        let e = self.expand.forward(&xn);
        let e = self.dw.forward(&e);
        let parts = ops::split_channels(&e, &[self.hidden, self.hidden]);
        let a = self.gelu.forward(&parts[0]);
        let prod = &a * &parts[1];
        let y = x + &self.project.forward(&prod);
        self.cache = Some((a, parts[1].clone()));
        y
    }

    pub fn backward(&mut self, gy: &Tensor<S>) -> Tensor<S> {
        let (a, p2) = self.cache.take().expect("forward before backward");
        let gprod = self.project.backward(gy);
        let ga = &gprod * &p2;
        let gp2 = &gprod * &a;
        let gp1 = self.gelu.backward(&ga);
        let ge = ops::concat_channels(&[&gp1, &gp2]);
        let g = self.dw.backward(&ge);
        let g = self.expand.backward(&g);
        gy + &self.norm.backward(&g)
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamFn<S>) {
        self.norm.visit_params(&key(prefix, "norm"), f);
        self.expand.visit_params(&key(prefix, "expand"), f);
        self.dw.visit_params(&key(prefix, "dw"), f);
        self.project.visit_params(&key(prefix, "project"), f);
    }
}

/// MDTA followed by GDFN, each with its own residual.
pub struct TransformerBlock<S: Scalar> {
    pub mdta: Mdta<S>,
    pub gdfn: Gdfn<S>,
}

impl<S: Scalar> TransformerBlock<S> {
    pub fn new(channels: usize, heads: usize, expansion: f64) -> Result<Self> {
        Ok(TransformerBlock {
            mdta: Mdta::new(channels, heads)?,
            gdfn: Gdfn::new(channels, expansion),
        })
    }

    pub fn forward(&mut self, x: &Tensor<S>) -> Tensor<S> {
        let a = self.mdta.forward(x);
        self.gdfn.forward(&a)
    }

    pub fn backward(&mut self, gy: &Tensor<S>) -> Tensor<S> {
        let g = self.gdfn.backward(gy);
        self.mdta.backward(&g)
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamFn<S>) {
        self.mdta.visit_params(&key(prefix, "mdta"), f);
        self.gdfn.visit_params(&key(prefix, "gdfn"), f);
    }
}

// -------------------------------------------------------------- resampling

/// Halves resolution, doubles channels: conv then space-to-depth.
pub struct Downsample<S: Scalar> {
    conv: Conv2d<S>,
}

impl<S: Scalar> Downsample<S> {
    pub fn new(channels: usize) -> Self {
        Downsample {
            conv: Conv2d::new(channels, channels / 2, 3, 1, false),
        }
    }

    pub fn forward(&mut self, x: &Tensor<S>) -> Tensor<S> {
        ops::pixel_unshuffle2(&self.conv.forward(x))
    }

    pub fn backward(&mut self, gy: &Tensor<S>) -> Tensor<S> {
        self.conv.backward(&ops::pixel_shuffle2(gy))
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamFn<S>) {
        self.conv.visit_params(&key(prefix, "conv"), f);
    }
}

/// Doubles resolution, halves channels: conv then depth-to-space.
pub struct Upsample<S: Scalar> {
    conv: Conv2d<S>,
}

impl<S: Scalar> Upsample<S> {
    pub fn new(channels: usize) -> Self {
        Upsample {
            conv: Conv2d::new(channels, channels * 2, 3, 1, false),
        }
    }

    pub fn forward(&mut self, x: &Tensor<S>) -> Tensor<S> {
        ops::pixel_shuffle2(&self.conv.forward(x))
    }

    pub fn backward(&mut self, gy: &Tensor<S>) -> Tensor<S> {
        self.conv.backward(&ops::pixel_unshuffle2(gy))
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamFn<S>) {
        self.conv.visit_params(&key(prefix, "conv"), f);
    }
}

// -------------------------------------------------------------------- MSGM

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum GateKind {
    /// Both gates from the pre-update halves (symmetric reading).
    MutualParallel,
    /// Second gate consumes the already-updated first half.
    MutualSequential,
    Single,
}

/// Multi-scale gating module: resamples the three encoder-level outputs to
/// one target level, fuses them by concat + 1x1 conv, and gates the two
/// halves of a depth-wise conv against each other.
pub struct Msgm<S: Scalar> {
    conv_in: Conv2d<S>,
    dw: Conv2d<S>,
    conv_out: Conv2d<S>,
    target_level: usize,
    level_dims: [usize; 3],
    width: usize,
    kind: GateKind,
    cache: Option<MsgmCache<S>>,
}

struct MsgmCache<S: Scalar> {
    f1: Tensor<S>,
    f2: Tensor<S>,
    g1: Tensor<S>,
}

impl<S: Scalar> Msgm<S> {
    pub fn new(cfg: &CorrectionNetConfig, target_level: usize) -> Self {
        assert!((1..=3).contains(&target_level));
        let level_dims = [cfg.dim_at(1), cfg.dim_at(2), cfg.dim_at(3)];
        let total: usize = level_dims.iter().sum();
        let width = cfg.dim_at(target_level);
        let kind = match (cfg.fusion_mode, cfg.sequential_gates) {
            (FusionMode::SingleGate, _) => GateKind::Single,
            (_, true) => GateKind::MutualSequential,
            (_, false) => GateKind::MutualParallel,
        };
        let gate_out = match kind {
            GateKind::Single => width / 2,
            _ => width,
        };
        Msgm {
            conv_in: Conv2d::new(total, width, 1, 1, false),
            dw: Conv2d::depthwise(width, 3, false),
            conv_out: Conv2d::new(gate_out, width, 1, 1, false),
            target_level,
            level_dims,
            width,
            kind,
            cache: None,
        }
    }

    fn resample(&self, x: &Tensor<S>, from_level: usize) -> Tensor<S> {
        let mut t = x.clone();
        if from_level < self.target_level {
            for _ in from_level..self.target_level {
                t = ops::avg_pool2(&t);
            }
        } else {
            for _ in self.target_level..from_level {
                t = ops::upsample_nearest2(&t);
            }
        }
        t
    }

    fn resample_backward(&self, g: &Tensor<S>, from_level: usize) -> Tensor<S> {
        let mut t = g.clone();
        if from_level < self.target_level {
            for _ in from_level..self.target_level {
                t = ops::avg_pool2_backward(&t);
            }
        } else {
            for _ in self.target_level..from_level {
                t = ops::upsample_nearest2_backward(&t);
            }
        }
        t
    }

    pub fn forward(&mut self, inputs: [&Tensor<S>; 3]) -> Tensor<S> {
        for (i, inp) in inputs.iter().enumerate() {
            assert_eq!(inp.dim().1, self.level_dims[i], "msgm input width");
        }
        let r1 = self.resample(inputs[0], 1);
        let r2 = self.resample(inputs[1], 2);
        let r3 = self.resample(inputs[2], 3);
        let cat = ops::concat_channels(&[&r1, &r2, &r3]);
        let f = self.conv_in.forward(&cat);
        let fd = self.dw.forward(&f);
        let half = self.width / 2;
        let parts = ops::split_channels(&fd, &[half, half]);
        let (f1, f2) = (parts[0].clone(), parts[1].clone());
        let out = match self.kind {
            GateKind::MutualParallel => {
                let g1 = f1.mapv(sigmoid) * &f2;
                let g2 = f2.mapv(sigmoid) * &f1;
                let y = self.conv_out.forward(&ops::concat_channels(&[&g1, &g2]));
                self.cache = Some(MsgmCache { f1, f2, g1 });
                y
            }
            GateKind::MutualSequential => {
                let g1 = f1.mapv(sigmoid) * &f2;
                let g2 = f2.mapv(sigmoid) * &g1;
                let y = self.conv_out.forward(&ops::concat_channels(&[&g1, &g2]));
                self.cache = Some(MsgmCache { f1, f2, g1 });
                y
            }
            GateKind::Single => {
                let g1 = f1.mapv(sigmoid) * &f2;
                let y = self.conv_out.forward(&g1);
                self.cache = Some(MsgmCache {
                    f1,
                    f2,
                    g1: Tensor::zeros((0, 0, 0, 0)),
                });
                y
            }
        };
        out
    }

    pub fn backward(&mut self, gy: &Tensor<S>) -> [Tensor<S>; 3] {
        let MsgmCache { f1, f2, g1 } = self.cache.take().expect("forward before backward");
        let half = self.width / 2;
        let gcat = self.conv_out.backward(gy);
        let one = S::one();
        let (gf1, gf2) = match self.kind {
            GateKind::MutualParallel => {
                let parts = ops::split_channels(&gcat, &[half, half]);
                let (gg1, gg2) = (&parts[0], &parts[1]);
                let s1 = f1.mapv(sigmoid);
                let s2 = f2.mapv(sigmoid);
                let ds1 = s1.mapv(|s| s * (one - s));
                let ds2 = s2.mapv(|s| s * (one - s));
                let gf1 = gg1 * &ds1 * &f2 + gg2 * &s2;
                let gf2 = gg2 * &ds2 * &f1 + gg1 * &s1;
                (gf1, gf2)
            }
            GateKind::MutualSequential => {
                let parts = ops::split_channels(&gcat, &[half, half]);
                let (gg1_direct, gg2) = (&parts[0], &parts[1]);
                let s1 = f1.mapv(sigmoid);
                let s2 = f2.mapv(sigmoid);
                let ds1 = s1.mapv(|s| s * (one - s));
                let ds2 = s2.mapv(|s| s * (one - s));
                // g2 = s2 * g1, so gradient w.r.t. g1 flows through both outputs
                let gg1 = gg1_direct + &(gg2 * &s2);
                let gf2_from_g2 = gg2 * &ds2 * &g1;
                let gf1 = &gg1 * &ds1 * &f2;
                let gf2 = &gg1 * &s1 + &gf2_from_g2;
                (gf1, gf2)
            }
            GateKind::Single => {
                let s1 = f1.mapv(sigmoid);
                let ds1 = s1.mapv(|s| s * (one - s));
                let gf1 = &gcat * &ds1 * &f2;
                let gf2 = &gcat * &s1;
                (gf1, gf2)
            }
        };
        let gfd = ops::concat_channels(&[&gf1, &gf2]);
        let gf = self.dw.backward(&gfd);
        let gcat_in = self.conv_in.backward(&gf);
        let parts = ops::split_channels(&gcat_in, &self.level_dims);
        [
            self.resample_backward(&parts[0], 1),
            self.resample_backward(&parts[1], 2),
            self.resample_backward(&parts[2], 3),
        ]
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamFn<S>) {
        self.conv_in.visit_params(&key(prefix, "conv_in"), f);
        self.dw.visit_params(&key(prefix, "dw"), f);
        self.conv_out.visit_params(&key(prefix, "conv_out"), f);
    }
}

// ------------------------------------------------------------ the network

pub struct CorrectionNet<S: Scalar> {
    pub config: CorrectionNetConfig,
    embed: Conv2d<S>,
    enc: [Vec<TransformerBlock<S>>; 3],
    downs: [Downsample<S>; 3],
    latent: Vec<TransformerBlock<S>>,
    msgms: Option<[Msgm<S>; 3]>,
    ups: [Upsample<S>; 3],
    reduces: [Conv2d<S>; 3],
    dec: [Vec<TransformerBlock<S>>; 3],
    refine: Vec<TransformerBlock<S>>,
    output: Conv2d<S>,
}

fn blocks<S: Scalar>(
    n: usize,
    dim: usize,
    heads: usize,
    expansion: f64,
) -> Result<Vec<TransformerBlock<S>>> {
    (0..n)
        .map(|_| TransformerBlock::new(dim, heads, expansion))
        .collect()
}

impl<S: Scalar> CorrectionNet<S> {
    pub fn new(cfg: CorrectionNetConfig) -> Result<Self> {
        cfg.validate()?;
        let d = |l: usize| cfg.dim_at(l);
        let h = |l: usize| cfg.heads_per_level[l - 1];
        let e = cfg.ffn_expansion;
        let enc = [
            blocks(cfg.blocks_per_level[0], d(1), h(1), e)?,
            blocks(cfg.blocks_per_level[1], d(2), h(2), e)?,
            blocks(cfg.blocks_per_level[2], d(3), h(3), e)?,
        ];
        let latent = blocks(cfg.blocks_per_level[3], d(4), h(4), e)?;
        let dec = [
            blocks(cfg.blocks_per_level[0], d(1), h(1), e)?,
            blocks(cfg.blocks_per_level[1], d(2), h(2), e)?,
            blocks(cfg.blocks_per_level[2], d(3), h(3), e)?,
        ];
        let msgms = (cfg.fusion_mode != FusionMode::SimpleConcat)
            .then(|| [Msgm::new(&cfg, 1), Msgm::new(&cfg, 2), Msgm::new(&cfg, 3)]);
        let skip_parts = if msgms.is_some() { 3 } else { 2 };
        let reduces = [
            Conv2d::new(skip_parts * d(1), d(1), 1, 1, false),
            Conv2d::new(skip_parts * d(2), d(2), 1, 1, false),
            Conv2d::new(skip_parts * d(3), d(3), 1, 1, false),
        ];
        Ok(CorrectionNet {
            embed: Conv2d::new(3, d(1), 3, 1, false),
            enc,
            downs: [Downsample::new(d(1)), Downsample::new(d(2)), Downsample::new(d(3))],
            latent,
            msgms,
            ups: [Upsample::new(d(2)), Upsample::new(d(3)), Upsample::new(d(4))],
            reduces,
            dec,
            refine: blocks(cfg.refinement_blocks, d(1), h(1), e)?,
            output: Conv2d::new(d(1), 3, 3, 1, false),
            config: cfg,
        })
    }

    pub fn forward(&mut self, x: &Tensor<S>) -> Tensor<S> {
        let (_, _, h, w) = x.dim();
        assert!(h % 8 == 0 && w % 8 == 0, "spatial dims must be multiples of 8");
        let mut f = self.embed.forward(x);
        let mut enc_out = Vec::with_capacity(3);
        for level in 0..3 {
            for blk in &mut self.enc[level] {
                f = blk.forward(&f);
            }
            enc_out.push(f.clone());
            f = self.downs[level].forward(&f);
        }
        for blk in &mut self.latent {
            f = blk.forward(&f);
        }
        let msgm_out: Option<Vec<Tensor<S>>> = self.msgms.as_mut().map(|ms| {
            ms.iter_mut()
                .map(|m| m.forward([&enc_out[0], &enc_out[1], &enc_out[2]]))
                .collect()
        });
        for level in (0..3).rev() {
            let up = self.ups[level].forward(&f);
            let cat = match &msgm_out {
                Some(ms) => ops::concat_channels(&[&up, &enc_out[level], &ms[level]]),
                None => ops::concat_channels(&[&up, &enc_out[level]]),
            };
            f = self.reduces[level].forward(&cat);
            for blk in &mut self.dec[level] {
                f = blk.forward(&f);
            }
        }
        for blk in &mut self.refine {
            f = blk.forward(&f);
        }
        x + &self.output.forward(&f)
    }

    pub fn backward(&mut self, gy: &Tensor<S>) -> Tensor<S> {
        let mut g = self.output.backward(gy);
        for blk in self.refine.iter_mut().rev() {
            g = blk.backward(&g);
        }
        let mut gskip: [Option<Tensor<S>>; 3] = [None, None, None];
        let mut gmsgm_in: [Option<Tensor<S>>; 3] = [None, None, None];
        for level in 0..3 {
            for blk in self.dec[level].iter_mut().rev() {
                g = blk.backward(&g);
            }
            let gcat = self.reduces[level].backward(&g);
            let dim = self.config.dim_at(level + 1);
            if self.msgms.is_some() {
                let parts = ops::split_channels(&gcat, &[dim, dim, dim]);
                gskip[level] = Some(parts[1].clone());
                // route msgm output grad through the module right away
                let grads = self.msgms.as_mut().unwrap()[level].backward(&parts[2]);
                for (i, gr) in grads.into_iter().enumerate() {
                    gmsgm_in[i] = Some(match gmsgm_in[i].take() {
                        Some(acc) => acc + gr,
                        None => gr,
                    });
                }
                g = self.ups[level].backward(&parts[0]);
            } else {
                let parts = ops::split_channels(&gcat, &[dim, dim]);
                gskip[level] = Some(parts[1].clone());
                g = self.ups[level].backward(&parts[0]);
            }
        }
        for blk in self.latent.iter_mut().rev() {
            g = blk.backward(&g);
        }
        for level in (0..3).rev() {
            let mut ge = self.downs[level].backward(&g);
            ge = ge + gskip[level].take().unwrap();
            if let Some(gm) = gmsgm_in[level].take() {
                ge = ge + gm;
            }
            for blk in self.enc[level].iter_mut().rev() {
                ge = blk.backward(&ge);
            }
            g = ge;
        }
        gy + &self.embed.backward(&g)
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamFn<S>) {
        self.embed.visit_params(&key(prefix, "embed"), f);
        for (level, blks) in self.enc.iter_mut().enumerate() {
            for (j, blk) in blks.iter_mut().enumerate() {
                blk.visit_params(&key(prefix, &format!("enc{}.blk{j}", level + 1)), f);
            }
        }
        for (level, down) in self.downs.iter_mut().enumerate() {
            down.visit_params(&key(prefix, &format!("down{}", level + 1)), f);
        }
        for (j, blk) in self.latent.iter_mut().enumerate() {
            blk.visit_params(&key(prefix, &format!("latent.blk{j}")), f);
        }
        if let Some(ms) = &mut self.msgms {
            for (level, m) in ms.iter_mut().enumerate() {
                m.visit_params(&key(prefix, &format!("msgm{}", level + 1)), f);
            }
        }
        for (level, up) in self.ups.iter_mut().enumerate() {
            up.visit_params(&key(prefix, &format!("up{}", level + 1)), f);
        }
        for (level, red) in self.reduces.iter_mut().enumerate() {
            red.visit_params(&key(prefix, &format!("reduce{}", level + 1)), f);
        }
        for (level, blks) in self.dec.iter_mut().enumerate() {
            for (j, blk) in blks.iter_mut().enumerate() {
                blk.visit_params(&key(prefix, &format!("dec{}.blk{j}", level + 1)), f);
            }
        }
        for (j, blk) in self.refine.iter_mut().enumerate() {
            blk.visit_params(&key(prefix, &format!("refine{j}")), f);
        }
        self.output.visit_params(&key(prefix, "output"), f);
    }

    pub fn param_count(&mut self) -> usize {
        let mut total = 0;
        self.visit_params("", &mut |_, p: &mut Param<S>| total += p.len());
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand4(shape: (usize, usize, usize, usize), rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let mut t = Array4::zeros(shape);
        for v in t.iter_mut() {
            *v = rng.gen_range(-0.8..0.8);
        }
        t
    }

    fn tiny_cfg(fusion: FusionMode) -> CorrectionNetConfig {
        CorrectionNetConfig {
            base_dim: 4,
            blocks_per_level: [1, 1, 1, 1],
            refinement_blocks: 1,
            heads_per_level: [1, 2, 2, 4],
            ffn_expansion: 2.0,
            fusion_mode: fusion,
            sequential_gates: false,
        }
    }

    #[test]
    fn mdta_zero_init_is_identity_and_rows_sum_to_one() {
        let mut mdta = Mdta::<f64>::new(4, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let x = rand4((1, 4, 4, 4), &mut rng);
        let y = mdta.forward(&x);
        assert_eq!(y, x);
        let attn = mdta.last_attention.as_ref().unwrap();
        for lane in attn.rows() {
            assert!((lane.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mdta_rejects_indivisible_heads() {
        assert!(Mdta::<f64>::new(4, 3).is_err());
    }

    #[test]
    fn mdta_attention_work_scales_linearly_in_pixels() {
        // cost model: attention application is heads * (C/heads)^2 * HW MACs,
        // so doubling H doubles the work at fixed C
        let cost = |c: usize, heads: usize, h: usize, w: usize| heads * (c / heads).pow(2) * h * w;
        assert_eq!(cost(8, 2, 16, 8) * 2, cost(8, 2, 32, 8));
    }

    #[test]
    fn gdfn_zero_init_is_identity() {
        let mut gdfn = Gdfn::<f64>::new(4, 2.66);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = rand4((1, 4, 4, 4), &mut rng);
        assert_eq!(gdfn.forward(&x), x);
    }

    #[test]
    fn gdfn_zero_gate_path_passes_input_through() {
        let mut gdfn = Gdfn::<f64>::new(2, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        // random projection but zero expansion: p1 preactivation is 0,
        // gelu(0) = 0 kills the gated product
        let mut proj_rng = ChaCha8Rng::seed_from_u64(23);
        gdfn.project.weight.randomize(&mut proj_rng);
        let x = rand4((1, 2, 4, 4), &mut rng);
        assert_eq!(gdfn.forward(&x), x);
    }

    #[test]
    fn gdfn_shape_preserved_for_any_expansion() {
        for &e in &[1.0, 2.66, 4.0] {
            let mut gdfn = Gdfn::<f32>::new(6, e);
            let x = Array4::from_elem((1, 6, 8, 8), 0.1f32);
            assert_eq!(gdfn.forward(&x).dim(), (1, 6, 8, 8));
        }
    }

    #[test]
    fn msgm_zero_init_outputs_zero() {
        let cfg = tiny_cfg(FusionMode::Msgm);
        let mut m = Msgm::<f64>::new(&cfg, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let x1 = rand4((1, 4, 8, 8), &mut rng);
        let x2 = rand4((1, 8, 4, 4), &mut rng);
        let x3 = rand4((1, 16, 2, 2), &mut rng);
        let y = m.forward([&x1, &x2, &x3]);
        assert_eq!(y.dim(), (1, 4, 8, 8));
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn msgm_output_width_and_size_match_target_level() {
        let cfg = tiny_cfg(FusionMode::Msgm);
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let x1 = rand4((1, 4, 8, 8), &mut rng);
        let x2 = rand4((1, 8, 4, 4), &mut rng);
        let x3 = rand4((1, 16, 2, 2), &mut rng);
        for target in 1..=3 {
            let mut m = Msgm::<f64>::new(&cfg, target);
            m.visit_params("", &mut |_, p| p.randomize(&mut rng));
            let y = m.forward([&x1, &x2, &x3]);
            let exp_hw = 8 >> (target - 1);
            assert_eq!(y.dim(), (1, 4 << (target - 1), exp_hw, exp_hw));
        }
    }

    #[test]
    fn msgm_result_independent_of_evaluation_repetition() {
        let cfg = tiny_cfg(FusionMode::Msgm);
        let mut rng = ChaCha8Rng::seed_from_u64(26);
        let mut m = Msgm::<f64>::new(&cfg, 2);
        m.visit_params("", &mut |_, p| p.randomize(&mut rng));
        let x1 = rand4((1, 4, 8, 8), &mut rng);
        let x2 = rand4((1, 8, 4, 4), &mut rng);
        let x3 = rand4((1, 16, 2, 2), &mut rng);
        let a = m.forward([&x1, &x2, &x3]);
        let b = m.forward([&x1, &x2, &x3]);
        assert_eq!(a, b);
    }

    fn gradient_check<FWD>(mut fwd: FWD, x: &Tensor<f64>, gx: &Tensor<f64>, gy: &Tensor<f64>)
    where
        FWD: FnMut(&Tensor<f64>) -> Tensor<f64>,
    {
        let h = 1e-5;
        let mut max_rel: f64 = 0.0;
        let dims = x.dim();
        let picks = [
            [0, 0, 0, 0],
            [0, dims.1 - 1, dims.2 - 1, dims.3 - 1],
            [0, dims.1 / 2, 1, 2 % dims.3],
        ];
        for idx in picks {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = ((fwd(&xp) * gy).sum() - (fwd(&xm) * gy).sum()) / (2.0 * h);
            let denom = fd.abs().max(gx[idx].abs()).max(1e-8);
            max_rel = max_rel.max((gx[idx] - fd).abs() / denom);
        }
        assert!(max_rel < 1e-4, "max relative error {max_rel}");
    }

    #[test]
    fn mdta_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(27);
        let mut mdta = Mdta::<f64>::new(4, 2).unwrap();
        mdta.visit_params("", &mut |_, p| p.randomize(&mut rng));
        let x = rand4((1, 4, 4, 4), &mut rng);
        let gy = rand4((1, 4, 4, 4), &mut rng);
        let _ = mdta.forward(&x);
        let gx = mdta.backward(&gy);
        gradient_check(|t| mdta.forward(t), &x, &gx, &gy);
    }

    #[test]
    fn gdfn_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(28);
        let mut gdfn = Gdfn::<f64>::new(2, 2.0);
        gdfn.visit_params("", &mut |_, p| p.randomize(&mut rng));
        let x = rand4((1, 2, 4, 4), &mut rng);
        let gy = rand4((1, 2, 4, 4), &mut rng);
        let _ = gdfn.forward(&x);
        let gx = gdfn.backward(&gy);
        gradient_check(|t| gdfn.forward(t), &x, &gx, &gy);
    }

    #[test]
    fn msgm_gradient_matches_finite_differences() {
        for sequential in [false, true] {
            let mut cfg = tiny_cfg(FusionMode::Msgm);
            cfg.sequential_gates = sequential;
            let mut rng = ChaCha8Rng::seed_from_u64(29);
            let mut m = Msgm::<f64>::new(&cfg, 1);
            m.visit_params("", &mut |_, p| p.randomize(&mut rng));
            let x1 = rand4((1, 4, 4, 4), &mut rng);
            let x2 = rand4((1, 8, 2, 2), &mut rng);
            let x3 = rand4((1, 16, 1, 1), &mut rng);
            let gy = rand4((1, 4, 4, 4), &mut rng);
            let _ = m.forward([&x1, &x2, &x3]);
            let gx = m.backward(&gy);
            gradient_check(|t| m.forward([t, &x2, &x3]), &x1, &gx[0], &gy);
        }
    }

    #[test]
    fn correction_zero_init_is_identity() {
        for fusion in [FusionMode::Msgm, FusionMode::SimpleConcat, FusionMode::SingleGate] {
            let mut net = CorrectionNet::<f64>::new(tiny_cfg(fusion)).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(30);
            let x = rand4((1, 3, 16, 16), &mut rng);
            let y = net.forward(&x);
            assert_eq!(y, x, "fusion {:?}", fusion);
        }
    }

    #[test]
    fn correction_preserves_shape_for_all_fusion_modes() {
        for fusion in [FusionMode::Msgm, FusionMode::SimpleConcat, FusionMode::SingleGate] {
            let mut net = CorrectionNet::<f32>::new(tiny_cfg(fusion)).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(31);
            let mut x = Array4::zeros((1, 3, 16, 24));
            for v in x.iter_mut() {
                *v = rng.gen_range(0.0..1.0);
            }
            assert_eq!(net.forward(&x).dim(), (1, 3, 16, 24));
        }
    }

    #[test]
    fn default_param_count_in_calibration_band() {
        let mut cfg = CorrectionNetConfig::default();
        cfg.fusion_mode = FusionMode::SimpleConcat;
        let mut net = CorrectionNet::<f32>::new(cfg).unwrap();
        let count = net.param_count();
        assert!(
            (21_000_000..=31_000_000).contains(&count),
            "correction params {count} outside [21M, 31M]"
        );
    }
}
