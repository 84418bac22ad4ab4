//! Two-stage model composition, pipeline variants, padding and tiling.

use ndarray::{Array3, Array4};
use rand::Rng;

use crate::coarse::{CoarseNet, CoarseNetConfig};
use crate::correction::{CorrectionNet, CorrectionNetConfig, FusionMode};
use crate::error::{Error, Result};
use crate::image::{extend_to_rgb, RawImage, RgbImage};
use crate::nn::{key, Conv2d, Param, ParamFn, Tensor};
use crate::num::Scalar;

/// Order in which the two stages are wired.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOrder {
    CoarseFirst,
    CorrectFirst,
    Parallel,
}

impl StageOrder {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "coarse_first" => Ok(StageOrder::CoarseFirst),
            "correct_first" => Ok(StageOrder::CorrectFirst),
            "parallel" => Ok(StageOrder::Parallel),
            other => Err(Error::config(format!("unknown stage order '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            StageOrder::CoarseFirst => "coarse_first",
            StageOrder::CorrectFirst => "correct_first",
            StageOrder::Parallel => "parallel",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PipelineVariant {
    pub order: StageOrder,
    pub fusion: FusionMode,
}

impl Default for PipelineVariant {
    fn default() -> Self {
        PipelineVariant {
            order: StageOrder::CoarseFirst,
            fusion: FusionMode::Msgm,
        }
    }
}

impl PipelineVariant {
    pub fn name(&self) -> String {
        format!("{}+{}", self.order.name(), self.fusion.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemosaicFormerConfig {
    pub coarse: CoarseNetConfig,
    pub correction: CorrectionNetConfig,
    pub variant: PipelineVariant,
    pub pad_multiple: usize,
}

impl Default for DemosaicFormerConfig {
    fn default() -> Self {
        DemosaicFormerConfig {
            coarse: CoarseNetConfig::default(),
            correction: CorrectionNetConfig::default(),
            variant: PipelineVariant::default(),
            pad_multiple: 8,
        }
    }
}

impl DemosaicFormerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pad_multiple < 8 || !self.pad_multiple.is_power_of_two() {
            return Err(Error::config(format!(
                "pad_multiple {} must be a power of two >= 8",
                self.pad_multiple
            )));
        }
        self.coarse.validate()?;
        self.correction.validate()
    }
}

/// The composed two-stage model. The fusion mode of the variant overrides
/// the correction config so ablation sweeps can swap it from one place.
pub struct DemosaicFormer<S: Scalar> {
    pub config: DemosaicFormerConfig,
    pub coarse: CoarseNet<S>,
    pub correction: CorrectionNet<S>,
    merge: Option<Conv2d<S>>,
    merge_cache: Option<(Tensor<S>, Tensor<S>)>,
}

impl<S: Scalar> DemosaicFormer<S> {
    pub fn new(mut config: DemosaicFormerConfig) -> Result<Self> {
        config.correction.fusion_mode = config.variant.fusion;
        config.validate()?;
        let merge = matches!(config.variant.order, StageOrder::Parallel)
            .then(|| Conv2d::new(6, 3, 1, 1, true));
        Ok(DemosaicFormer {
            coarse: CoarseNet::new(config.coarse.clone())?,
            correction: CorrectionNet::new(config.correction.clone())?,
            merge,
            merge_cache: None,
            config,
        })
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamFn<S>) {
        self.coarse.visit_params(&key(prefix, "coarse"), f);
        self.correction.visit_params(&key(prefix, "pc"), f);
        if let Some(m) = &mut self.merge {
            m.visit_params(&key(prefix, "merge"), f);
        }
    }

    pub fn randomize(&mut self, rng: &mut impl Rng) {
        self.visit_params("", &mut |_, p: &mut Param<S>| p.randomize(rng));
    }

    pub fn zero_params(&mut self) {
        self.visit_params("", &mut |_, p: &mut Param<S>| p.value.fill(S::zero()));
    }

    pub fn zero_grads(&mut self) {
        self.visit_params("", &mut |_, p: &mut Param<S>| p.zero_grad());
    }

    pub fn param_count(&mut self) -> usize {
        let mut total = 0;
        self.visit_params("", &mut |_, p: &mut Param<S>| total += p.len());
        total
    }

    /// Forward pass keeping caches for backward. Returns the first-stage
    /// output (the restored intermediate) and the final output.
    pub fn forward_train(&mut self, x: &Tensor<S>) -> (Tensor<S>, Tensor<S>) {
        match self.config.variant.order {
            StageOrder::CoarseFirst => {
                let rest = self.coarse.forward(x);
                let out = self.correction.forward(&rest);
                (rest, out)
            }
            StageOrder::CorrectFirst => {
                let rest = self.correction.forward(x);
                let out = self.coarse.forward(&rest);
                (rest, out)
            }
            StageOrder::Parallel => {
                let a = self.coarse.forward(x);
                let b = self.correction.forward(x);
                let cat = crate::nn::ops::concat_channels(&[&a, &b]);
                let out = self.merge.as_mut().unwrap().forward(&cat);
                self.merge_cache = Some((a.clone(), b));
                (a, out)
            }
        }
    }

    /// Backward through the composition. `grad_rest` is an optional extra
    /// gradient injected at the first-stage output (stage-1 supervision).
    pub fn backward_train(&mut self, grad_out: &Tensor<S>, grad_rest: Option<&Tensor<S>>) -> Tensor<S> {
        match self.config.variant.order {
            StageOrder::CoarseFirst => {
                let mut g = self.correction.backward(grad_out);
                if let Some(extra) = grad_rest {
                    g = g + extra;
                }
                self.coarse.backward(&g)
            }
            StageOrder::CorrectFirst => {
                let mut g = self.coarse.backward(grad_out);
                if let Some(extra) = grad_rest {
                    g = g + extra;
                }
                self.correction.backward(&g)
            }
            StageOrder::Parallel => {
                let gcat = self.merge.as_mut().unwrap().backward(grad_out);
                let parts = crate::nn::ops::split_channels(&gcat, &[3, 3]);
                self.merge_cache = None;
                let mut ga = parts[0].clone();
                if let Some(extra) = grad_rest {
                    ga = ga + extra;
                }
                self.coarse.backward(&ga) + self.correction.backward(&parts[1])
            }
        }
    }

    /// Full pipeline on a raw mosaic: extend, reflection-pad to the pad
    /// multiple, run both stages, crop back, clamp to [0, 1].
    pub fn forward_raw(&mut self, raw: &RawImage) -> Result<RgbImage> {
        let extended = extend_to_rgb(raw);
        let (h, w) = (extended.height(), extended.width());
        let x = rgb_to_tensor::<S>(&extended);
        let xp = reflect_pad_to_multiple(&x, self.config.pad_multiple);
        let (_, out) = self.forward_train(&xp);
        let cropped = out.slice(ndarray::s![.., .., ..h, ..w]).to_owned();
        tensor_to_rgb(&cropped)
    }

    /// Tiled inference with overlap feathering; tile offsets stay on the
    /// 4-pixel CFA grid so every tile sees the same pattern phase.
    pub fn forward_raw_tiled(&mut self, raw: &RawImage, tile: usize, overlap: usize) -> Result<RgbImage> {
        if tile % 8 != 0 || overlap % 4 != 0 || overlap >= tile {
            return Err(Error::config(format!(
                "invalid tiling: tile {tile} (multiple of 8), overlap {overlap} (multiple of 4, < tile)"
            )));
        }
        let (h, w) = (raw.height(), raw.width());
        if h <= tile && w <= tile {
            return self.forward_raw(raw);
        }
        let step = tile - overlap;
        let starts = |len: usize| -> Vec<usize> {
            if len <= tile {
                return vec![0];
            }
            let mut v = Vec::new();
            let mut s = 0;
            loop {
                if s + tile >= len {
                    v.push(len - tile);
                    break;
                }
                v.push(s);
                s += step;
            }
            v
        };
        let mut acc = Array3::<f32>::zeros((3, h, w));
        let mut wsum = ndarray::Array2::<f32>::zeros((h, w));
        let th = tile.min(h);
        let tw = tile.min(w);
        let feather = |i: usize, len: usize| -> f32 {
            let d = (i.min(len - 1 - i) + 1).min(overlap + 1);
            d as f32 / (overlap + 1) as f32
        };
        for &r0 in &starts(h) {
            for &c0 in &starts(w) {
                let sub = raw
                    .values()
                    .slice(ndarray::s![r0..r0 + th, c0..c0 + tw])
                    .to_owned();
                let sub_raw = RawImage::new(sub, raw.pattern().clone())?;
                let pred = self.forward_raw(&sub_raw)?;
                for i in 0..th {
                    let wi = feather(i, th);
                    for j in 0..tw {
                        let wgt = wi * feather(j, tw);
                        wsum[[r0 + i, c0 + j]] += wgt;
                        for ch in 0..3 {
                            acc[[ch, r0 + i, c0 + j]] += wgt * pred.data()[[ch, i, j]];
                        }
                    }
                }
            }
        }
        for i in 0..h {
            for j in 0..w {
                let s = wsum[[i, j]];
                for ch in 0..3 {
                    acc[[ch, i, j]] /= s;
                }
            }
        }
        RgbImage::from_unclamped(acc)
    }
}

/// Converts a [0,1] RGB image to a batch-1 tensor.
pub fn rgb_to_tensor<S: Scalar>(img: &RgbImage) -> Tensor<S> {
    let (h, w) = (img.height(), img.width());
    let mut t = Array4::zeros((1, 3, h, w));
    for ch in 0..3 {
        for i in 0..h {
            for j in 0..w {
                t[[0, ch, i, j]] = S::from_f64(img.data()[[ch, i, j]] as f64);
            }
        }
    }
    t
}

/// Converts a batch-1 tensor back to a clamped RGB image.
pub fn tensor_to_rgb<S: Scalar>(t: &Tensor<S>) -> Result<RgbImage> {
    let (n, c, h, w) = t.dim();
    if n != 1 || c != 3 {
        return Err(Error::shape(format!("expected (1,3,H,W) tensor, got {:?}", t.dim())));
    }
    let mut data = Array3::zeros((3, h, w));
    for ch in 0..3 {
        for i in 0..h {
            for j in 0..w {
                data[[ch, i, j]] = t[[0, ch, i, j]].to_f64_() as f32;
            }
        }
    }
    RgbImage::from_unclamped(data)
}

/// Reflection-pads the bottom/right edges up to the next multiple.
pub fn reflect_pad_to_multiple<S: Scalar>(x: &Tensor<S>, multiple: usize) -> Tensor<S> {
    let (n, c, h, w) = x.dim();
    let hp = h.div_ceil(multiple) * multiple;
    let wp = w.div_ceil(multiple) * multiple;
    if hp == h && wp == w {
        return x.clone();
    }
    let mut out = Array4::zeros((n, c, hp, wp));
    let reflect = |i: usize, len: usize| -> usize {
        if i < len {
            i
        } else {
            // mirror about the last sample without repeating it
            let over = i - len + 1;
            len.saturating_sub(1 + over).min(len - 1)
        }
    };
    for b in 0..n {
        for ch in 0..c {
            for i in 0..hp {
                let si = reflect(i, h);
                for j in 0..wp {
                    out[[b, ch, i, j]] = x[[b, ch, si, reflect(j, w)]];
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coarse::CoarseNetConfig;
    use crate::correction::CorrectionNetConfig;
    use crate::pattern::PatternSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_config(variant: PipelineVariant) -> DemosaicFormerConfig {
        DemosaicFormerConfig {
            coarse: CoarseNetConfig {
                channels: 4,
                n_rrg: 1,
                n_dab: 1,
                ca_reduction: 2,
                sa_kernel: 3,
            },
            correction: CorrectionNetConfig {
                base_dim: 4,
                blocks_per_level: [1, 1, 1, 1],
                refinement_blocks: 1,
                heads_per_level: [1, 2, 2, 4],
                ffn_expansion: 2.0,
                fusion_mode: variant.fusion,
                sequential_gates: false,
            },
            variant,
            pad_multiple: 8,
        }
    }

    fn random_raw(h: usize, w: usize, seed: u64) -> RawImage {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut raw = RawImage::zeros(h, w, PatternSpec::default_hybridevs()).unwrap();
        for v in raw.values_mut().iter_mut() {
            *v = rng.gen_range(0..=1023);
        }
        raw
    }

    #[test]
    fn zero_init_forward_equals_extend() {
        let mut model = DemosaicFormer::<f32>::new(tiny_config(PipelineVariant::default())).unwrap();
        let raw = random_raw(16, 16, 1);
        let out = model.forward_raw(&raw).unwrap();
        let extended = extend_to_rgb(&raw);
        assert_eq!(out.data(), extended.data());
    }

    #[test]
    fn odd_sizes_pad_and_crop_back() {
        // 20x12 is not a multiple of 8; padding must be transparent
        let mut model = DemosaicFormer::<f32>::new(tiny_config(PipelineVariant::default())).unwrap();
        let raw = random_raw(20, 12, 2);
        let out = model.forward_raw(&raw).unwrap();
        assert_eq!((out.height(), out.width()), (20, 12));
        assert_eq!(out.data(), extend_to_rgb(&raw).data());
    }

    #[test]
    fn all_variants_construct_and_run() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for order in [StageOrder::CoarseFirst, StageOrder::CorrectFirst, StageOrder::Parallel] {
            for fusion in [FusionMode::Msgm, FusionMode::SimpleConcat, FusionMode::SingleGate] {
                let variant = PipelineVariant { order, fusion };
                let mut model = DemosaicFormer::<f32>::new(tiny_config(variant)).unwrap();
                model.randomize(&mut rng);
                let raw = random_raw(64, 64, 4);
                let out = model.forward_raw(&raw).unwrap();
                assert_eq!((out.height(), out.width()), (64, 64), "{}", variant.name());
            }
        }
    }

    #[test]
    fn full_default_param_count_in_band() {
        let mut model = DemosaicFormer::<f32>::new(DemosaicFormerConfig::default()).unwrap();
        let count = model.param_count();
        assert!(
            (27_000_000..=33_000_000).contains(&count),
            "full params {count} outside [27M, 33M]"
        );
    }

    #[test]
    fn forward_is_deterministic() {
        let mut model = DemosaicFormer::<f32>::new(tiny_config(PipelineVariant::default())).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        model.randomize(&mut rng);
        let raw = random_raw(16, 16, 6);
        let a = model.forward_raw(&raw).unwrap();
        let b = model.forward_raw(&raw).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn reflect_pad_shape_and_border() {
        let mut x = Array4::<f32>::zeros((1, 1, 5, 6));
        for (i, v) in x.iter_mut().enumerate() {
            *v = i as f32;
        }
        let y = reflect_pad_to_multiple(&x, 8);
        assert_eq!(y.dim(), (1, 1, 8, 8));
        // row 5 mirrors row 3, row 6 mirrors row 2
        assert_eq!(y[[0, 0, 5, 0]], x[[0, 0, 3, 0]]);
        assert_eq!(y[[0, 0, 6, 0]], x[[0, 0, 2, 0]]);
        assert_eq!(y[[0, 0, 0, 6]], x[[0, 0, 0, 4]]);
    }
}
