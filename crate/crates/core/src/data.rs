//! Data synthesis and augmentation: geometric transforms of clean RGB
//! images, defect-map harvesting from raw/ground-truth pairs, defect
//! injection, and pattern-aligned patch cropping.

use ndarray::{Array2, Array3, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::image::{mosaic, DefectMap, RawImage, RgbImage, RAW_MAX};
use crate::pattern::PatternSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DefectSource {
    Harvested,
    Synthetic,
}

impl DefectSource {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "harvested" => Ok(DefectSource::Harvested),
            "synthetic" => Ok(DefectSource::Synthetic),
            other => Err(Error::config(format!("unknown defect source '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub flip_h_prob: f64,
    pub flip_v_prob: f64,
    pub rot90_prob: f64,
    pub defect_overlay_prob: f64,
    pub defect_source: DefectSource,
    pub synthetic_defect_density: f64,
    pub rng_seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_h_prob: 0.5,
            flip_v_prob: 0.5,
            rot90_prob: 0.5,
            defect_overlay_prob: 0.5,
            defect_source: DefectSource::Synthetic,
            synthetic_defect_density: 0.001,
            rng_seed: 0,
        }
    }
}

impl AugmentConfig {
    /// All probabilities zeroed: synthesize_pair degenerates to mosaic.
    pub fn disabled() -> Self {
        AugmentConfig {
            flip_h_prob: 0.0,
            flip_v_prob: 0.0,
            rot90_prob: 0.0,
            defect_overlay_prob: 0.0,
            synthetic_defect_density: 0.0,
            ..AugmentConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("flip_h_prob", self.flip_h_prob),
            ("flip_v_prob", self.flip_v_prob),
            ("rot90_prob", self.rot90_prob),
            ("defect_overlay_prob", self.defect_overlay_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} = {p} outside [0, 1]")));
            }
        }
        if !(0.0..=0.05).contains(&self.synthetic_defect_density) {
            return Err(Error::config(format!(
                "synthetic_defect_density = {} outside [0, 0.05]",
                self.synthetic_defect_density
            )));
        }
        Ok(())
    }
}

/// Harvested defect masks sharing one pattern's event geometry.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DefectLibrary {
    pub maps: Vec<DefectMap>,
    pub source_ids: Vec<String>,
}

impl DefectLibrary {
    pub fn push(&mut self, id: String, map: DefectMap) {
        self.source_ids.push(id);
        self.maps.push(map);
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }
}

/// Input mosaic with its clean RGB target.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub input: RawImage,
    pub target: RgbImage,
}

impl SamplePair {
    pub fn new(input: RawImage, target: RgbImage) -> Result<Self> {
        if input.height() != target.height() || input.width() != target.width() {
            return Err(Error::shape(format!(
                "pair dimensions differ: raw {}x{} vs rgb {}x{}",
                input.height(),
                input.width(),
                target.height(),
                target.width()
            )));
        }
        Ok(SamplePair { input, target })
    }
}

/// Mask of non-event positions whose normalized raw sample differs from the
/// mosaicked ground truth by more than `tau`.
pub fn extract_defect_map(
    raw: &RawImage,
    gt: &RgbImage,
    pattern: &PatternSpec,
    tau: f64,
) -> Result<DefectMap> {
    if raw.height() != gt.height() || raw.width() != gt.width() {
        return Err(Error::shape(format!(
            "extract_defect_map: raw {}x{} vs gt {}x{}",
            raw.height(),
            raw.width(),
            gt.height(),
            gt.width()
        )));
    }
    let reference = mosaic(gt, pattern)?;
    let (h, w) = (raw.height(), raw.width());
    let mut mask = Array2::from_elem((h, w), false);
    for r in 0..h {
        for c in 0..w {
            if pattern.is_event(r, c) {
                continue;
            }
            let a = raw.values()[[r, c]] as f64 / RAW_MAX as f64;
            let b = reference.values()[[r, c]] as f64 / RAW_MAX as f64;
            if (a - b).abs() > tau {
                mask[[r, c]] = true;
            }
        }
    }
    DefectMap::new(mask, pattern)
}

/// Replaces every masked sample with a draw from the defect-value model:
/// with probability 0.5 a stuck value from {0, 1023}, otherwise uniform in
/// [0, 1023]. Unmasked positions pass through unchanged.
pub fn inject_defects(raw: &RawImage, map: &DefectMap, rng: &mut impl Rng) -> Result<RawImage> {
    if raw.height() != map.height() || raw.width() != map.width() {
        return Err(Error::shape(format!(
            "inject_defects: raw {}x{} vs map {}x{}",
            raw.height(),
            raw.width(),
            map.height(),
            map.width()
        )));
    }
    let mut values = raw.values().clone();
    for ((r, c), &m) in map.mask().indexed_iter() {
        if m {
            values[[r, c]] = if rng.gen_bool(0.5) {
                if rng.gen_bool(0.5) {
                    0
                } else {
                    RAW_MAX
                }
            } else {
                rng.gen_range(0..=RAW_MAX)
            };
        }
    }
    RawImage::new(values, raw.pattern().clone())
}

/// Uniform random defect mask over non-event positions at the given density.
pub fn synthetic_defect_map(
    height: usize,
    width: usize,
    pattern: &PatternSpec,
    density: f64,
    rng: &mut impl Rng,
) -> DefectMap {
    let mut mask = Array2::from_elem((height, width), false);
    for r in 0..height {
        for c in 0..width {
            if !pattern.is_event(r, c) && rng.gen_bool(density) {
                mask[[r, c]] = true;
            }
        }
    }
    DefectMap::new(mask, pattern).expect("event positions excluded by construction")
}

fn flip_h(img: &RgbImage) -> RgbImage {
    let mut data = img.data().clone();
    data.invert_axis(Axis(2));
    RgbImage::from_unclamped(data).unwrap()
}

fn flip_v(img: &RgbImage) -> RgbImage {
    let mut data = img.data().clone();
    data.invert_axis(Axis(1));
    RgbImage::from_unclamped(data).unwrap()
}

/// Counter-clockwise rotation by `k` quarter turns (k in 1..=3).
fn rot90(img: &RgbImage, k: usize) -> RgbImage {
    let (h, w) = (img.height(), img.width());
    let src = img.data();
    let data = match k % 4 {
        1 => Array3::from_shape_fn((3, w, h), |(ch, r, c)| src[[ch, c, w - 1 - r]]),
        2 => Array3::from_shape_fn((3, h, w), |(ch, r, c)| src[[ch, h - 1 - r, w - 1 - c]]),
        3 => Array3::from_shape_fn((3, w, h), |(ch, r, c)| src[[ch, h - 1 - c, r]]),
        _ => src.clone(),
    };
    RgbImage::from_unclamped(data).unwrap()
}

/// Human-readable record of the transform applied to one sample; one line of
/// the synthesis manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransformDescriptor {
    pub flip_h: bool,
    pub flip_v: bool,
    pub rot90_k: usize,
    pub defect: String,
}

impl std::fmt::Display for TransformDescriptor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "flip_h={} flip_v={} rot90={} defect={}",
            self.flip_h as u8, self.flip_v as u8, self.rot90_k, self.defect
        )
    }
}

/// Fig. 4 loop: geometric augmentation of the ground truth, mosaic through
/// the pattern, and probabilistic defect overlay. Defect maps are drawn
/// post-mosaic and never geometrically transformed.
pub fn synthesize_pair(
    gt: &RgbImage,
    cfg: &AugmentConfig,
    lib: &DefectLibrary,
    pattern: &PatternSpec,
    rng: &mut impl Rng,
) -> Result<(SamplePair, TransformDescriptor)> {
    cfg.validate()?;
    if gt.height() % 4 != 0 || gt.width() % 4 != 0 {
        return Err(Error::shape(format!(
            "gt dimensions {}x{} must be multiples of 4",
            gt.height(),
            gt.width()
        )));
    }
    let do_fh = cfg.flip_h_prob > 0.0 && rng.gen_bool(cfg.flip_h_prob);
    let do_fv = cfg.flip_v_prob > 0.0 && rng.gen_bool(cfg.flip_v_prob);
    let k = if cfg.rot90_prob > 0.0 && rng.gen_bool(cfg.rot90_prob) {
        rng.gen_range(1..=3usize)
    } else {
        0
    };
    let mut target = gt.clone();
    if do_fh {
        target = flip_h(&target);
    }
    if do_fv {
        target = flip_v(&target);
    }
    if k > 0 {
        target = rot90(&target, k);
    }
    let clean = mosaic(&target, pattern)?;
    let (h, w) = (clean.height(), clean.width());
    let overlay = cfg.defect_overlay_prob > 0.0 && rng.gen_bool(cfg.defect_overlay_prob);
    let (input, defect_desc) = if overlay {
        match cfg.defect_source {
            DefectSource::Harvested => {
                if lib.is_empty() {
                    return Err(Error::config(
                        "defect_source = harvested but the defect library is empty",
                    ));
                }
                let fitting: Vec<usize> = (0..lib.maps.len())
                    .filter(|&i| lib.maps[i].height() == h && lib.maps[i].width() == w)
                    .collect();
                if fitting.is_empty() {
                    return Err(Error::config(format!(
                        "no harvested defect map matches {h}x{w}"
                    )));
                }
                let idx = fitting[rng.gen_range(0..fitting.len())];
                (
                    inject_defects(&clean, &lib.maps[idx], rng)?,
                    format!("harvested:{}", lib.source_ids[idx]),
                )
            }
            DefectSource::Synthetic => {
                let map = synthetic_defect_map(h, w, pattern, cfg.synthetic_defect_density, rng);
                let count = map.count();
                (
                    inject_defects(&clean, &map, rng)?,
                    format!("synthetic:{count}"),
                )
            }
        }
    } else {
        (clean, "none".to_string())
    };
    let desc = TransformDescriptor {
        flip_h: do_fh,
        flip_v: do_fv,
        rot90_k: k,
        defect: defect_desc,
    };
    Ok((SamplePair::new(input, target)?, desc))
}

/// Random crop with corners on multiples of 4 so the CFA phase of the patch
/// matches the full image.
pub fn crop_aligned_patch(pair: &SamplePair, size: usize, rng: &mut impl Rng) -> Result<SamplePair> {
    let (h, w) = (pair.input.height(), pair.input.width());
    if size % 4 != 0 || size == 0 {
        return Err(Error::Bounds(format!(
            "patch size {size} must be a positive multiple of 4"
        )));
    }
    if size > h || size > w {
        return Err(Error::Bounds(format!(
            "patch size {size} exceeds image {h}x{w}"
        )));
    }
    let r0 = rng.gen_range(0..=(h - size) / 4) * 4;
    let c0 = rng.gen_range(0..=(w - size) / 4) * 4;
    let raw_vals = pair
        .input
        .values()
        .slice(ndarray::s![r0..r0 + size, c0..c0 + size])
        .to_owned();
    let rgb = pair
        .target
        .data()
        .slice(ndarray::s![.., r0..r0 + size, c0..c0 + size])
        .to_owned();
    SamplePair::new(
        RawImage::new(raw_vals, pair.input.pattern().clone())?,
        RgbImage::from_unclamped(rgb)?,
    )
}
