//! Raw and RGB image data model, plus the mosaic/extend pair that moves
//! between the two spaces.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::pattern::PatternSpec;

/// Maximum sample value of the 10-bit raw domain.
pub const RAW_MAX: u16 = 1023;

/// Single-channel 10-bit mosaic with its CFA pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct RawImage {
    values: Array2<u16>,
    pattern: PatternSpec,
}

impl RawImage {
    pub fn new(values: Array2<u16>, pattern: PatternSpec) -> Result<Self> {
        let (h, w) = values.dim();
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::shape(format!(
                "raw dimensions {h}x{w} must be multiples of 4"
            )));
        }
        if let Some(v) = values.iter().find(|&&v| v > RAW_MAX) {
            return Err(Error::shape(format!("raw sample {v} exceeds {RAW_MAX}")));
        }
        Ok(RawImage { values, pattern })
    }

    pub fn zeros(height: usize, width: usize, pattern: PatternSpec) -> Result<Self> {
        RawImage::new(Array2::zeros((height, width)), pattern)
    }

    pub fn height(&self) -> usize {
        self.values.dim().0
    }

    pub fn width(&self) -> usize {
        self.values.dim().1
    }

    pub fn pattern(&self) -> &PatternSpec {
        &self.pattern
    }

    pub fn values(&self) -> &Array2<u16> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Array2<u16> {
        &mut self.values
    }
}

/// H x W x 3 image with values in [0, 1], stored channel-first.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    /// Layout (3, H, W).
    data: Array3<f32>,
}

impl RgbImage {
    pub fn new(data: Array3<f32>) -> Result<Self> {
        if data.dim().0 != 3 {
            return Err(Error::shape(format!(
                "rgb data must have 3 channels, got {}",
                data.dim().0
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::shape(format!("rgb value {v} outside [0, 1]")));
        }
        Ok(RgbImage { data })
    }

    /// Clamps into [0, 1] instead of rejecting; for network outputs.
    pub fn from_unclamped(mut data: Array3<f32>) -> Result<Self> {
        if data.dim().0 != 3 {
            return Err(Error::shape("rgb data must have 3 channels".to_string()));
        }
        data.mapv_inplace(|v| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 });
        Ok(RgbImage { data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        RgbImage {
            data: Array3::zeros((3, height, width)),
        }
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<f32> {
        &mut self.data
    }

    /// 8-bit quantization, round(clamp(v,0,1)*255).
    pub fn quantize8(&self) -> Array3<u8> {
        self.data.mapv(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
    }

    pub fn from_quantized8(q: &Array3<u8>) -> Result<Self> {
        RgbImage::new(q.mapv(|v| v as f32 / 255.0))
    }
}

/// Boolean per-pixel defect mask. Never true at an event position of the
/// pattern it was built against.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DefectMap {
    mask: Array2<bool>,
}

impl DefectMap {
    pub fn new(mask: Array2<bool>, pattern: &PatternSpec) -> Result<Self> {
        for ((r, c), &m) in mask.indexed_iter() {
            if m && pattern.is_event(r, c) {
                return Err(Error::shape(format!(
                    "defect mask set at event position ({r},{c})"
                )));
            }
        }
        Ok(DefectMap { mask })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        DefectMap {
            mask: Array2::from_elem((height, width), false),
        }
    }

    pub fn height(&self) -> usize {
        self.mask.dim().0
    }

    pub fn width(&self) -> usize {
        self.mask.dim().1
    }

    pub fn mask(&self) -> &Array2<bool> {
        &self.mask
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Lifts a mosaic into sparse RGB space: each non-event pixel places its
/// normalized sample in the channel selected by the CFA, zeros elsewhere;
/// event pixels are zero in all three channels.
pub fn extend_to_rgb(raw: &RawImage) -> RgbImage {
    let (h, w) = (raw.height(), raw.width());
    let mut out = Array3::<f32>::zeros((3, h, w));
    for ((r, c), &v) in raw.values().indexed_iter() {
        if let Some(ch) = raw.pattern().color_at(r, c).channel() {
            out[[ch, r, c]] = v as f32 / RAW_MAX as f32;
        }
    }
    RgbImage { data: out }
}

/// Samples an RGB image through the CFA: each non-event pixel keeps the
/// 10-bit rounded value of its own-color channel; event pixels read 0.
pub fn mosaic(rgb: &RgbImage, pattern: &PatternSpec) -> Result<RawImage> {
    let (h, w) = (rgb.height(), rgb.width());
    let mut values = Array2::<u16>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            if let Some(ch) = pattern.color_at(r, c).channel() {
                let v = rgb.data()[[ch, r, c]].clamp(0.0, 1.0);
                values[[r, c]] = (v * RAW_MAX as f32).round() as u16;
            }
        }
    }
    RawImage::new(values, pattern.clone())
}
