//! Classical baselines used as comparison anchors: per-channel bilinear
//! interpolation from same-color sample positions, and a nearest-sample
//! fill. Both ignore event and defect pixels beyond the fact that event
//! positions carry no color sample.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::image::{RawImage, RgbImage, RAW_MAX};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    BilinearDemosaic,
    NearestFill,
}

impl BaselineKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "bilinear_demosaic" | "bilinear" => Ok(BaselineKind::BilinearDemosaic),
            "nearest_fill" | "nearest" => Ok(BaselineKind::NearestFill),
            other => Err(Error::config(format!("unknown baseline kind '{other}'"))),
        }
    }

    pub fn apply(self, raw: &RawImage) -> RgbImage {
        match self {
            BaselineKind::BilinearDemosaic => bilinear_baseline(raw),
            BaselineKind::NearestFill => nearest_fill(raw),
        }
    }
}

/// Known same-channel samples for one channel: value plane plus mask.
fn channel_samples(raw: &RawImage, channel: usize) -> (Array2<f32>, Array2<bool>) {
    let (h, w) = (raw.height(), raw.width());
    let mut vals = Array2::<f32>::zeros((h, w));
    let mut known = Array2::<bool>::from_elem((h, w), false);
    for r in 0..h {
        for c in 0..w {
            let color = raw.pattern().color_at(r, c);
            if color.channel() == Some(channel) {
                vals[[r, c]] = raw.values()[[r, c]] as f32 / RAW_MAX as f32;
                known[[r, c]] = true;
            }
        }
    }
    (vals, known)
}

/// 1-D pass: linearly interpolates between known entries of each lane (row or
/// column); positions outside the known span take the nearest known value.
/// Lanes with no known entry are left unfilled. Every produced value is a
/// convex combination of known entries.
fn interp_lane(vals: &mut [f32], known: &mut [bool], linear: bool) {
    let idx: Vec<usize> = (0..vals.len()).filter(|&i| known[i]).collect();
    if idx.is_empty() {
        return;
    }
    for i in 0..vals.len() {
        if known[i] {
            continue;
        }
        let next = idx.partition_point(|&k| k < i);
        let (lo, hi) = (next.checked_sub(1).map(|j| idx[j]), idx.get(next).copied());
        vals[i] = match (lo, hi) {
            (Some(a), Some(b)) => {
                if linear {
                    let t = (i - a) as f32 / (b - a) as f32;
                    vals[a] * (1.0 - t) + vals[b] * t
                } else if i - a <= b - i {
                    vals[a]
                } else {
                    vals[b]
                }
            }
            (Some(a), None) => vals[a],
            (None, Some(b)) => vals[b],
            (None, None) => unreachable!(),
        };
    }
    known.iter_mut().for_each(|k| *k = true);
}

fn fill_channel(raw: &RawImage, channel: usize, linear: bool) -> Array2<f32> {
    let (h, w) = (raw.height(), raw.width());
    let (mut vals, mut known) = channel_samples(raw, channel);
    // horizontal pass over rows that carry samples
    for r in 0..h {
        let mut row_vals: Vec<f32> = (0..w).map(|c| vals[[r, c]]).collect();
        let mut row_known: Vec<bool> = (0..w).map(|c| known[[r, c]]).collect();
        if row_known.iter().any(|&k| k) {
            interp_lane(&mut row_vals, &mut row_known, linear);
            for c in 0..w {
                vals[[r, c]] = row_vals[c];
                known[[r, c]] = true;
            }
        }
    }
    // vertical pass over all columns using the filled rows
    for c in 0..w {
        let mut col_vals: Vec<f32> = (0..h).map(|r| vals[[r, c]]).collect();
        let mut col_known: Vec<bool> = (0..h).map(|r| known[[r, c]]).collect();
        interp_lane(&mut col_vals, &mut col_known, linear);
        for r in 0..h {
            vals[[r, c]] = col_vals[r];
        }
    }
    vals
}

/// Event- and defect-agnostic bilinear interpolation per channel using only
/// same-color sample positions.
pub fn bilinear_baseline(raw: &RawImage) -> RgbImage {
    let (h, w) = (raw.height(), raw.width());
    let mut data = ndarray::Array3::<f32>::zeros((3, h, w));
    for ch in 0..3 {
        let plane = fill_channel(raw, ch, true);
        data.index_axis_mut(ndarray::Axis(0), ch).assign(&plane);
    }
    RgbImage::from_unclamped(data).unwrap()
}

/// Each output entry takes the value of the nearest same-channel sample
/// (row pass first, then column pass).
pub fn nearest_fill(raw: &RawImage) -> RgbImage {
    let (h, w) = (raw.height(), raw.width());
    let mut data = ndarray::Array3::<f32>::zeros((3, h, w));
    for ch in 0..3 {
        let plane = fill_channel(raw, ch, false);
        data.index_axis_mut(ndarray::Axis(0), ch).assign(&plane);
    }
    RgbImage::from_unclamped(data).unwrap()
}
