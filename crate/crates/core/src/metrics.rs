//! Reference metrics: PSNR (computed after 8-bit quantization, capped at
//! 100 dB for identical images), SSIM with the standard 11x11 Gaussian
//! window, residual-map visualization, and directory-level evaluation.

use std::collections::BTreeSet;
use std::path::Path;

use ndarray::Array2;

use crate::codec::read_png;
use crate::error::{Error, Result};
use crate::image::RgbImage;

pub const PSNR_CAP_DB: f64 = 100.0;

/// 10·log10(1/MSE) over all pixel-channel entries after both images are
/// quantized to 8 bits; identical quantized images return the 100 dB cap.
pub fn psnr(pred: &RgbImage, gt: &RgbImage) -> Result<f64> {
    if pred.data().shape() != gt.data().shape() {
        return Err(Error::shape(format!(
            "psnr: shape {:?} vs {:?}",
            pred.data().shape(),
            gt.data().shape()
        )));
    }
    let p = pred.quantize8();
    let g = gt.quantize8();
    let mut sq = 0.0f64;
    for (&a, &b) in p.iter().zip(g.iter()) {
        let d = (a as f64 - b as f64) / 255.0;
        sq += d * d;
    }
    let mse = sq / p.len() as f64;
    if mse == 0.0 {
        Ok(PSNR_CAP_DB)
    } else {
        Ok(10.0 * (1.0 / mse).log10())
    }
}

fn gaussian_window() -> Vec<f64> {
    let sigma = 1.5f64;
    let mut w: Vec<f64> = (0..11)
        .map(|i| {
            let d = i as f64 - 5.0;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Separable Gaussian filtering with valid-region output (H-10, W-10).
fn filter_valid(img: &Array2<f64>, win: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let mut rows = Array2::<f64>::zeros((h, w - 10));
    for r in 0..h {
        for c in 0..w - 10 {
            let mut acc = 0.0;
            for (k, &wk) in win.iter().enumerate() {
                acc += wk * img[[r, c + k]];
            }
            rows[[r, c]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((h - 10, w - 10));
    for r in 0..h - 10 {
        for c in 0..w - 10 {
            let mut acc = 0.0;
            for (k, &wk) in win.iter().enumerate() {
                acc += wk * rows[[r + k, c]];
            }
            out[[r, c]] = acc;
        }
    }
    out
}

/// Mean SSIM over the three channels; 11x11 Gaussian window sigma = 1.5,
/// K1 = 0.01, K2 = 0.03, dynamic range 1.0.
pub fn ssim(pred: &RgbImage, gt: &RgbImage) -> Result<f64> {
    if pred.data().shape() != gt.data().shape() {
        return Err(Error::shape(format!(
            "ssim: shape {:?} vs {:?}",
            pred.data().shape(),
            gt.data().shape()
        )));
    }
    let (h, w) = (pred.height(), pred.width());
    if h < 11 || w < 11 {
        return Err(Error::shape(format!(
            "ssim: image {h}x{w} smaller than the 11x11 window"
        )));
    }
    let win = gaussian_window();
    let c1 = (0.01f64).powi(2);
    let c2 = (0.03f64).powi(2);
    let mut total = 0.0;
    for ch in 0..3 {
        let a = pred.data().index_axis(ndarray::Axis(0), ch).mapv(|v| v as f64);
        let b = gt.data().index_axis(ndarray::Axis(0), ch).mapv(|v| v as f64);
        let mu_a = filter_valid(&a, &win);
        let mu_b = filter_valid(&b, &win);
        let aa = filter_valid(&(&a * &a), &win);
        let bb = filter_valid(&(&b * &b), &win);
        let ab = filter_valid(&(&a * &b), &win);
        let mut sum = 0.0;
        let n = mu_a.len();
        for idx in 0..n {
            let ma = mu_a.as_slice().unwrap()[idx];
            let mb = mu_b.as_slice().unwrap()[idx];
            let va = aa.as_slice().unwrap()[idx] - ma * ma;
            let vb = bb.as_slice().unwrap()[idx] - mb * mb;
            let cov = ab.as_slice().unwrap()[idx] - ma * mb;
            let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
            let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
            sum += num / den;
        }
        total += sum / n as f64;
    }
    Ok(total / 3.0)
}

/// Per-pixel mean-over-channels absolute error scaled by `gain`, clamped to
/// [0, 1] ("brighter means bigger error").
pub fn residual_map(pred: &RgbImage, gt: &RgbImage, gain: f32) -> Result<Array2<f32>> {
    if pred.data().shape() != gt.data().shape() {
        return Err(Error::shape(format!(
            "residual_map: shape {:?} vs {:?}",
            pred.data().shape(),
            gt.data().shape()
        )));
    }
    let (h, w) = (pred.height(), pred.width());
    let mut out = Array2::<f32>::zeros((h, w));
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0f32;
            for ch in 0..3 {
                acc += (pred.data()[[ch, r, c]] - gt.data()[[ch, r, c]]).abs();
            }
            out[[r, c]] = (acc / 3.0 * gain).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub per_image: Vec<(String, f64, f64)>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub config_snapshot: String,
}

impl MetricReport {
    pub fn from_entries(per_image: Vec<(String, f64, f64)>, config_snapshot: String) -> Result<Self> {
        if per_image.is_empty() {
            return Err(Error::config("empty metric report: no image pairs found"));
        }
        let n = per_image.len() as f64;
        let mean_psnr = per_image.iter().map(|e| e.1).sum::<f64>() / n;
        let mean_ssim = per_image.iter().map(|e| e.2).sum::<f64>() / n;
        Ok(MetricReport {
            per_image,
            mean_psnr,
            mean_ssim,
            config_snapshot,
        })
    }

    /// Tab-separated table: header, one row per image, aggregate row.
    pub fn to_table(&self) -> String {
        let mut s = String::from("id\tpsnr_db\tssim\n");
        for (id, p, q) in &self.per_image {
            s.push_str(&format!("{id}\t{p:.4}\t{q:.6}\n"));
        }
        s.push_str(&format!(
            "mean\t{:.4}\t{:.6}\n",
            self.mean_psnr, self.mean_ssim
        ));
        s
    }
}

fn png_stems(dir: &Path) -> Result<BTreeSet<String>> {
    let mut out = BTreeSet::new();
    let entries =
        std::fs::read_dir(dir).map_err(|e| Error::io(format!("read dir {}", dir.display()), e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(format!("read dir {}", dir.display()), e))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            let name = path.file_stem().unwrap().to_string_lossy().into_owned();
            // skip residual-map side outputs from earlier runs
            if !name.ends_with(".residual") {
                out.insert(name);
            }
        }
    }
    Ok(out)
}

/// Evaluates every prediction PNG against the ground-truth PNG of the same
/// filename; ids are sorted so the report ordering is deterministic.
pub fn evaluate_dir(pred_dir: &Path, gt_dir: &Path) -> Result<MetricReport> {
    let preds = png_stems(pred_dir)?;
    let gts = png_stems(gt_dir)?;
    for id in preds.difference(&gts) {
        return Err(Error::Pairing {
            id: id.clone(),
            dir: gt_dir.to_path_buf(),
        });
    }
    for id in gts.difference(&preds) {
        return Err(Error::Pairing {
            id: id.clone(),
            dir: pred_dir.to_path_buf(),
        });
    }
    let mut per_image = Vec::new();
    for id in &preds {
        let p = read_png(&pred_dir.join(format!("{id}.png")))?;
        let g = read_png(&gt_dir.join(format!("{id}.png")))?;
        per_image.push((id.clone(), psnr(&p, &g)?, ssim(&p, &g)?));
    }
    MetricReport::from_entries(
        per_image,
        format!("pred={} gt={}", pred_dir.display(), gt_dir.display()),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> RgbImage {
        let data = Array3::from_shape_fn((3, h, w), |_| rng.gen::<f32>());
        RgbImage::new(data).unwrap()
    }

    #[test]
    fn psnr_identity_cap_and_uniform_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_image(&mut rng, 16, 16);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);

        // uniform error of exactly one 8-bit code after quantization
        let base = Array3::from_elem((3, 16, 16), 100.0 / 255.0);
        let off = Array3::from_elem((3, 16, 16), 101.0 / 255.0);
        let p = psnr(
            &RgbImage::new(base).unwrap(),
            &RgbImage::new(off).unwrap(),
        )
        .unwrap();
        let expect = 20.0 * 255.0f64.log10();
        assert!((p - expect).abs() < 1e-6, "psnr {p} vs {expect}");

        // all-zeros vs all-ones: MSE = 1 so PSNR = 0
        let zero = RgbImage::new(Array3::zeros((3, 12, 12))).unwrap();
        let one = RgbImage::new(Array3::from_elem((3, 12, 12), 1.0)).unwrap();
        assert!(psnr(&zero, &one).unwrap().abs() < 1e-12);
    }

    #[test]
    fn psnr_decreases_with_noise_amplitude() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gt = random_image(&mut rng, 24, 24);
        let mut prev = f64::INFINITY;
        for amp in [0.02f32, 0.05, 0.1] {
            let noisy = RgbImage::from_unclamped(
                gt.data() + &Array3::from_shape_fn((3, 24, 24), |_| (rng.gen::<f32>() - 0.5) * 2.0 * amp),
            )
            .unwrap();
            let p = psnr(&noisy, &gt).unwrap();
            assert!(p < prev, "psnr should fall as noise grows");
            prev = p;
        }
    }

    #[test]
    fn ssim_identity_symmetry_and_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let a = random_image(&mut rng, 16, 20);
            let b = random_image(&mut rng, 16, 20);
            assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
            let ab = ssim(&a, &b).unwrap();
            let ba = ssim(&b, &a).unwrap();
            assert!((ab - ba).abs() < 1e-12);
            assert!((-1.0..=1.0).contains(&ab));
        }
    }

    #[test]
    fn ssim_anticorrelated_is_negative() {
        // checkerboard vs its inverse: structure term is -1
        let a = Array3::from_shape_fn((3, 16, 16), |(_, r, c)| ((r + c) % 2) as f32);
        let b = a.mapv(|v| 1.0 - v);
        let s = ssim(&RgbImage::new(a).unwrap(), &RgbImage::new(b).unwrap()).unwrap();
        assert!(s < 0.0, "ssim {s}");
    }

    #[test]
    fn ssim_constant_images_equal_means() {
        let a = RgbImage::new(Array3::from_elem((3, 12, 12), 0.4)).unwrap();
        let b = RgbImage::new(Array3::from_elem((3, 12, 12), 0.4)).unwrap();
        assert!((ssim(&a, &b).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = RgbImage::new(Array3::zeros((3, 8, 8))).unwrap();
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn residual_map_examples() {
        let gt = RgbImage::new(Array3::from_elem((3, 4, 4), 0.5)).unwrap();
        assert_eq!(residual_map(&gt, &gt, 10.0).unwrap().sum(), 0.0);

        let mut pred = gt.clone();
        for ch in 0..3 {
            pred.data_mut()[[ch, 1, 2]] += 0.1;
        }
        let m = residual_map(&pred, &gt, 10.0).unwrap();
        assert!((m[[1, 2]] - 1.0).abs() < 1e-5);
        assert_eq!(m.sum(), m[[1, 2]]);

        // gain monotonicity
        let lo = residual_map(&pred, &gt, 2.0).unwrap();
        let hi = residual_map(&pred, &gt, 4.0).unwrap();
        for (a, b) in lo.iter().zip(hi.iter()) {
            assert!(b >= a);
        }
    }

    #[test]
    fn evaluate_dir_self_pairs_and_pairing_error() {
        use crate::codec::write_png;
        let dir = tempfile::tempdir().unwrap();
        let pred = dir.path().join("pred");
        let gt = dir.path().join("gt");
        std::fs::create_dir_all(&pred).unwrap();
        std::fs::create_dir_all(&gt).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for id in ["a", "b"] {
            let img = random_image(&mut rng, 16, 16);
            write_png(&img, &pred.join(format!("{id}.png"))).unwrap();
            write_png(&img, &gt.join(format!("{id}.png"))).unwrap();
        }
        let report = evaluate_dir(&pred, &gt).unwrap();
        assert_eq!(report.per_image.len(), 2);
        assert_eq!(report.mean_psnr, PSNR_CAP_DB);
        assert!((report.mean_ssim - 1.0).abs() < 1e-12);
        assert!(report.to_table().contains("mean\t100.0000\t1.000000"));

        // missing counterpart names the id
        std::fs::remove_file(gt.join("b.png")).unwrap();
        match evaluate_dir(&pred, &gt) {
            Err(Error::Pairing { id, .. }) => assert_eq!(id, "b"),
            other => panic!("expected pairing error, got {other:?}"),
        }

        // empty directories
        let empty1 = dir.path().join("e1");
        let empty2 = dir.path().join("e2");
        std::fs::create_dir_all(&empty1).unwrap();
        std::fs::create_dir_all(&empty2).unwrap();
        assert!(evaluate_dir(&empty1, &empty2).is_err());
    }
}
