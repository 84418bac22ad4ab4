//! Stateless tensor kernels and their backward companions. Composite
//! modules wire these together and keep whatever caches the backward
//! formulas need.

use ndarray::parallel::prelude::*;
use ndarray::{Array3, Array4, Axis, Zip};

use crate::nn::Tensor;
use crate::num::Scalar;

// ---------------------------------------------------------------- channels

pub fn concat_channels<S: Scalar>(parts: &[&Tensor<S>]) -> Tensor<S> {
    let (n, _, h, w) = parts[0].dim();
    let total: usize = parts.iter().map(|p| p.dim().1).sum();
    let mut out = Array4::zeros((n, total, h, w));
    let mut off = 0;
    for p in parts {
        let c = p.dim().1;
        out.slice_mut(ndarray::s![.., off..off + c, .., ..]).assign(p);
        off += c;
    }
    out
}

pub fn split_channels<S: Scalar>(x: &Tensor<S>, sizes: &[usize]) -> Vec<Tensor<S>> {
    let mut out = Vec::with_capacity(sizes.len());
    let mut off = 0;
    for &c in sizes {
        out.push(x.slice(ndarray::s![.., off..off + c, .., ..]).to_owned());
        off += c;
    }
    out
}

// ---------------------------------------------------------------- pooling

/// Global average pool to (N, C, 1, 1).
pub fn global_avg_pool<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let (n, c, h, w) = x.dim();
    let scale = S::from_f64(1.0 / (h * w) as f64);
    let mut out = Array4::zeros((n, c, 1, 1));
    for b in 0..n {
        for ch in 0..c {
            out[[b, ch, 0, 0]] = x.index_axis(Axis(0), b).index_axis(Axis(0), ch).sum() * scale;
        }
    }
    out
}

pub fn global_avg_pool_backward<S: Scalar>(gy: &Tensor<S>, h: usize, w: usize) -> Tensor<S> {
    let (n, c, _, _) = gy.dim();
    let scale = S::from_f64(1.0 / (h * w) as f64);
    let mut gx = Array4::zeros((n, c, h, w));
    for b in 0..n {
        for ch in 0..c {
            let g = gy[[b, ch, 0, 0]] * scale;
            gx.slice_mut(ndarray::s![b, ch, .., ..]).fill(g);
        }
    }
    gx
}

/// Per-position mean over channels, (N, 1, H, W).
pub fn channel_mean<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let (n, c, h, w) = x.dim();
    let scale = S::from_f64(1.0 / c as f64);
    let mut out = Array4::zeros((n, 1, h, w));
    for b in 0..n {
        for ch in 0..c {
            let xc = x.slice(ndarray::s![b, ch, .., ..]);
            let mut oc = out.slice_mut(ndarray::s![b, 0, .., ..]);
            Zip::from(&mut oc).and(&xc).for_each(|o, &v| *o = *o + v * scale);
        }
    }
    out
}

pub fn channel_mean_backward<S: Scalar>(gy: &Tensor<S>, c: usize) -> Tensor<S> {
    let (n, _, h, w) = gy.dim();
    let scale = S::from_f64(1.0 / c as f64);
    let mut gx = Array4::zeros((n, c, h, w));
    for b in 0..n {
        for ch in 0..c {
            let mut gc = gx.slice_mut(ndarray::s![b, ch, .., ..]);
            let gv = gy.slice(ndarray::s![b, 0, .., ..]);
            Zip::from(&mut gc).and(&gv).for_each(|g, &v| *g = v * scale);
        }
    }
    gx
}

/// Per-position max over channels, plus argmax for the backward route.
pub fn channel_max<S: Scalar>(x: &Tensor<S>) -> (Tensor<S>, Array3<usize>) {
    let (n, c, h, w) = x.dim();
    let mut out = Array4::zeros((n, 1, h, w));
    let mut arg = Array3::zeros((n, h, w));
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                let mut best = x[[b, 0, i, j]];
                let mut besti = 0;
                for ch in 1..c {
                    let v = x[[b, ch, i, j]];
                    if v > best {
                        best = v;
                        besti = ch;
                    }
                }
                out[[b, 0, i, j]] = best;
                arg[[b, i, j]] = besti;
            }
        }
    }
    (out, arg)
}

pub fn channel_max_backward<S: Scalar>(gy: &Tensor<S>, arg: &Array3<usize>, c: usize) -> Tensor<S> {
    let (n, _, h, w) = gy.dim();
    let mut gx = Array4::zeros((n, c, h, w));
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                gx[[b, arg[[b, i, j]], i, j]] = gy[[b, 0, i, j]];
            }
        }
    }
    gx
}

/// 2x2 average pooling (dims must be even).
pub fn avg_pool2<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let (n, c, h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even dims");
    let q = S::from_f64(0.25);
    let mut out = Array4::zeros((n, c, h / 2, w / 2));
    for b in 0..n {
        for ch in 0..c {
            for i in 0..h / 2 {
                for j in 0..w / 2 {
                    out[[b, ch, i, j]] = (x[[b, ch, 2 * i, 2 * j]]
                        + x[[b, ch, 2 * i, 2 * j + 1]]
                        + x[[b, ch, 2 * i + 1, 2 * j]]
                        + x[[b, ch, 2 * i + 1, 2 * j + 1]])
                        * q;
                }
            }
        }
    }
    out
}

pub fn avg_pool2_backward<S: Scalar>(gy: &Tensor<S>) -> Tensor<S> {
    let (n, c, h2, w2) = gy.dim();
    let q = S::from_f64(0.25);
    let mut gx = Array4::zeros((n, c, h2 * 2, w2 * 2));
    for b in 0..n {
        for ch in 0..c {
            for i in 0..h2 {
                for j in 0..w2 {
                    let g = gy[[b, ch, i, j]] * q;
                    for (u, v) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        gx[[b, ch, 2 * i + u, 2 * j + v]] = g;
                    }
                }
            }
        }
    }
    gx
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample_nearest2<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let (n, c, h, w) = x.dim();
    let mut out = Array4::zeros((n, c, h * 2, w * 2));
    for b in 0..n {
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let v = x[[b, ch, i, j]];
                    for (u, t) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        out[[b, ch, 2 * i + u, 2 * j + t]] = v;
                    }
                }
            }
        }
    }
    out
}

pub fn upsample_nearest2_backward<S: Scalar>(gy: &Tensor<S>) -> Tensor<S> {
    let (n, c, h2, w2) = gy.dim();
    let mut gx = Array4::zeros((n, c, h2 / 2, w2 / 2));
    for b in 0..n {
        for ch in 0..c {
            for i in 0..h2 / 2 {
                for j in 0..w2 / 2 {
                    let mut acc = S::zero();
                    for (u, t) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        acc = acc + gy[[b, ch, 2 * i + u, 2 * j + t]];
                    }
                    gx[[b, ch, i, j]] = acc;
                }
            }
        }
    }
    gx
}

// ------------------------------------------------------ pixel (un)shuffle

/// Space-to-depth, factor 2: (N,C,H,W) -> (N,4C,H/2,W/2). Output channel
/// order is c*4 + 2u + v for source offset (u, v).
pub fn pixel_unshuffle2<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let (n, c, h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "pixel_unshuffle2 needs even dims");
    let mut out = Array4::zeros((n, c * 4, h / 2, w / 2));
    for b in 0..n {
        for ch in 0..c {
            for i in 0..h / 2 {
                for j in 0..w / 2 {
                    for (u, v) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        out[[b, ch * 4 + 2 * u + v, i, j]] = x[[b, ch, 2 * i + u, 2 * j + v]];
                    }
                }
            }
        }
    }
    out
}

/// Depth-to-space, factor 2: exact inverse of [`pixel_unshuffle2`].
pub fn pixel_shuffle2<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let (n, c4, h, w) = x.dim();
    assert!(c4 % 4 == 0, "pixel_shuffle2 needs channels divisible by 4");
    let c = c4 / 4;
    let mut out = Array4::zeros((n, c, h * 2, w * 2));
    for b in 0..n {
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    for (u, v) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        out[[b, ch, 2 * i + u, 2 * j + v]] = x[[b, ch * 4 + 2 * u + v, i, j]];
                    }
                }
            }
        }
    }
    out
}

// ------------------------------------------------------------- attention

/// Reshape (N, heads*c, H, W) -> (N, heads, c, H*W); contiguous relabel.
pub fn to_heads<S: Scalar>(x: &Tensor<S>, heads: usize) -> Tensor<S> {
    let (n, c, h, w) = x.dim();
    assert_eq!(c % heads, 0);
    x.to_owned()
        .into_shape_with_order((n, heads, c / heads, h * w))
        .expect("contiguous reshape")
}

pub fn from_heads<S: Scalar>(x: &Tensor<S>, h: usize, w: usize) -> Tensor<S> {
    let (n, heads, c, hw) = x.dim();
    assert_eq!(hw, h * w);
    x.to_owned()
        .into_shape_with_order((n, heads * c, h, w))
        .expect("contiguous reshape")
}

/// Batched matmul over the leading two axes, with optional transposes.
pub fn bmm<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, ta: bool, tb: bool) -> Tensor<S> {
    let (n, hd, ar, ac) = a.dim();
    let (bn, bhd, br, bc) = b.dim();
    assert_eq!((n, hd), (bn, bhd));
    let (m, ka) = if ta { (ac, ar) } else { (ar, ac) };
    let (kb, p) = if tb { (bc, br) } else { (br, bc) };
    assert_eq!(ka, kb, "inner dims");
    let mut out = Array4::zeros((n, hd, m, p));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(bi, mut on)| {
            for hi in 0..hd {
                let av = a.index_axis(Axis(0), bi);
                let av = av.index_axis(Axis(0), hi);
                let bv = b.index_axis(Axis(0), bi);
                let bv = bv.index_axis(Axis(0), hi);
                for i in 0..m {
                    for j in 0..p {
                        let mut acc = S::zero();
                        for t in 0..ka {
                            let x = if ta { av[[t, i]] } else { av[[i, t]] };
                            let y = if tb { bv[[j, t]] } else { bv[[t, j]] };
                            acc = acc + x * y;
                        }
                        on[[hi, i, j]] = acc;
                    }
                }
            }
        });
    out
}

/// Softmax over the last axis.
pub fn softmax_lastdim<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let mut y = x.clone();
    for mut lane in y.rows_mut() {
        let max = lane.iter().copied().fold(S::neg_infinity(), S::max);
        let mut sum = S::zero();
        for v in lane.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in lane.iter_mut() {
            *v = *v / sum;
        }
    }
    y
}

/// Backward of softmax given its output `y`.
pub fn softmax_backward<S: Scalar>(y: &Tensor<S>, gy: &Tensor<S>) -> Tensor<S> {
    let mut gx = gy.clone();
    for (mut glane, ylane) in gx.rows_mut().into_iter().zip(y.rows()) {
        let dot: S = glane.iter().zip(ylane.iter()).map(|(&g, &v)| g * v).sum();
        for (g, &v) in glane.iter_mut().zip(ylane.iter()) {
            *g = v * (*g - dot);
        }
    }
    gx
}

/// L2-normalizes each row (last axis) with an epsilon-smoothed norm.
/// Returns the normalized tensor and the raw norms for the backward pass.
pub fn l2_normalize_rows<S: Scalar>(x: &Tensor<S>) -> (Tensor<S>, ndarray::ArrayD<S>) {
    let eps = S::from_f64(1e-12);
    let mut y = x.clone();
    let mut norms = Vec::new();
    for mut lane in y.rows_mut() {
        let norm = lane.iter().map(|&v| v * v).sum::<S>().sqrt();
        norms.push(norm);
        let s = norm + eps;
        for v in lane.iter_mut() {
            *v = *v / s;
        }
    }
    let shape: Vec<usize> = x.shape()[..3].to_vec();
    let norms = ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&shape), norms).unwrap();
    (y, norms)
}

pub fn l2_normalize_rows_backward<S: Scalar>(
    x: &Tensor<S>,
    norms: &ndarray::ArrayD<S>,
    gy: &Tensor<S>,
) -> Tensor<S> {
    let eps = S::from_f64(1e-12);
    let tiny = S::from_f64(1e-20);
    let mut gx = gy.clone();
    let norms_flat: Vec<S> = norms.iter().copied().collect();
    for (lane_idx, (mut glane, xlane)) in gx.rows_mut().into_iter().zip(x.rows()).enumerate() {
        let norm = norms_flat[lane_idx];
        let s = norm + eps;
        let dot: S = glane.iter().zip(xlane.iter()).map(|(&g, &v)| g * v).sum();
        if norm > tiny {
            let coef = dot / (s * s * norm);
            for (g, &v) in glane.iter_mut().zip(xlane.iter()) {
                *g = *g / s - v * coef;
            }
        } else {
            for g in glane.iter_mut() {
                *g = *g / s;
            }
        }
    }
    gx
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
            *v = rng.gen_range(-1.0..1.0);
        }
        t
    }

    #[test]
    fn shuffle_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand4((2, 8, 6, 4), &mut rng);
        assert_eq!(pixel_shuffle2(&pixel_unshuffle2(&x)), x);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand4((1, 2, 3, 5), &mut rng);
        let y = softmax_lastdim(&x);
        for lane in y.rows() {
            let s: f64 = lane.sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand4((1, 1, 2, 4), &mut rng);
        let gy = rand4((1, 1, 2, 4), &mut rng);
        let y = softmax_lastdim(&x);
        let gx = softmax_backward(&y, &gy);
        let h = 1e-6;
        for idx in [[0, 0, 0, 0], [0, 0, 1, 3]] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = ((softmax_lastdim(&xp) * &gy).sum() - (softmax_lastdim(&xm) * &gy).sum())
                / (2.0 * h);
            assert!((gx[idx] - fd).abs() < 1e-8);
        }
    }

    #[test]
    fn l2_normalize_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand4((1, 2, 3, 4), &mut rng);
        let gy = rand4((1, 2, 3, 4), &mut rng);
        let (_, norms) = l2_normalize_rows(&x);
        let gx = l2_normalize_rows_backward(&x, &norms, &gy);
        let h = 1e-7;
        for idx in [[0, 0, 0, 0], [0, 1, 2, 3], [0, 1, 0, 2]] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = ((l2_normalize_rows(&xp).0 * &gy).sum()
                - (l2_normalize_rows(&xm).0 * &gy).sum())
                / (2.0 * h);
            assert!((gx[idx] - fd).abs() < 1e-6, "idx {idx:?}");
        }
    }

    #[test]
    fn bmm_transposes() {
        let a = Array4::from_shape_vec((1, 1, 2, 3), vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Array4::from_shape_vec((1, 1, 3, 2), vec![1., 0., 0., 1., 1., 1.]).unwrap();
        let y = bmm(&a, &b, false, false);
        assert_eq!(y[[0, 0, 0, 0]], 4.0);
        assert_eq!(y[[0, 0, 1, 1]], 11.0);
        let yt = bmm(&a, &a, false, true); // a @ a^T
        assert_eq!(yt[[0, 0, 0, 0]], 14.0);
        assert_eq!(yt[[0, 0, 0, 1]], 32.0);
    }

    #[test]
    fn pool_backwards_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand4((1, 2, 4, 4), &mut rng);
        let gy_gap = rand4((1, 2, 1, 1), &mut rng);
        let gx = global_avg_pool_backward(&gy_gap, 4, 4);
        let h = 1e-6;
        let idx = [0, 1, 2, 3];
        let mut xp = x.clone();
        xp[idx] += h;
        let mut xm = x.clone();
        xm[idx] -= h;
        let fd =
            ((global_avg_pool(&xp) * &gy_gap).sum() - (global_avg_pool(&xm) * &gy_gap).sum())
                / (2.0 * h);
        assert!((gx[idx] - fd).abs() < 1e-9);

        let gy = rand4((1, 2, 2, 2), &mut rng);
        let gxa = avg_pool2_backward(&gy);
        let fd2 = ((avg_pool2(&xp) * &gy).sum() - (avg_pool2(&xm) * &gy).sum()) / (2.0 * h);
        assert!((gxa[idx] - fd2).abs() < 1e-9);
    }
}
