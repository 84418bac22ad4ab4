//! Grouped 2D convolution (stride 1, same padding) with explicit backward.

use ndarray::parallel::prelude::*;
use ndarray::{Array4, ArrayView3, ArrayView4, ArrayViewMut3, Axis, Ix4};

use crate::nn::{kaiming_bound, key, Init, Param, ParamFn, Tensor};
use crate::num::Scalar;

pub struct Conv2d<S: Scalar> {
    pub weight: Param<S>,
    pub bias: Option<Param<S>>,
    in_c: usize,
    out_c: usize,
    k: usize,
    pad: usize,
    groups: usize,
    cache_x: Option<Tensor<S>>,
}

impl<S: Scalar> Conv2d<S> {
    pub fn new(in_c: usize, out_c: usize, k: usize, groups: usize, bias: bool) -> Self {
        assert!(in_c % groups == 0 && out_c % groups == 0, "groups must divide channels");
        let in_per_g = in_c / groups;
        let fan_in = in_per_g * k * k;
        let weight = Param::zeros(&[out_c, in_per_g, k, k], Init::Uniform(kaiming_bound(fan_in)));
        let bias = bias.then(|| Param::zeros(&[out_c], Init::Zero));
        Conv2d {
            weight,
            bias,
            in_c,
            out_c,
            k,
            pad: k / 2,
            groups,
            cache_x: None,
        }
    }

    /// Depth-wise convenience constructor.
    pub fn depthwise(c: usize, k: usize, bias: bool) -> Self {
        Conv2d::new(c, c, k, c, bias)
    }

    pub fn out_channels(&self) -> usize {
        self.out_c
    }

    pub fn forward(&mut self, x: &Tensor<S>) -> Tensor<S> {
        let y = self.infer(x);
        self.cache_x = Some(x.clone());
        y
    }

    /// Forward without caching; for inference paths.
    pub fn infer(&self, x: &Tensor<S>) -> Tensor<S> {
        let (n, cin, h, w) = x.dim();
        assert_eq!(cin, self.in_c, "conv input channels");
        let mut y = Array4::zeros((n, self.out_c, h, w));
        let wview = self.weight.value.view().into_dimensionality::<Ix4>().unwrap();
        let bias: Option<Vec<S>> = self.bias.as_ref().map(|b| b.value.iter().copied().collect());
        y.axis_iter_mut(Axis(0))
            .into_par_iter()
            .zip(x.axis_iter(Axis(0)).into_par_iter())
            .for_each(|(mut yn, xn)| {
                conv_one(&xn, &mut yn, &wview, bias.as_deref(), self.pad, self.groups);
            });
        y
    }

    pub fn backward(&mut self, gy: &Tensor<S>) -> Tensor<S> {
        let x = self.cache_x.take().expect("forward before backward");
        let (n, _, h, w) = x.dim();
        let wview = self.weight.value.view().into_dimensionality::<Ix4>().unwrap();
        let pad = self.pad;
        let groups = self.groups;
        let in_per_g = self.in_c / groups;
        let og = self.out_c / groups;

        // input gradient, parallel over batch
        let mut gx = Array4::zeros((n, self.in_c, h, w));
        gx.axis_iter_mut(Axis(0))
            .into_par_iter()
            .zip(gy.axis_iter(Axis(0)).into_par_iter())
            .for_each(|(mut gxn, gyn)| {
                conv_one_transposed(&gyn, &mut gxn, &wview, pad, groups);
            });

        // weight gradient, parallel over output channel
        let k = self.k;
        let xs = x.as_slice().expect("standard layout");
        let gys = gy.as_slice().expect("standard layout");
        let mut gw = self
            .weight
            .grad
            .view_mut()
            .into_dimensionality::<Ix4>()
            .unwrap();
        gw.axis_iter_mut(Axis(0))
            .into_par_iter()
            .enumerate()
            .for_each(|(oc, mut gwoc)| {
                let g = oc / og;
                for icg in 0..in_per_g {
                    let ic = g * in_per_g + icg;
                    for u in 0..k {
                        for v in 0..k {
                            let (i0, i1) = row_range(h, pad, u);
                            let (j0, j1) = row_range(w, pad, v);
                            if j0 >= j1 {
                                continue;
                            }
                            let mut acc = S::zero();
                            for b in 0..n {
                                let xbase = (b * self.in_c + ic) * h * w;
                                let ybase = (b * self.out_c + oc) * h * w;
                                for i in i0..i1 {
                                    let i_in = i + u - pad;
                                    let xrow = xbase + i_in * w + (j0 + v - pad);
                                    let yrow = ybase + i * w + j0;
                                    for jj in 0..(j1 - j0) {
                                        acc = acc + xs[xrow + jj] * gys[yrow + jj];
                                    }
                                }
                            }
                            gwoc[[icg, u, v]] = gwoc[[icg, u, v]] + acc;
                        }
                    }
                }
            });

        if let Some(bias) = &mut self.bias {
            for oc in 0..self.out_c {
                let mut acc = S::zero();
                for b in 0..n {
                    acc = acc + gy.index_axis(Axis(0), b).index_axis(Axis(0), oc).sum();
                }
                bias.grad[oc] = bias.grad[oc] + acc;
            }
        }
        gx
    }

    pub fn visit_params(&mut self, prefix: &str, f: &mut ParamFn<S>) {
        f(key(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(key(prefix, "bias"), b);
        }
    }
}

#[inline]
fn row_range(len: usize, pad: usize, tap: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(tap);
    let hi = (len + pad).saturating_sub(tap).min(len);
    (lo, hi)
}

fn conv_one<S: Scalar>(
    x: &ArrayView3<S>,
    y: &mut ArrayViewMut3<S>,
    wt: &ArrayView4<S>,
    bias: Option<&[S]>,
    pad: usize,
    groups: usize,
) {
    let (cin, h, w) = x.dim();
    let cout = y.dim().0;
    let (in_per_g, og) = (cin / groups, cout / groups);
    let k = wt.dim().2;
    let xs = x.as_slice().expect("contiguous");
    let ys = y.as_slice_mut().expect("contiguous");
    for oc in 0..cout {
        let ybase = oc * h * w;
        if let Some(b) = bias {
            for t in ys[ybase..ybase + h * w].iter_mut() {
                *t = b[oc];
            }
        }
        let g = oc / og;
        for icg in 0..in_per_g {
            let ic = g * in_per_g + icg;
            let xbase = ic * h * w;
            for u in 0..k {
                for v in 0..k {
                    let wv = wt[[oc, icg, u, v]];
                    if wv == S::zero() {
                        continue;
                    }
                    let (i0, i1) = row_range(h, pad, u);
                    let (j0, j1) = row_range(w, pad, v);
                    if j0 >= j1 {
                        continue;
                    }
                    for i in i0..i1 {
                        let i_in = i + u - pad;
                        let yrow = ybase + i * w + j0;
                        let xrow = xbase + i_in * w + (j0 + v - pad);
                        for jj in 0..(j1 - j0) {
                            ys[yrow + jj] = ys[yrow + jj] + wv * xs[xrow + jj];
                        }
                    }
                }
            }
        }
    }
}

/// Scatters `gy` back through the convolution taps into `gx`.
fn conv_one_transposed<S: Scalar>(
    gy: &ArrayView3<S>,
    gx: &mut ArrayViewMut3<S>,
    wt: &ArrayView4<S>,
    pad: usize,
    groups: usize,
) {
    let (cout, h, w) = gy.dim();
    let cin = gx.dim().0;
    let (in_per_g, og) = (cin / groups, cout / groups);
    let k = wt.dim().2;
    let gys = gy.as_slice().expect("contiguous");
    let gxs = gx.as_slice_mut().expect("contiguous");
    for oc in 0..cout {
        let ybase = oc * h * w;
        let g = oc / og;
        for icg in 0..in_per_g {
            let ic = g * in_per_g + icg;
            let xbase = ic * h * w;
            for u in 0..k {
                for v in 0..k {
                    let wv = wt[[oc, icg, u, v]];
                    if wv == S::zero() {
                        continue;
                    }
                    let (i0, i1) = row_range(h, pad, u);
                    let (j0, j1) = row_range(w, pad, v);
                    if j0 >= j1 {
                        continue;
                    }
                    for i in i0..i1 {
                        let i_in = i + u - pad;
                        let yrow = ybase + i * w + j0;
                        let xrow = xbase + i_in * w + (j0 + v - pad);
                        for jj in 0..(j1 - j0) {
                            gxs[xrow + jj] = gxs[xrow + jj] + wv * gys[yrow + jj];
                        }
                    }
                }
            }
        }
    }
}
