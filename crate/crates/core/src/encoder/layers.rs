//! Layer primitives with explicit forward caches and exact backward passes.
//!
//! Activations are planar `C×H×W` buffers. Every backward function returns
//! the gradient with respect to its input and accumulates parameter
//! gradients into caller-provided slices.

use alloc::vec;
use alloc::vec::Vec;

use crate::math::{gemm_nn, gemm_tn, Real};

/// A planar activation tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<R> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<R>,
}

impl<R: Real> Tensor<R> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Tensor { c, h, w, data: vec![R::ZERO; c * h * w] }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<R>) -> Self {
        assert_eq!(data.len(), c * h * w, "tensor data length");
        Tensor { c, h, w, data }
    }

    pub fn plane_len(&self) -> usize {
        self.h * self.w
    }
}

/// Output side length of a `k`-tap convolution with `k/2` zero padding.
pub fn conv_out_len(n: usize, k: usize, stride: usize) -> usize {
    (n + 2 * (k / 2) - k) / stride + 1
}

/// Unrolls receptive fields into a `(cin·k·k) × (hout·wout)` matrix.
fn im2col<R: Real>(x: &Tensor<R>, k: usize, stride: usize, ho: usize, wo: usize) -> Vec<R> {
    let pad = (k / 2) as isize;
    let p = ho * wo;
    let mut col = vec![R::ZERO; x.c * k * k * p];
    for ci in 0..x.c {
        let plane = &x.data[ci * x.h * x.w..(ci + 1) * x.h * x.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ci * k + ky) * k + kx) * p..((ci * k + ky) * k + kx + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= x.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * x.w..(iy as usize + 1) * x.w];
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride) as isize + kx as isize - pad;
                        if ix >= 0 && ix < x.w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im<R: Real>(col: &[R], c: usize, h: usize, w: usize, k: usize, stride: usize, ho: usize, wo: usize) -> Tensor<R> {
    let pad = (k / 2) as isize;
    let p = ho * wo;
    let mut out = Tensor::zeros(c, h, w);
    for ci in 0..c {
        let plane = &mut out.data[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ci * k + ky) * k + kx) * p..((ci * k + ky) * k + kx + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride) as isize + kx as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Dot product with independent partial sums so the loop vectorizes.
#[inline]
fn dot_lanes<R: Real>(a: &[R], b: &[R]) -> R {
    let mut acc = [R::ZERO; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut total = acc.iter().copied().sum::<R>();
    for (x, y) in ra.iter().zip(rb) {
        total += *x * *y;
    }
    total
}

/// Convolution geometry; weights are `cout × cin × k × k`, zero padding `k/2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvShape {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
}

impl ConvShape {
    pub fn weight_len(&self) -> usize {
        self.cout * self.cin * self.k * self.k
    }

    pub fn fan_in(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1
    }
}

pub fn conv_forward<R: Real>(x: &Tensor<R>, shape: ConvShape, weight: &[R], bias: &[R]) -> Tensor<R> {
    debug_assert_eq!(x.c, shape.cin);
    let ho = conv_out_len(x.h, shape.k, shape.stride);
    let wo = conv_out_len(x.w, shape.k, shape.stride);
    let p = ho * wo;
    let mut out = Tensor::zeros(shape.cout, ho, wo);
    for (co, plane) in out.data.chunks_exact_mut(p).enumerate() {
        plane.fill(bias[co]);
    }
    if shape.is_pointwise() {
        gemm_nn(shape.cout, shape.cin, p, weight, &x.data, &mut out.data);
    } else {
        let col = im2col(x, shape.k, shape.stride, ho, wo);
        gemm_nn(shape.cout, shape.fan_in(), p, weight, &col, &mut out.data);
    }
    out
}

/// Returns `dL/dx`; adds into `dweight` and `dbias`.
pub fn conv_backward<R: Real>(
    x: &Tensor<R>,
    shape: ConvShape,
    weight: &[R],
    dout: &Tensor<R>,
    dweight: &mut [R],
    dbias: &mut [R],
) -> Tensor<R> {
    let (ho, wo) = (dout.h, dout.w);
    let p = ho * wo;
    let kk = shape.fan_in();
    for (co, plane) in dout.data.chunks_exact(p).enumerate() {
        dbias[co] += plane.iter().copied().sum::<R>();
    }
    let owned_col;
    let col: &[R] = if shape.is_pointwise() {
        &x.data
    } else {
        owned_col = im2col(x, shape.k, shape.stride, ho, wo);
        &owned_col
    };
    for co in 0..shape.cout {
        let g = &dout.data[co * p..(co + 1) * p];
        let dw = &mut dweight[co * kk..(co + 1) * kk];
        for (j, d) in dw.iter_mut().enumerate() {
            *d += dot_lanes(g, &col[j * p..(j + 1) * p]);
        }
    }
    let mut dcol = vec![R::ZERO; kk * p];
    gemm_tn(kk, shape.cout, p, weight, &dout.data, &mut dcol);
    if shape.is_pointwise() {
        Tensor::from_vec(x.c, x.h, x.w, dcol)
    } else {
        col2im(&dcol, x.c, x.h, x.w, shape.k, shape.stride, ho, wo)
    }
}

/// Saved statistics of a group normalization.
#[derive(Debug, Clone)]
pub struct GroupNormCache<R> {
    pub xhat: Tensor<R>,
    pub inv_std: Vec<R>,
}

pub const GN_EPS: f64 = 1e-5;

/// Largest divisor of `channels` that is at most 8.
pub fn group_count(channels: usize) -> usize {
    (1..=8.min(channels)).rev().find(|g| channels % g == 0).unwrap_or(1)
}

pub fn group_norm_forward<R: Real>(x: &Tensor<R>, groups: usize, gamma: &[R], beta: &[R]) -> (Tensor<R>, GroupNormCache<R>) {
    let per = x.c / groups;
    let hw = x.plane_len();
    let n = (per * hw) as f64;
    let mut xhat = Tensor::zeros(x.c, x.h, x.w);
    let mut out = Tensor::zeros(x.c, x.h, x.w);
    let mut inv_std = Vec::with_capacity(groups);
    for g in 0..groups {
        let span = g * per * hw..(g + 1) * per * hw;
        let src = &x.data[span.clone()];
        let mean = src.iter().map(|v| v.to_f64()).sum::<f64>() / n;
        let var = src.iter().map(|v| {
                let d = v.to_f64() - mean;
                d * d
            }).sum::<f64>() / n;
        let istd = 1.0 / libm::sqrt(var + GN_EPS);
        inv_std.push(R::from_f64(istd));
        let (mean_r, istd_r) = (R::from_f64(mean), R::from_f64(istd));
        for (d, &s) in xhat.data[span].iter_mut().zip(src) {
            *d = (s - mean_r) * istd_r;
        }
        for c in g * per..(g + 1) * per {
            let (gm, bt) = (gamma[c], beta[c]);
            let plane = c * hw..(c + 1) * hw;
            for (o, &xh) in out.data[plane.clone()].iter_mut().zip(&xhat.data[plane]) {
                *o = xh * gm + bt;
            }
        }
    }
    (out, GroupNormCache { xhat, inv_std })
}

pub fn group_norm_backward<R: Real>(
    cache: &GroupNormCache<R>,
    groups: usize,
    gamma: &[R],
    dout: &Tensor<R>,
    dgamma: &mut [R],
    dbeta: &mut [R],
) -> Tensor<R> {
    let xhat = &cache.xhat;
    let per = xhat.c / groups;
    let hw = xhat.plane_len();
    let n = R::from_f64((per * hw) as f64);
    let mut dx = Tensor::zeros(xhat.c, xhat.h, xhat.w);
    let mut dxhat = vec![R::ZERO; per * hw];
    for g in 0..groups {
        let mut sum_d = R::ZERO;
        let mut sum_dx = R::ZERO;
        for (local, c) in (g * per..(g + 1) * per).enumerate() {
            let plane = c * hw..(c + 1) * hw;
            let dy = &dout.data[plane.clone()];
            let xh = &xhat.data[plane];
            dgamma[c] += dot_lanes(dy, xh);
            dbeta[c] += dy.iter().copied().sum::<R>();
            let dst = &mut dxhat[local * hw..(local + 1) * hw];
            for (d, &v) in dst.iter_mut().zip(dy) {
                *d = v * gamma[c];
            }
            sum_d += dst.iter().copied().sum::<R>();
            sum_dx += dot_lanes(dst, xh);
        }
        let scale = cache.inv_std[g] / n;
        let span = g * per * hw..(g + 1) * per * hw;
        for ((o, &d), &xh) in dx.data[span.clone()].iter_mut().zip(&dxhat).zip(&xhat.data[span]) {
            *o = scale * (n * d - sum_d - xh * sum_dx);
        }
    }
    dx
}

pub fn relu_forward<R: Real>(x: &mut Tensor<R>) {
    for v in &mut x.data {
        if *v < R::ZERO {
            *v = R::ZERO;
        }
    }
}

/// `out` is the ReLU output; gradient passes where it is positive.
pub fn relu_backward<R: Real>(out: &Tensor<R>, dout: &mut Tensor<R>) {
    for (d, &o) in dout.data.iter_mut().zip(&out.data) {
        if o <= R::ZERO {
            *d = R::ZERO;
        }
    }
}

/// Per-axis bilinear taps `(i0, i1, w0, w1)` with half-pixel centers.
fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (libm::floor(s) as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let f = if i0 == i1 { 0.0 } else { s - i0 as f64 };
            (i0, i1, 1.0 - f, f)
        })
        .collect()
}

pub fn upsample_forward<R: Real>(x: &Tensor<R>, h: usize, w: usize) -> Tensor<R> {
    let ys = bilinear_taps(x.h, h);
    let xs = bilinear_taps(x.w, w);
    let mut out = Tensor::zeros(x.c, h, w);
    for c in 0..x.c {
        let src = &x.data[c * x.h * x.w..(c + 1) * x.h * x.w];
        let dst = &mut out.data[c * h * w..(c + 1) * h * w];
        for (oy, &(y0, y1, wy0, wy1)) in ys.iter().enumerate() {
            let (wy0, wy1) = (R::from_f64(wy0), R::from_f64(wy1));
            for (ox, &(x0, x1, wx0, wx1)) in xs.iter().enumerate() {
                let (wx0, wx1) = (R::from_f64(wx0), R::from_f64(wx1));
                dst[oy * w + ox] = wy0 * (wx0 * src[y0 * x.w + x0] + wx1 * src[y0 * x.w + x1])
                    + wy1 * (wx0 * src[y1 * x.w + x0] + wx1 * src[y1 * x.w + x1]);
            }
        }
    }
    out
}

/// Adjoint of [`upsample_forward`] back onto an `h×w` grid.
pub fn upsample_backward<R: Real>(dout: &Tensor<R>, h: usize, w: usize) -> Tensor<R> {
    let ys = bilinear_taps(h, dout.h);
    let xs = bilinear_taps(w, dout.w);
    let mut dx = Tensor::zeros(dout.c, h, w);
    for c in 0..dout.c {
        let src = &dout.data[c * dout.h * dout.w..(c + 1) * dout.h * dout.w];
        let dst = &mut dx.data[c * h * w..(c + 1) * h * w];
        for (oy, &(y0, y1, wy0, wy1)) in ys.iter().enumerate() {
            let (wy0, wy1) = (R::from_f64(wy0), R::from_f64(wy1));
            for (ox, &(x0, x1, wx0, wx1)) in xs.iter().enumerate() {
                let (wx0, wx1) = (R::from_f64(wx0), R::from_f64(wx1));
                let g = src[oy * dout.w + ox];
                dst[y0 * w + x0] += wy0 * wx0 * g;
                dst[y0 * w + x1] += wy0 * wx1 * g;
                dst[y1 * w + x0] += wy1 * wx0 * g;
                dst[y1 * w + x1] += wy1 * wx1 * g;
            }
        }
    }
    dx
}

pub fn concat<R: Real>(a: &Tensor<R>, b: &Tensor<R>) -> Tensor<R> {
    debug_assert_eq!((a.h, a.w), (b.h, b.w));
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    Tensor { c: a.c + b.c, h: a.h, w: a.w, data }
}

/// Splits a channel-concatenated gradient back into its `a_channels` and rest.
pub fn split<R: Real>(d: Tensor<R>, a_channels: usize) -> (Tensor<R>, Tensor<R>) {
    let hw = d.plane_len();
    let mut data = d.data;
    let rest = data.split_off(a_channels * hw);
    (
        Tensor { c: a_channels, h: d.h, w: d.w, data },
        Tensor { c: d.c - a_channels, h: d.h, w: d.w, data: rest },
    )
}

/// Floor on the per-pixel norm in [`l2_normalize_forward`].
pub const NORM_FLOOR: f64 = 1e-12;

/// Normalizes each pixel's channel vector; returns the output and the norms.
pub fn l2_normalize_forward<R: Real>(x: &Tensor<R>) -> (Tensor<R>, Vec<R>) {
    let hw = x.plane_len();
    let mut sq = vec![R::ZERO; hw];
    for plane in x.data.chunks_exact(hw) {
        for (s, &v) in sq.iter_mut().zip(plane) {
            *s += v * v;
        }
    }
    let floor = R::from_f64(NORM_FLOOR);
    let norms: Vec<R> = sq.into_iter().map(|s| s.sqrt().max(floor)).collect();
    let mut out = x.clone();
    for plane in out.data.chunks_exact_mut(hw) {
        for (v, &n) in plane.iter_mut().zip(&norms) {
            *v /= n;
        }
    }
    (out, norms)
}

/// `dx = (dy − y·⟨y, dy⟩) / ‖x‖` per pixel.
pub fn l2_normalize_backward<R: Real>(y: &Tensor<R>, norms: &[R], dout: &Tensor<R>) -> Tensor<R> {
    let hw = y.plane_len();
    let mut proj = vec![R::ZERO; hw];
    for (yp, dp) in y.data.chunks_exact(hw).zip(dout.data.chunks_exact(hw)) {
        for ((s, &a), &b) in proj.iter_mut().zip(yp).zip(dp) {
            *s += a * b;
        }
    }
    let mut dx = dout.clone();
    for (dp, yp) in dx.data.chunks_exact_mut(hw).zip(y.data.chunks_exact(hw)) {
        for (((d, &yv), &pr), &n) in dp.iter_mut().zip(yp).zip(&proj).zip(norms) {
            *d = (*d - yv * pr) / n;
        }
    }
    dx
}
