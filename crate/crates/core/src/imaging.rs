//! RGB image tensors, photometric augmentation and the edge-content map
//! used to place view centers.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::math::{self, Real};
use crate::seed;

/// Luma weights used for every RGB to gray conversion.
pub const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

/// Per-channel statistics applied by [`ImageTensor::normalize`].
pub const NORM_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const NORM_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// Planar 3×H×W image. Values live in `[0, 1]` until [`normalize`](Self::normalize)
/// is called.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
    normalized: bool,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument("image must be at least 1x1".into()));
        }
        if data.len() != 3 * height * width {
            return Err(Error::ShapeMismatch {
                what: "image data",
                expected: (3, height * width),
                found: (data.len() / (height * width).max(1), height * width),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("image contains non-finite values".into()));
        }
        Ok(ImageTensor { height, width, data, normalized: false })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = vec![0.0; 3 * height * width];
        for (c, plane) in data.chunks_exact_mut(height * width).enumerate() {
            plane.fill(rgb[c]);
        }
        ImageTensor { height, width, data, normalized: false }
    }

    /// Builds an image from interleaved 8-bit RGB samples.
    pub fn from_rgb8(height: usize, width: usize, rgb: &[u8]) -> Result<Self> {
        if rgb.len() != 3 * height * width {
            return Err(Error::ShapeMismatch {
                what: "rgb8 buffer",
                expected: (height * width, 3),
                found: (rgb.len() / 3, 3),
            });
        }
        let plane = height * width;
        let mut data = vec![0.0; 3 * plane];
        for (p, px) in rgb.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * plane + p] = px[c] as f32 / 255.0;
            }
        }
        ImageTensor::new(height, width, data)
    }

    /// Interleaved 8-bit RGB, rounding and clamping each sample.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let plane = self.height * self.width;
        let mut out = vec![0u8; 3 * plane];
        for p in 0..plane {
            for c in 0..3 {
                let v = self.data[c * plane + p].clamp(0.0, 1.0);
                out[3 * p + c] = (v * 255.0 + 0.5) as u8;
            }
        }
        out
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Luma plane.
    pub fn gray(&self) -> Vec<f32> {
        let n = self.height * self.width;
        (0..n)
            .map(|p| LUMA[0] * self.data[p] + LUMA[1] * self.data[n + p] + LUMA[2] * self.data[2 * n + p])
            .collect()
    }

    /// Applies the fixed per-channel mean/std standardization.
    pub fn normalize(&self) -> ImageTensor {
        let n = self.height * self.width;
        let mut out = self.clone();
        for c in 0..3 {
            for v in &mut out.data[c * n..(c + 1) * n] {
                *v = (*v - NORM_MEAN[c]) / NORM_STD[c];
            }
        }
        out.normalized = true;
        out
    }

    /// Copies the rectangle `[y0, y0+h) × [x0, x0+w)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> ImageTensor {
        assert!(y0 + h <= self.height && x0 + w <= self.width, "crop outside image");
        let mut data = Vec::with_capacity(3 * h * w);
        for c in 0..3 {
            for y in y0..y0 + h {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row + x0..row + x0 + w]);
            }
        }
        ImageTensor { height: h, width: w, data, normalized: self.normalized }
    }

    /// Bilinear resize with half-pixel centers.
    pub fn resize_bilinear(&self, h: usize, w: usize) -> ImageTensor {
        let ys = resample_axis(self.height, h);
        let xs = resample_axis(self.width, w);
        let mut data = vec![0.0f32; 3 * h * w];
        for c in 0..3 {
            let src = self.plane(c);
            let dst = &mut data[c * h * w..(c + 1) * h * w];
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let top = src[y0 * self.width + x0] * (1.0 - fx) + src[y0 * self.width + x1] * fx;
                    let bot = src[y1 * self.width + x0] * (1.0 - fx) + src[y1 * self.width + x1] * fx;
                    dst[oy * w + ox] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        ImageTensor { height: h, width: w, data, normalized: self.normalized }
    }

    pub fn flip_horizontal(&self) -> ImageTensor {
        let mut out = self.clone();
        for c in 0..3 {
            for y in 0..self.height {
                let row = (c * self.height + y) * self.width;
                out.data[row..row + self.width].reverse();
            }
        }
        out
    }

    fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }
}

/// Source index pairs and blend weight for resampling `src` samples onto `dst`.
pub(crate) fn resample_axis(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (math::floor(s) as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let f = (s - i0 as f64) as f32;
            (i0, i1, if i0 == i1 { 0.0 } else { f })
        })
        .collect()
}

/// Nearest source sample for each destination sample under the same
/// half-pixel mapping as [`resample_axis`].
pub(crate) fn nearest_axis(src: usize, dst: usize) -> Vec<usize> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| (math::floor((o as f64 + 0.5) * scale) as usize).min(src - 1))
        .collect()
}

/// Jitter factors drawn by [`color_distort`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColorJitter {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    /// Hue rotation in turns.
    pub hue: f32,
}

impl ColorJitter {
    pub const IDENTITY: ColorJitter = ColorJitter { brightness: 1.0, contrast: 1.0, saturation: 1.0, hue: 0.0 };

    pub fn sample(strength: f32, rng: &mut seed::Rng) -> ColorJitter {
        let s = strength.max(0.0);
        let mut factor = |spread: f32| {
            if spread == 0.0 {
                1.0
            } else {
                rng.random_range(1.0 - spread..=1.0 + spread).max(0.0)
            }
        };
        let brightness = factor(0.8 * s);
        let contrast = factor(0.8 * s);
        let saturation = factor(0.8 * s);
        let hue = if s == 0.0 { 0.0 } else { rng.random_range(-0.2 * s..=0.2 * s) };
        ColorJitter { brightness, contrast, saturation, hue }
    }

    pub fn apply(&self, img: &ImageTensor) -> ImageTensor {
        let mut out = img.clone();
        if self.brightness != 1.0 {
            out = adjust_brightness(&out, self.brightness);
        }
        if self.contrast != 1.0 {
            out = adjust_contrast(&out, self.contrast);
        }
        if self.saturation != 1.0 {
            out = adjust_saturation(&out, self.saturation);
        }
        if self.hue != 0.0 {
            out = adjust_hue(&out, self.hue);
        }
        out
    }
}

/// Random brightness/contrast/saturation/hue jitter scaled by `strength`.
pub fn color_distort(img: &ImageTensor, strength: f32, rng_seed: u64) -> ImageTensor {
    if strength <= 0.0 {
        return img.clone();
    }
    let mut rng = seed::rng(rng_seed);
    ColorJitter::sample(strength, &mut rng).apply(img)
}

pub fn adjust_brightness(img: &ImageTensor, factor: f32) -> ImageTensor {
    let mut out = img.clone();
    for v in &mut out.data {
        *v *= factor;
    }
    out.clamp_unit();
    out
}

/// Blends every channel toward the image's mean luma.
pub fn adjust_contrast(img: &ImageTensor, factor: f32) -> ImageTensor {
    let gray = img.gray();
    let mean = gray.iter().map(|&g| g as f64).sum::<f64>() as f32 / gray.len() as f32;
    let mut out = img.clone();
    for v in &mut out.data {
        *v = (*v - mean) * factor + mean;
    }
    out.clamp_unit();
    out
}

/// Blends each pixel toward its own luma.
pub fn adjust_saturation(img: &ImageTensor, factor: f32) -> ImageTensor {
    let n = img.height * img.width;
    let gray = img.gray();
    let mut out = img.clone();
    for c in 0..3 {
        for p in 0..n {
            let v = &mut out.data[c * n + p];
            *v = gray[p] + (*v - gray[p]) * factor;
        }
    }
    out.clamp_unit();
    out
}

/// Rotates hue by `shift` turns in HSV space. Achromatic pixels are fixed points.
pub fn adjust_hue(img: &ImageTensor, shift: f32) -> ImageTensor {
    let n = img.height * img.width;
    let mut out = img.clone();
    for p in 0..n {
        let rgb = [img.data[p], img.data[n + p], img.data[2 * n + p]];
        let (h, s, v) = rgb_to_hsv(rgb);
        if s == 0.0 {
            continue;
        }
        let mut h2 = h + shift;
        h2 -= libm::floorf(h2);
        let rgb2 = hsv_to_rgb(h2, s, v);
        for c in 0..3 {
            out.data[c * n + p] = rgb2[c];
        }
    }
    out.clamp_unit();
    out
}

/// Hue in turns, saturation and value in `[0, 1]`.
pub fn rgb_to_hsv([r, g, b]: [f32; 3]) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    if delta <= 0.0 || max <= 0.0 {
        return (0.0, 0.0, max);
    }
    let h = if max == r {
        let t = (g - b) / delta;
        t - 6.0 * libm::floorf(t / 6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    (h / 6.0, delta / max, max)
}

pub fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = (h - libm::floorf(h)) * 6.0;
    let sector = libm::floorf(h6);
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector as i32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Normalized Gaussian taps for `sigma`; radius is `ceil(3·sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = math::ceil(3.0 * sigma) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|x| math::exp(-((x * x) as f64) / (2.0 * sigma * sigma)))
        .collect();
    let total: f64 = k.iter().sum();
    for v in &mut k {
        *v /= total;
    }
    k
}

/// Mirror index without repeating the edge sample (`-1 → 1`).
#[inline]
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// Separable Gaussian filter of one `h×w` plane with reflect padding.
pub fn blur_plane<R: Real>(plane: &[R], h: usize, w: usize, sigma: f64) -> Vec<R> {
    if sigma <= 0.0 {
        return plane.to_vec();
    }
    let kernel: Vec<R> = gaussian_kernel(sigma).into_iter().map(R::from_f64).collect();
    let radius = (kernel.len() / 2) as isize;
    let mut tmp = vec![R::ZERO; h * w];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = R::ZERO;
            for (t, &kv) in kernel.iter().enumerate() {
                acc += kv * row[reflect(x as isize + t as isize - radius, w)];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![R::ZERO; h * w];
    for y in 0..h {
        for (t, &kv) in kernel.iter().enumerate() {
            let sy = reflect(y as isize + t as isize - radius, h);
            let src = &tmp[sy * w..(sy + 1) * w];
            let dst = &mut out[y * w..(y + 1) * w];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += kv * s;
            }
        }
    }
    out
}

pub fn gaussian_blur(img: &ImageTensor, sigma: f64) -> ImageTensor {
    if sigma <= 0.0 {
        return img.clone();
    }
    let mut out = img.clone();
    let n = img.height * img.width;
    for c in 0..3 {
        let blurred = blur_plane(img.plane(c), img.height, img.width, sigma);
        out.data[c * n..(c + 1) * n].copy_from_slice(&blurred);
    }
    if !out.normalized {
        out.clamp_unit();
    }
    out
}

/// A categorical distribution over the pixels of an image.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
    cdf: Vec<f64>,
}

impl ProbabilityMap {
    /// Normalizes nonnegative `weights`; an all-zero input becomes uniform.
    pub fn from_weights(height: usize, width: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != height * width || height == 0 || width == 0 {
            return Err(Error::ShapeMismatch {
                what: "probability weights",
                expected: (height, width),
                found: (weights.len(), 1),
            });
        }
        if weights.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument("probability weights must be finite and >= 0".into()));
        }
        let total: f64 = weights.iter().sum();
        let data = if total > 0.0 {
            weights.into_iter().map(|v| v / total).collect()
        } else {
            vec![1.0 / (height * width) as f64; height * width]
        };
        Ok(Self::with_data(height, width, data))
    }

    pub fn uniform(height: usize, width: usize) -> Self {
        Self::with_data(height, width, vec![1.0 / (height * width) as f64; height * width])
    }

    fn with_data(height: usize, width: usize, data: Vec<f64>) -> Self {
        let mut acc = 0.0;
        let cdf = data
            .iter()
            .map(|&p| {
                acc += p;
                acc
            })
            .collect();
        ProbabilityMap { height, width, data, cdf }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Inverse-CDF draw of a cell index; zero-mass cells are never returned.
    pub fn sample_index(&self, u: f64) -> usize {
        let total = *self.cdf.last().unwrap_or(&1.0);
        let target = u.clamp(0.0, 1.0) * total;
        let idx = self.cdf.partition_point(|&c| c <= target);
        if idx < self.data.len() {
            idx
        } else {
            // u == 1 or rounding: last cell with positive mass
            self.data.iter().rposition(|&p| p > 0.0).unwrap_or(self.data.len() - 1)
        }
    }
}

/// Canny thresholds as fractions of the image's maximum gradient magnitude.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContentParams {
    pub canny_low: f64,
    pub canny_high: f64,
    pub smooth_sigma: f64,
}

impl Default for ContentParams {
    fn default() -> Self {
        ContentParams { canny_low: 0.1, canny_high: 0.2, smooth_sigma: 5.0 }
    }
}

/// Binary Canny edge map: Sobel gradients, non-maximum suppression and
/// hysteresis between `low·max` and `high·max`.
pub fn canny(gray: &[f32], h: usize, w: usize, low: f64, high: f64) -> Vec<bool> {
    let px = |y: isize, x: isize| -> f64 {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        gray[yy * w + xx] as f64
    };
    let mut gx = vec![0.0f64; h * w];
    let mut gy = vec![0.0f64; h * w];
    let mut mag = vec![0.0f64; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let dx = (px(y - 1, x + 1) + 2.0 * px(y, x + 1) + px(y + 1, x + 1))
                - (px(y - 1, x - 1) + 2.0 * px(y, x - 1) + px(y + 1, x - 1));
            let dy = (px(y + 1, x - 1) + 2.0 * px(y + 1, x) + px(y + 1, x + 1))
                - (px(y - 1, x - 1) + 2.0 * px(y - 1, x) + px(y - 1, x + 1));
            let i = y as usize * w + x as usize;
            gx[i] = dx;
            gy[i] = dy;
            mag[i] = math::sqrt(dx * dx + dy * dy);
        }
    }
    let max_mag = mag.iter().copied().fold(0.0, f64::max);
    let mut edges = vec![false; h * w];
    if max_mag <= 1e-12 {
        return edges;
    }

    // tan(22.5°) and tan(67.5°) split the gradient direction into 4 bins.
    const T1: f64 = 0.414_213_562_373_095;
    const T2: f64 = 2.414_213_562_373_095;
    let at = |y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            mag[y as usize * w + x as usize]
        }
    };
    let mut thin = vec![0.0f64; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            let m = mag[i];
            if m == 0.0 {
                continue;
            }
            let (ax, ay) = (gx[i].abs(), gy[i].abs());
            let (dy, dx) = if ay <= T1 * ax {
                (0, 1)
            } else if ay >= T2 * ax {
                (1, 0)
            } else if (gx[i] > 0.0) == (gy[i] > 0.0) {
                (1, 1)
            } else {
                (1, -1)
            };
            let before = at(y - dy, x - dx);
            let after = at(y + dy, x + dx);
            if m > before && m >= after {
                thin[i] = m;
            }
        }
    }

    let lo = low * max_mag;
    let hi = high * max_mag;
    let mut stack: Vec<usize> = Vec::new();
    for (i, &m) in thin.iter().enumerate() {
        if m >= hi && m > 0.0 {
            edges[i] = true;
            stack.push(i);
        }
    }
    while let Some(i) = stack.pop() {
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        for ny in y - 1..=y + 1 {
            for nx in x - 1..=x + 1 {
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if !edges[j] && thin[j] >= lo && thin[j] > 0.0 {
                    edges[j] = true;
                    stack.push(j);
                }
            }
        }
    }
    edges
}

/// Gaussian-smoothed Canny edge density, normalized to a distribution.
pub fn content_probability(img: &ImageTensor, params: ContentParams) -> ProbabilityMap {
    let (h, w) = (img.height, img.width);
    let edges = canny(&img.gray(), h, w, params.canny_low, params.canny_high);
    if !edges.iter().any(|&e| e) {
        return ProbabilityMap::uniform(h, w);
    }
    let binary: Vec<f64> = edges.iter().map(|&e| if e { 1.0 } else { 0.0 }).collect();
    let smooth = blur_plane(&binary, h, w, params.smooth_sigma);
    ProbabilityMap::from_weights(h, w, smooth).unwrap_or_else(|_| ProbabilityMap::uniform(h, w))
}
