//! Procedural shapes-on-textures dataset with per-pixel class labels.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::imaging::{self, ImageTensor};
use crate::math;
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDatasetSpec {
    pub images: usize,
    pub size: usize,
    pub classes: usize,
    pub seed: u64,
    pub val_fraction: f64,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        Self { images: 64, size: 128, classes: 6, seed: 0, val_fraction: 0.25 }
    }
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > 255 {
            return Err(Error::InvalidArgument(format!("class count must be in [2, 255], got {}", self.classes)));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::InvalidArgument(format!("val_fraction must be in (0, 1), got {}", self.val_fraction)));
        }
        if self.images == 0 || self.size < 16 {
            return Err(Error::InvalidArgument("need at least one image of side >= 16".into()));
        }
        Ok(())
    }

    /// Images `[0, train)` form the training split, the rest validation.
    pub fn train_count(&self) -> usize {
        let val = (math::round(self.images as f64 * self.val_fraction) as usize).clamp(1, self.images);
        self.images.saturating_sub(val).max(if self.images > 1 { 1 } else { 0 })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub image: ImageTensor,
    /// Row-major class ids.
    pub labels: Vec<u8>,
}

#[derive(Clone, Copy)]
enum Shape {
    Disc { cx: f64, cy: f64, r: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Triangle { pts: [(f64, f64); 3] },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Disc { cx, cy, r } => (x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r,
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
            Shape::Triangle { pts } => {
                let side = |a: (f64, f64), b: (f64, f64)| (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0);
                let d = [side(pts[0], pts[1]), side(pts[1], pts[2]), side(pts[2], pts[0])];
                d.iter().all(|&v| v >= 0.0) || d.iter().all(|&v| v <= 0.0)
            }
        }
    }
}

/// Color of class `c` at `(x, y)`: a class hue with a class-specific texture.
fn texture(c: usize, classes: usize, x: f64, y: f64, phase: f64) -> [f32; 3] {
    let hue = c as f32 / classes as f32;
    let freq = 0.25 + 0.12 * (c % 3) as f64;
    let pattern = match c % 4 {
        0 => math::cos(freq * x + phase),
        1 => math::cos(freq * y + phase),
        2 => math::cos(freq * (x + y) * 0.7 + phase) * math::cos(freq * (x - y) * 0.7),
        _ => math::cos(freq * 0.8 * x + phase) * math::cos(freq * 0.8 * y + phase),
    };
    let v = 0.6 + 0.25 * pattern as f32;
    let s = 0.55 + 0.1 * (c % 2) as f32;
    imaging::hsv_to_rgb(hue, s, v)
}

/// Renders image `index` of the dataset.
pub fn render_sample(spec: &SyntheticDatasetSpec, index: usize) -> SynthSample {
    let mut rng = seed::rng(seed::derive(spec.seed, &[index as u64]));
    let n = spec.size;
    let sz = n as f64;
    let l = spec.classes;
    // Two background classes split by a wavy boundary, then 2 to 4 shapes.
    let bg_a = index % l;
    let bg_b = (bg_a + 1 + rng.random_range(0..l - 1)) % l;
    let split = rng.random_range(0.3..0.7) * sz;
    let amp = rng.random_range(0.0..0.12) * sz;
    let wave = rng.random_range(0.02..0.08);
    let vertical = rng.random_bool(0.5);
    let mut shapes = Vec::new();
    for _ in 0..rng.random_range(2..=4) {
        let class = rng.random_range(0..l);
        let r = rng.random_range(0.1..0.22) * sz;
        let cx = rng.random_range(r..sz - r);
        let cy = rng.random_range(r..sz - r);
        let shape = match rng.random_range(0..3) {
            0 => Shape::Disc { cx, cy, r },
            1 => Shape::Rect { x0: cx - r, y0: cy - r * 0.7, x1: cx + r, y1: cy + r * 0.7 },
            _ => {
                let a = rng.random_range(0.0..core::f64::consts::TAU);
                let pt = |k: f64| {
                    let t = a + k * core::f64::consts::TAU / 3.0;
                    (cx + r * 1.2 * math::cos(t), cy + r * 1.2 * libm::sin(t))
                };
                Shape::Triangle { pts: [pt(0.0), pt(1.0), pt(2.0)] }
            }
        };
        shapes.push((class, shape));
    }
    let phases: Vec<f64> = (0..l).map(|_| rng.random_range(0.0..core::f64::consts::TAU)).collect();
    let mut labels = vec![0u8; n * n];
    let mut img = ImageTensor::filled(n, n, [0.0; 3]);
    for y in 0..n {
        for x in 0..n {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let (along, across) = if vertical { (fy, fx) } else { (fx, fy) };
            let mut class = if across < split + amp * libm::sin(wave * along) { bg_a } else { bg_b };
            for &(c, s) in &shapes {
                if s.contains(fx, fy) {
                    class = c;
                }
            }
            labels[y * n + x] = class as u8;
            let rgb = texture(class, l, fx, fy, phases[class]);
            for c in 0..3 {
                let noise: f32 = rng.random_range(-0.04..0.04);
                img.set(c, y, x, (rgb[c] + noise).clamp(0.0, 1.0));
            }
        }
    }
    SynthSample { image: img, labels }
}

pub fn generate(spec: &SyntheticDatasetSpec) -> Result<Vec<SynthSample>> {
    spec.validate()?;
    Ok((0..spec.images).map(|i| render_sample(spec, i)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticDatasetSpec {
        SyntheticDatasetSpec { images: 10, size: 48, classes: 6, seed: 3, val_fraction: 0.2 }
    }

    #[test]
    fn count_and_split() {
        let spec = small();
        let data = generate(&spec).unwrap();
        assert_eq!(data.len(), 10);
        assert_eq!(spec.train_count(), 8);
        assert!(data.iter().all(|s| s.labels.len() == 48 * 48 && s.image.height() == 48));
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = small();
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        let other = SyntheticDatasetSpec { seed: 4, ..spec };
        assert_ne!(generate(&other).unwrap()[0], generate(&small()).unwrap()[0]);
    }

    #[test]
    fn histogram_covers_every_class() {
        let spec = small();
        let mut hist = [0usize; 6];
        for s in generate(&spec).unwrap() {
            for &l in &s.labels {
                hist[l as usize] += 1;
            }
        }
        assert!(hist.iter().all(|&c| c > 0), "{hist:?}");
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(SyntheticDatasetSpec { classes: 1, ..small() }.validate().is_err());
        assert!(SyntheticDatasetSpec { val_fraction: 1.0, ..small() }.validate().is_err());
    }
}
