//! Multi-view generation with shared superpixel regions and region masking.
//!
//! A batch for one source image is produced in three stages:
//! [`gen_views`] samples crops around a content-weighted center and keeps
//! only regions visible in every view, [`mask_views`] replaces a random
//! subset of regions with noise, and [`appearance_aug`] applies color
//! jitter and blur.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::imaging::{self, ImageTensor, ProbabilityMap};
use crate::seed;
use crate::superpixel::SuperpixelMap;

/// Label carried by view pixels whose region is not shared by all views.
pub const SENTINEL: i32 = -1;

/// Region labels of one view. Values are source-map region ids or [`SENTINEL`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViewLabels {
    height: usize,
    width: usize,
    labels: Vec<i32>,
}

impl ViewLabels {
    pub fn new(height: usize, width: usize, labels: Vec<i32>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::ShapeMismatch {
                what: "view labels",
                expected: (height, width),
                found: (labels.len(), 1),
            });
        }
        Ok(ViewLabels { height, width, labels })
    }

    /// Whole source map as a view, no filtering.
    pub fn from_map(map: &SuperpixelMap) -> Self {
        ViewLabels {
            height: map.height(),
            width: map.width(),
            labels: map.labels().iter().map(|&l| l as i32).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[i32] {
        &self.labels
    }

    pub fn flip_horizontal(&self) -> ViewLabels {
        let mut out = self.clone();
        for row in out.labels.chunks_exact_mut(self.width) {
            row.reverse();
        }
        out
    }

    /// Sets every label not in the sorted `keep` list to [`SENTINEL`].
    pub fn retain_sorted(&mut self, keep: &[u32]) {
        for l in &mut self.labels {
            if *l < 0 || keep.binary_search(&(*l as u32)).is_err() {
                *l = SENTINEL;
            }
        }
    }
}

/// Geometry of one view relative to its source image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewSpec {
    /// Sampled view center `(x, y)` in source pixels.
    pub center: (f64, f64),
    pub beta: f64,
    pub flip: bool,
    /// `(x0, y0, x1, y1)` with exclusive upper bounds.
    pub crop_box: (usize, usize, usize, usize),
    /// Output `(h, w)`.
    pub view_size: (usize, usize),
}

impl ViewSpec {
    pub fn crop_height(&self) -> usize {
        self.crop_box.3 - self.crop_box.1
    }

    pub fn crop_width(&self) -> usize {
        self.crop_box.2 - self.crop_box.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub image: ImageTensor,
    pub labels: ViewLabels,
    pub spec: ViewSpec,
    /// Pixels overwritten by [`mask_views`].
    pub masked_pixels: usize,
}

impl View {
    /// Flips image and labels together.
    pub fn flip_horizontal(&self) -> View {
        View {
            image: self.image.flip_horizontal(),
            labels: self.labels.flip_horizontal(),
            spec: ViewSpec { flip: !self.spec.flip, ..self.spec },
            masked_pixels: self.masked_pixels,
        }
    }
}

/// All views of one source image.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewBatch {
    pub views: Vec<View>,
    /// Sorted ids of the regions present in every view.
    pub mutual_region_ids: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewConfig {
    /// Number of views `M`.
    pub views: usize,
    /// Output `(h, w)` of every view.
    pub view_size: (usize, usize),
    pub beta_range: (f64, f64),
    /// Largest center offset in source pixels; `None` means a quarter of the
    /// shorter image side.
    pub max_offset: Option<f64>,
    pub flip: bool,
    /// Regions with fewer pixels than this in any view are not mutual.
    pub min_region_pixels: usize,
    pub retries: usize,
}

impl Default for ViewConfig {
    fn default() -> Self {
        ViewConfig {
            views: 5,
            view_size: (64, 64),
            beta_range: (0.5, 2.0),
            max_offset: None,
            flip: true,
            min_region_pixels: 4,
            retries: 10,
        }
    }
}

/// Draws a pixel `(x, y)` from the categorical distribution `pmap`.
pub fn sample_center(pmap: &ProbabilityMap, rng_seed: u64) -> (usize, usize) {
    let mut rng = seed::rng(rng_seed);
    sample_center_with(pmap, &mut rng)
}

fn sample_center_with(pmap: &ProbabilityMap, rng: &mut seed::Rng) -> (usize, usize) {
    let idx = pmap.sample_index(rng.random::<f64>());
    (idx % pmap.width(), idx / pmap.width())
}

fn validate(img: &ImageTensor, map: &SuperpixelMap, cfg: &ViewConfig) -> Result<()> {
    if cfg.views == 0 {
        return Err(Error::InvalidArgument("at least one view is required".into()));
    }
    if cfg.view_size.0 == 0 || cfg.view_size.1 == 0 {
        return Err(Error::InvalidArgument("view size must be positive".into()));
    }
    let (lo, hi) = cfg.beta_range;
    if !(lo > 0.0 && lo <= hi) {
        return Err(Error::InvalidArgument("beta range must satisfy 0 < lo <= hi".into()));
    }
    if (img.height(), img.width()) != (map.height(), map.width()) {
        return Err(Error::ShapeMismatch {
            what: "superpixel map vs image",
            expected: (img.height(), img.width()),
            found: (map.height(), map.width()),
        });
    }
    let fits = |beta: f64| {
        libm::round(beta * cfg.view_size.0 as f64) as usize <= img.height()
            && libm::round(beta * cfg.view_size.1 as f64) as usize <= img.width()
    };
    if !fits(lo) {
        return Err(Error::InvalidArgument("image too small for a crop at the minimum beta".into()));
    }
    Ok(())
}

/// Samples view geometry. Betas above what the image can hold are not drawn.
pub fn plan_views(img_h: usize, img_w: usize, center: (usize, usize), cfg: &ViewConfig, rng: &mut seed::Rng) -> Vec<ViewSpec> {
    let (vh, vw) = cfg.view_size;
    let (lo, hi) = cfg.beta_range;
    let feasible = hi.min(img_h as f64 / vh as f64).min(img_w as f64 / vw as f64).max(lo);
    let max_offset = cfg.max_offset.unwrap_or(0.25 * img_h.min(img_w) as f64).max(0.0);
    (0..cfg.views)
        .map(|_| {
            let beta = if feasible > lo { rng.random_range(lo..=feasible) } else { lo };
            let ch = (libm::round(beta * vh as f64) as usize).clamp(1, img_h);
            let cw = (libm::round(beta * vw as f64) as usize).clamp(1, img_w);
            let (ox, oy) = if max_offset > 0.0 {
                (rng.random_range(-max_offset..=max_offset), rng.random_range(-max_offset..=max_offset))
            } else {
                (0.0, 0.0)
            };
            let cx = center.0 as f64 + ox;
            let cy = center.1 as f64 + oy;
            let x0 = libm::round(cx - cw as f64 / 2.0).clamp(0.0, (img_w - cw) as f64) as usize;
            let y0 = libm::round(cy - ch as f64 / 2.0).clamp(0.0, (img_h - ch) as f64) as usize;
            let flip = cfg.flip && rng.random_bool(0.5);
            ViewSpec { center: (cx, cy), beta, flip, crop_box: (x0, y0, x0 + cw, y0 + ch), view_size: (vh, vw) }
        })
        .collect()
}

fn boxes_intersect(specs: &[ViewSpec]) -> bool {
    let x0 = specs.iter().map(|s| s.crop_box.0).max().unwrap_or(0);
    let y0 = specs.iter().map(|s| s.crop_box.1).max().unwrap_or(0);
    let x1 = specs.iter().map(|s| s.crop_box.2).min().unwrap_or(0);
    let y1 = specs.iter().map(|s| s.crop_box.3).min().unwrap_or(0);
    x0 < x1 && y0 < y1
}

/// Crops and resizes one view: bilinear for the image, nearest for labels,
/// then the joint flip. No mutual filtering.
pub fn render_view(img: &ImageTensor, map: &SuperpixelMap, spec: &ViewSpec) -> View {
    let (x0, y0, _, _) = spec.crop_box;
    let (ch, cw) = (spec.crop_height(), spec.crop_width());
    let (vh, vw) = spec.view_size;
    let image = img.crop(y0, x0, ch, cw).resize_bilinear(vh, vw);
    let ys = imaging::nearest_axis(ch, vh);
    let xs = imaging::nearest_axis(cw, vw);
    let mut labels = Vec::with_capacity(vh * vw);
    for &sy in &ys {
        for &sx in &xs {
            labels.push(map.get(y0 + sy, x0 + sx) as i32);
        }
    }
    let mut view = View {
        image,
        labels: ViewLabels { height: vh, width: vw, labels },
        spec: ViewSpec { flip: false, ..*spec },
        masked_pixels: 0,
    };
    if spec.flip {
        view = view.flip_horizontal();
    }
    view
}

/// Sorted region ids with at least `min_pixels` pixels in every view.
pub fn mutual_regions(views: &[View], region_count: usize, min_pixels: usize) -> Vec<u32> {
    let mut present = vec![true; region_count];
    let mut counts = vec![0usize; region_count];
    for v in views {
        counts.fill(0);
        for &l in v.labels.labels() {
            if l >= 0 {
                counts[l as usize] += 1;
            }
        }
        for (p, &c) in present.iter_mut().zip(&counts) {
            *p &= c >= min_pixels.max(1);
        }
    }
    (0..region_count as u32).filter(|&r| present[r as usize]).collect()
}

/// Renders `specs` and restricts every view's labels to the mutual regions.
pub fn render_views(img: &ImageTensor, map: &SuperpixelMap, specs: &[ViewSpec], min_region_pixels: usize) -> ViewBatch {
    let mut views: Vec<View> = specs.iter().map(|s| render_view(img, map, s)).collect();
    let mutual = mutual_regions(&views, map.region_count(), min_region_pixels);
    for v in &mut views {
        v.labels.retain_sorted(&mutual);
    }
    ViewBatch { views, mutual_region_ids: mutual }
}

/// Generates `cfg.views` views of one image that share at least one region.
///
/// `image_index` only labels the error when the retry budget runs out.
pub fn gen_views(
    img: &ImageTensor,
    map: &SuperpixelMap,
    pmap: &ProbabilityMap,
    cfg: &ViewConfig,
    rng_seed: u64,
    image_index: usize,
) -> Result<ViewBatch> {
    validate(img, map, cfg)?;
    let mut rng = seed::rng(rng_seed);
    let attempts = cfg.retries.max(1);
    for _ in 0..attempts {
        let center = sample_center_with(pmap, &mut rng);
        let specs = plan_views(img.height(), img.width(), center, cfg, &mut rng);
        if !boxes_intersect(&specs) {
            continue;
        }
        let batch = render_views(img, map, &specs, cfg.min_region_pixels);
        if !batch.mutual_region_ids.is_empty() {
            return Ok(batch);
        }
    }
    Err(Error::ViewGeneration { image: image_index, attempts })
}

/// Replaces randomly chosen regions of every view with uniform noise.
///
/// Regions are drawn without replacement and masking stops before the one
/// that would push the masked area past `max_coverage` of the view. Labels
/// are left untouched. Each view draws its own regions.
pub fn mask_views(batch: &ViewBatch, max_coverage: f64, rng_seed: u64) -> ViewBatch {
    let mut out = batch.clone();
    if max_coverage <= 0.0 {
        return out;
    }
    let mut rng = seed::rng(rng_seed);
    for view in &mut out.views {
        let total = view.labels.labels().len();
        let budget = max_coverage.min(1.0) * total as f64;
        let mut sizes: Vec<(u32, usize)> = batch
            .mutual_region_ids
            .iter()
            .map(|&r| (r, view.labels.labels().iter().filter(|&&l| l == r as i32).count()))
            .filter(|&(_, n)| n > 0)
            .collect();
        sizes.shuffle(&mut rng);
        let mut chosen: Vec<u32> = Vec::new();
        let mut covered = 0usize;
        for (r, n) in sizes {
            if (covered + n) as f64 > budget {
                break;
            }
            covered += n;
            chosen.push(r);
        }
        chosen.sort_unstable();
        let plane = total;
        let data = view.image.data_mut();
        for (p, &l) in view.labels.labels.iter().enumerate() {
            if l >= 0 && chosen.binary_search(&(l as u32)).is_ok() {
                for c in 0..3 {
                    data[c * plane + p] = rng.random::<f32>();
                }
            }
        }
        view.masked_pixels += covered;
    }
    out
}

/// Per-view color jitter and Gaussian blur with `sigma ∈ [0, blur_sigma_max]`.
pub fn appearance_aug(batch: &ViewBatch, color_strength: f32, blur_sigma_max: f64, rng_seed: u64) -> ViewBatch {
    let mut out = batch.clone();
    for (m, view) in out.views.iter_mut().enumerate() {
        let s = seed::derive(rng_seed, &[m as u64]);
        let mut rng = seed::rng(s);
        let sigma = if blur_sigma_max > 0.0 { rng.random_range(0.0..=blur_sigma_max) } else { 0.0 };
        let jittered = imaging::color_distort(&view.image, color_strength, rng.random());
        view.image = imaging::gaussian_blur(&jittered, sigma);
    }
    out
}
