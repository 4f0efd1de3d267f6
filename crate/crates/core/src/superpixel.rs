//! Image decomposition into superpixels (SLIC) and regular grids.

use alloc::collections::VecDeque;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::imaging::ImageTensor;
use crate::math;

/// Dense per-pixel region index map. Labels are `0..region_count` and every
/// label occurs at least once.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuperpixelMap {
    height: usize,
    width: usize,
    labels: Vec<u32>,
    region_count: usize,
}

impl SuperpixelMap {
    pub fn from_labels(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::ShapeMismatch {
                what: "superpixel labels",
                expected: (height, width),
                found: (labels.len(), 1),
            });
        }
        let region_count = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
        let mut seen = vec![false; region_count];
        for &l in &labels {
            seen[l as usize] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::InvalidArgument("superpixel labels are not dense".into()));
        }
        Ok(SuperpixelMap { height, width, labels, region_count })
    }

    pub fn single_region(height: usize, width: usize) -> Self {
        SuperpixelMap { height, width, labels: vec![0; height * width], region_count: 1 }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn region_count(&self) -> usize {
        self.region_count
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    /// True when every region's pixel set is 4-connected.
    pub fn regions_are_connected(&self) -> bool {
        let comps = components(&self.labels, self.height, self.width);
        comps.count == self.region_count
    }
}

/// Parameters of [`slic`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlicParams {
    pub region_size: usize,
    pub compactness: f64,
    pub iterations: usize,
}

impl Default for SlicParams {
    fn default() -> Self {
        SlicParams { region_size: 20, compactness: 10.0, iterations: 10 }
    }
}

/// sRGB in `[0,1]` to CIELAB under D65.
pub fn srgb_to_lab(rgb: [f32; 3]) -> [f64; 3] {
    let lin = |c: f32| {
        let c = c as f64;
        if c <= 0.04045 {
            c / 12.92
        } else {
            math::powf((c + 0.055) / 1.055, 2.4)
        }
    };
    let (r, g, b) = (lin(rgb[0]), lin(rgb[1]), lin(rgb[2]));
    let x = (0.412_456_4 * r + 0.357_576_1 * g + 0.180_437_5 * b) / 0.950_47;
    let y = 0.212_672_9 * r + 0.715_152_2 * g + 0.072_175 * b;
    let z = (0.019_333_9 * r + 0.119_192 * g + 0.950_304_1 * b) / 1.088_83;
    let f = |t: f64| {
        if t > 0.008_856 {
            math::cbrt(t)
        } else {
            7.787 * t + 16.0 / 116.0
        }
    };
    let (fx, fy, fz) = (f(x), f(y), f(z));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

#[derive(Debug, Clone, Copy)]
struct Center {
    y: f64,
    x: f64,
    lab: [f64; 3],
}

/// Simple linear iterative clustering.
///
/// Centers start on a `region_size` grid, nudged to the lowest-gradient
/// pixel of their 3×3 neighborhood. Each pass assigns pixels within a
/// `2·region_size` window to the nearest center under
/// `sqrt(d_lab² + (compactness/region_size)²·d_xy²)`. Afterwards
/// 4-connected fragments smaller than `region_size²/4` are merged into their
/// largest neighbor and labels are renumbered densely in scan order.
pub fn slic(img: &ImageTensor, params: SlicParams) -> Result<SuperpixelMap> {
    let s = params.region_size;
    if s < 2 {
        return Err(Error::InvalidArgument("slic region_size must be >= 2".into()));
    }
    if params.iterations == 0 {
        return Err(Error::InvalidArgument("slic needs at least one iteration".into()));
    }
    let (h, w) = (img.height(), img.width());
    if h < s || w < s {
        return Ok(SuperpixelMap::single_region(h, w));
    }
    let n = h * w;
    let lab: Vec<[f64; 3]> = (0..n)
        .map(|p| {
            let (y, x) = (p / w, p % w);
            srgb_to_lab([img.get(0, y, x), img.get(1, y, x), img.get(2, y, x)])
        })
        .collect();
    let at = |y: isize, x: isize| lab[y.clamp(0, h as isize - 1) as usize * w + x.clamp(0, w as isize - 1) as usize];
    let sq = |a: [f64; 3], b: [f64; 3]| (0..3).map(|i| (a[i] - b[i]) * (a[i] - b[i])).sum::<f64>();
    let gradient = |y: isize, x: isize| sq(at(y, x + 1), at(y, x - 1)) + sq(at(y + 1, x), at(y - 1, x));

    let (ny, nx) = (h / s, w / s);
    let (step_y, step_x) = (h as f64 / ny as f64, w as f64 / nx as f64);
    let mut centers = Vec::with_capacity(ny * nx);
    for j in 0..ny {
        for i in 0..nx {
            let y = (j as f64 + 0.5) * step_y - 0.5;
            let x = (i as f64 + 0.5) * step_x - 0.5;
            let (ry, rx) = (math::round(y) as isize, math::round(x) as isize);
            let mut best = (gradient(ry, rx), ry, rx);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (yy, xx) = (ry + dy, rx + dx);
                    if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                        continue;
                    }
                    let g = gradient(yy, xx);
                    if g < best.0 {
                        best = (g, yy, xx);
                    }
                }
            }
            let (cy, cx) = if best.1 == ry && best.2 == rx { (y, x) } else { (best.1 as f64, best.2 as f64) };
            centers.push(Center { y: cy, x: cx, lab: at(best.1, best.2) });
        }
    }

    let ratio = params.compactness / s as f64;
    let spatial_weight = ratio * ratio;
    let mut labels = vec![-1i64; n];
    let mut dist = vec![f64::INFINITY; n];
    for _ in 0..params.iterations {
        dist.fill(f64::INFINITY);
        labels.fill(-1);
        for (k, c) in centers.iter().enumerate() {
            let y0 = (math::floor(c.y) as isize - s as isize).max(0) as usize;
            let y1 = ((math::ceil(c.y) as isize + s as isize) as usize).min(h - 1);
            let x0 = (math::floor(c.x) as isize - s as isize).max(0) as usize;
            let x1 = ((math::ceil(c.x) as isize + s as isize) as usize).min(w - 1);
            for y in y0..=y1 {
                let dy = y as f64 - c.y;
                for x in x0..=x1 {
                    let p = y * w + x;
                    let dx = x as f64 - c.x;
                    let d = sq(lab[p], c.lab) + spatial_weight * (dy * dy + dx * dx);
                    if d < dist[p] {
                        dist[p] = d;
                        labels[p] = k as i64;
                    }
                }
            }
        }
        let mut sums = vec![[0.0f64; 6]; centers.len()];
        for (p, &l) in labels.iter().enumerate() {
            if l < 0 {
                continue;
            }
            let acc = &mut sums[l as usize];
            acc[0] += (p / w) as f64;
            acc[1] += (p % w) as f64;
            for c in 0..3 {
                acc[2 + c] += lab[p][c];
            }
            acc[5] += 1.0;
        }
        for (c, acc) in centers.iter_mut().zip(&sums) {
            if acc[5] > 0.0 {
                c.y = acc[0] / acc[5];
                c.x = acc[1] / acc[5];
                c.lab = [acc[2] / acc[5], acc[3] / acc[5], acc[4] / acc[5]];
            }
        }
    }

    let min_size = (s * s / 4).max(1);
    // Strong texture splits clusters into large fragments; cap the count at
    // 1.2 times the seeded grid.
    let max_regions = (ny * nx * 6 / 5).max(1);
    let merged = enforce_connectivity(&labels, h, w, min_size, max_regions);
    Ok(SuperpixelMap { height: h, width: w, labels: merged.0, region_count: merged.1 })
}

struct Components {
    /// Component id per pixel.
    id: Vec<usize>,
    count: usize,
}

fn components<L: Copy + PartialEq>(labels: &[L], h: usize, w: usize) -> Components {
    let mut id = vec![usize::MAX; h * w];
    let mut count = 0;
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if id[start] != usize::MAX {
            continue;
        }
        id[start] = count;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            let (y, x) = (p / w, p % w);
            let mut visit = |q: usize| {
                if id[q] == usize::MAX && labels[q] == labels[start] {
                    id[q] = count;
                    queue.push_back(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
        }
        count += 1;
    }
    Components { id, count }
}

fn find(parent: &mut [usize], mut a: usize) -> usize {
    while parent[a] != a {
        parent[a] = parent[parent[a]];
        a = parent[a];
    }
    a
}

/// Splits labels into 4-connected components, merges components smaller
/// than `min_size` into their largest neighbor and relabels densely.
///
/// If more than `max_regions` survive, the smallest remaining regions are
/// merged the same way until the count fits.
fn enforce_connectivity(
    labels: &[i64],
    h: usize,
    w: usize,
    min_size: usize,
    max_regions: usize,
) -> (Vec<u32>, usize) {
    let comps = components(labels, h, w);
    let mut size = vec![0usize; comps.count];
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); comps.count];
    for (p, &c) in comps.id.iter().enumerate() {
        size[c] += 1;
        members[c].push(p);
    }
    let mut parent: Vec<usize> = (0..comps.count).collect();
    let mut live = comps.count;
    let mut by_size: Vec<usize> = (0..comps.count).collect();
    by_size.sort_by_key(|&c| (size[c], c));
    let order = (0..comps.count).map(|c| (c, false)).chain(by_size.into_iter().map(|c| (c, true)));
    for (c, over_budget) in order {
        let root = find(&mut parent, c);
        if root != c {
            continue;
        }
        if over_budget {
            if live <= max_regions {
                break;
            }
        } else if size[c] >= min_size {
            continue;
        }
        let mut best: Option<(usize, usize)> = None;
        for &p in &members[c] {
            let (y, x) = (p / w, p % w);
            let mut consider = |q: usize, parent: &mut Vec<usize>| {
                let r = find(parent, comps.id[q]);
                if r != c && best.map_or(true, |(bs, br)| size[r] > bs || (size[r] == bs && r < br)) {
                    best = Some((size[r], r));
                }
            };
            if x > 0 {
                consider(p - 1, &mut parent);
            }
            if x + 1 < w {
                consider(p + 1, &mut parent);
            }
            if y > 0 {
                consider(p - w, &mut parent);
            }
            if y + 1 < h {
                consider(p + w, &mut parent);
            }
        }
        if let Some((_, target)) = best {
            parent[c] = target;
            size[target] += size[c];
            let moved = core::mem::take(&mut members[c]);
            members[target].extend(moved);
            live -= 1;
        }
    }
    let mut dense = vec![u32::MAX; comps.count];
    let mut next = 0u32;
    let mut out = vec![0u32; h * w];
    for p in 0..h * w {
        let r = find(&mut parent, comps.id[p]);
        if dense[r] == u32::MAX {
            dense[r] = next;
            next += 1;
        }
        out[p] = dense[r];
    }
    (out, next as usize)
}

/// Regular tiling with row-major cell indices; edge cells may be smaller.
pub fn grid_decompose(h: usize, w: usize, cell_size: usize) -> Result<SuperpixelMap> {
    if cell_size == 0 {
        return Err(Error::InvalidArgument("grid cell size must be >= 1".into()));
    }
    let cols = w.div_ceil(cell_size);
    let rows = h.div_ceil(cell_size);
    let labels = (0..h * w)
        .map(|p| ((p / w / cell_size) * cols + (p % w) / cell_size) as u32)
        .collect();
    Ok(SuperpixelMap { height: h, width: w, labels, region_count: rows * cols })
}

/// Pixel count and tight inclusive bounding box `(y0, x0, y1, x1)` of one region.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegionStat {
    pub pixels: usize,
    pub bbox: (usize, usize, usize, usize),
}

pub fn region_stats(map: &SuperpixelMap) -> Vec<RegionStat> {
    let mut stats =
        vec![RegionStat { pixels: 0, bbox: (usize::MAX, usize::MAX, 0, 0) }; map.region_count];
    for (p, &l) in map.labels.iter().enumerate() {
        let (y, x) = (p / map.width, p % map.width);
        let s = &mut stats[l as usize];
        s.pixels += 1;
        s.bbox.0 = s.bbox.0.min(y);
        s.bbox.1 = s.bbox.1.min(x);
        s.bbox.2 = s.bbox.2.max(y);
        s.bbox.3 = s.bbox.3.max(x);
    }
    stats
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use proptest::prelude::*;
    use rand::Rng;

    fn two_tone(h: usize, w: usize, split: usize) -> ImageTensor {
        let mut img = ImageTensor::filled(h, w, [0.85, 0.15, 0.1]);
        for y in 0..h {
            for x in split..w {
                img.set(0, y, x, 0.1);
                img.set(1, y, x, 0.2);
                img.set(2, y, x, 0.9);
            }
        }
        img
    }

    #[test]
    fn constant_image_gives_the_initial_grid() {
        let img = ImageTensor::filled(64, 64, [0.5, 0.4, 0.3]);
        let map = slic(&img, SlicParams { region_size: 16, ..Default::default() }).unwrap();
        assert_eq!(map.region_count(), 16);
        for (k, st) in region_stats(&map).iter().enumerate() {
            assert_eq!(st.pixels, 256, "region {k}");
            assert_eq!(st.bbox.2 - st.bbox.0, 15);
            assert_eq!(st.bbox.3 - st.bbox.1, 15);
        }
    }

    #[test]
    fn small_image_is_one_region() {
        let img = ImageTensor::filled(5, 30, [0.1, 0.2, 0.3]);
        let map = slic(&img, SlicParams { region_size: 8, ..Default::default() }).unwrap();
        assert_eq!(map.region_count(), 1);
    }

    #[test]
    fn rejects_bad_parameters() {
        let img = ImageTensor::filled(8, 8, [0.0; 3]);
        assert!(slic(&img, SlicParams { region_size: 1, ..Default::default() }).is_err());
        assert!(slic(&img, SlicParams { iterations: 0, region_size: 2, ..Default::default() }).is_err());
        assert!(grid_decompose(4, 4, 0).is_err());
    }

    #[test]
    fn two_tone_regions_do_not_straddle_the_split() {
        let split = 32;
        let map = slic(&two_tone(64, 64, split), SlicParams { region_size: 32, ..Default::default() }).unwrap();
        for st in region_stats(&map) {
            let left = st.bbox.3 < split + 1;
            let right = st.bbox.1 + 1 >= split;
            assert!(left || right, "region spans columns {}..={}", st.bbox.1, st.bbox.3);
        }
    }

    #[test]
    fn grid_examples() {
        let m = grid_decompose(4, 4, 2).unwrap();
        assert_eq!(m.labels(), &[0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 3, 3, 2, 2, 3, 3]);
        assert_eq!(grid_decompose(5, 4, 2).unwrap().region_count(), 6);
        assert_eq!(grid_decompose(512, 512, 20).unwrap().region_count(), 676);
        let counts: Vec<usize> = region_stats(&m).iter().map(|s| s.pixels).collect();
        assert_eq!(counts, vec![4, 4, 4, 4]);
    }

    #[test]
    fn single_region_stats() {
        let st = region_stats(&SuperpixelMap::single_region(3, 7));
        assert_eq!(st.len(), 1);
        assert_eq!(st[0].pixels, 21);
        assert_eq!(st[0].bbox, (0, 0, 2, 6));
    }

    #[test]
    fn stats_match_brute_force_histogram() {
        let mut rng = seed::rng(11);
        let (h, w) = (13, 17);
        let labels: Vec<u32> = (0..h * w).map(|p| if p < 9 { p as u32 } else { rng.random_range(0..9) }).collect();
        let map = SuperpixelMap::from_labels(h, w, labels.clone()).unwrap();
        let stats = region_stats(&map);
        for r in 0..9u32 {
            let count = labels.iter().filter(|&&l| l == r).count();
            assert_eq!(stats[r as usize].pixels, count);
        }
    }

    #[test]
    fn lab_reference_points() {
        let white = srgb_to_lab([1.0, 1.0, 1.0]);
        assert!((white[0] - 100.0).abs() < 1e-2 && white[1].abs() < 1e-2 && white[2].abs() < 1e-2);
        let black = srgb_to_lab([0.0, 0.0, 0.0]);
        assert!(black[0].abs() < 1e-9);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn slic_output_is_a_valid_map(seed in any::<u64>(), h in 4usize..40, w in 4usize..40, s in 2usize..9) {
            let mut rng = seed::rng(seed);
            let data = (0..3 * h * w).map(|_| rng.random::<f32>()).collect();
            let img = ImageTensor::new(h, w, data).unwrap();
            let map = slic(&img, SlicParams { region_size: s, compactness: 10.0, iterations: 3 }).unwrap();
            prop_assert!(SuperpixelMap::from_labels(h, w, map.labels().to_vec()).is_ok());
            prop_assert!(map.regions_are_connected());
            let total: usize = region_stats(&map).iter().map(|r| r.pixels).sum();
            prop_assert_eq!(total, h * w);
            prop_assert!(map.region_count() <= (2 * h * w / (s * s)).max(1));
            prop_assert_eq!(slic(&img, SlicParams { region_size: s, compactness: 10.0, iterations: 3 }).unwrap(), map);
        }
    }
}
