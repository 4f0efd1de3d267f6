//! Region trees: per-pixel embeddings grouped by (image, view, region).

use alloc::collections::BTreeMap;
use alloc::collections::BTreeSet;
use alloc::vec;
use alloc::vec::Vec;

use crate::encoder::EmbeddingMap;
use crate::error::{Error, Result};
use crate::math::{self, Real};
use crate::viewgen::{ViewLabels, SENTINEL};

/// Means whose norm falls below this are treated as cancelled out.
pub const DEGENERATE_MEAN: f64 = 1e-6;

/// Nested map `n -> m -> region id -> payload`.
///
/// Ordered maps keep iteration deterministic, which the training loop relies on.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionTree<P> {
    nodes: BTreeMap<(usize, usize), BTreeMap<u32, P>>,
}

impl<P> Default for RegionTree<P> {
    fn default() -> Self {
        Self { nodes: BTreeMap::new() }
    }
}

impl<P> RegionTree<P> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, image: usize, view: usize, region: u32, payload: P) {
        self.nodes.entry((image, view)).or_default().insert(region, payload);
    }

    /// Registers `(image, view)` even if it ends up holding no regions.
    pub fn touch(&mut self, image: usize, view: usize) {
        self.nodes.entry((image, view)).or_default();
    }

    pub fn get(&self, image: usize, view: usize, region: u32) -> Option<&P> {
        self.nodes.get(&(image, view)).and_then(|r| r.get(&region))
    }

    /// `I(n, m)`.
    pub fn region_count(&self, image: usize, view: usize) -> usize {
        self.nodes.get(&(image, view)).map_or(0, BTreeMap::len)
    }

    pub fn region_ids(&self, image: usize, view: usize) -> Vec<u32> {
        self.nodes.get(&(image, view)).map(|r| r.keys().copied().collect()).unwrap_or_default()
    }

    pub fn regions(&self, image: usize, view: usize) -> impl Iterator<Item = (u32, &P)> {
        self.nodes.get(&(image, view)).into_iter().flat_map(|r| r.iter().map(|(&i, p)| (i, p)))
    }

    /// Every `(n, m)` key, sorted.
    pub fn nodes(&self) -> Vec<(usize, usize)> {
        self.nodes.keys().copied().collect()
    }

    pub fn images(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.nodes.keys().map(|&(n, _)| n).collect();
        set.into_iter().collect()
    }

    pub fn views(&self, image: usize) -> Vec<usize> {
        self.nodes.keys().filter(|&&(n, _)| n == image).map(|&(_, m)| m).collect()
    }

    /// Total number of payloads.
    pub fn len(&self) -> usize {
        self.nodes.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, u32, &P)> {
        self.nodes.iter().flat_map(|(&(n, m), r)| r.iter().map(move |(&i, p)| (n, m, i, p)))
    }

    pub fn map<Q>(&self, mut f: impl FnMut(usize, usize, u32, &P) -> Q) -> RegionTree<Q> {
        let mut out = RegionTree::new();
        for (&(n, m), r) in &self.nodes {
            out.touch(n, m);
            for (&i, p) in r {
                out.insert(n, m, i, f(n, m, i, p));
            }
        }
        out
    }

    fn remove(&mut self, image: usize, region: u32) {
        for (_, r) in self.nodes.range_mut((image, 0)..=(image, usize::MAX)) {
            r.remove(&region);
        }
    }
}

/// Embedding vectors of one region within one view, with their pixel indices.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionPixels {
    pub dim: usize,
    pub pixels: Vec<usize>,
    /// `pixels.len() × dim`, row per pixel.
    pub vectors: Vec<f64>,
}

impl RegionPixels {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn vector(&self, j: usize) -> &[f64] {
        &self.vectors[j * self.dim..(j + 1) * self.dim]
    }
}

/// Renormalized region mean `z*`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanVector {
    pub z: Vec<f64>,
    /// Norm of the raw mean before renormalization.
    pub norm: f64,
    pub count: usize,
}

/// Inserts the vectors of every non-sentinel region of one view.
pub fn build_tree<R: Real>(
    emb: &EmbeddingMap<R>,
    labels: &ViewLabels,
    image: usize,
    view: usize,
    tree: &mut RegionTree<RegionPixels>,
) -> Result<()> {
    if (emb.height, emb.width) != (labels.height(), labels.width()) {
        return Err(Error::ShapeMismatch {
            what: "embedding map vs label map",
            expected: (labels.height(), labels.width()),
            found: (emb.height, emb.width),
        });
    }
    let dim = emb.dim;
    let mut groups: BTreeMap<u32, RegionPixels> = BTreeMap::new();
    for (p, &l) in labels.labels().iter().enumerate() {
        if l == SENTINEL {
            continue;
        }
        let entry = groups.entry(l as u32).or_insert_with(|| RegionPixels { dim, pixels: Vec::new(), vectors: Vec::new() });
        entry.pixels.push(p);
        let start = entry.vectors.len();
        entry.vectors.resize(start + dim, 0.0);
        emb.add_vector(p, &mut entry.vectors[start..]);
    }
    tree.touch(image, view);
    for (i, g) in groups {
        tree.insert(image, view, i, g);
    }
    Ok(())
}

fn mean_vector(region: &RegionPixels) -> MeanVector {
    let mut mean = vec![0.0; region.dim];
    for j in 0..region.len() {
        for (a, b) in mean.iter_mut().zip(region.vector(j)) {
            *a += b;
        }
    }
    let count = region.len().max(1) as f64;
    mean.iter_mut().for_each(|v| *v /= count);
    let norm = math::norm(&mean);
    if norm >= DEGENERATE_MEAN {
        mean.iter_mut().for_each(|v| *v /= norm);
    }
    MeanVector { z: mean, norm, count: region.len() }
}

/// Region means `z*`, renormalized to unit length.
///
/// A region whose mean cancels in any view is dropped from every view of that
/// image so the views keep sharing one region set.
pub fn pool_means(tree: &RegionTree<RegionPixels>) -> RegionTree<MeanVector> {
    let mut pooled = tree.map(|_, _, _, r| mean_vector(r));
    let dead: Vec<(usize, u32)> = pooled
        .iter()
        .filter(|(_, _, _, mv)| mv.norm < DEGENERATE_MEAN || mv.count == 0)
        .map(|(n, _, i, _)| (n, i))
        .collect();
    for (n, i) in dead {
        pooled.remove(n, i);
    }
    pooled
}

/// Gradient w.r.t. the per-pixel embeddings of view `(image, view)` given
/// gradients w.r.t. its pooled means. Output is `D×h×w` planar, zero outside
/// pooled regions.
pub fn pool_backward(
    tree: &RegionTree<RegionPixels>,
    pooled: &RegionTree<MeanVector>,
    grads: &RegionTree<Vec<f64>>,
    image: usize,
    view: usize,
    dim: usize,
    pixels: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; dim * pixels];
    for (i, g) in grads.regions(image, view) {
        let (Some(mv), Some(region)) = (pooled.get(image, view, i), tree.get(image, view, i)) else {
            continue;
        };
        // d z*/d mean = (I - z* z*^T) / |mean|, then the mean splits evenly.
        let proj = math::dot(g, &mv.z);
        let scale = 1.0 / (mv.norm * region.len() as f64);
        for (c, (&gc, &zc)) in g.iter().zip(&mv.z).enumerate() {
            let d = (gc - proj * zc) * scale;
            let plane = &mut out[c * pixels..(c + 1) * pixels];
            for &p in &region.pixels {
                plane[p] += d;
            }
        }
    }
    out
}
