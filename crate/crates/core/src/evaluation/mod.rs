//! Evaluation protocol: overclustering with label matching, linear probing,
//! PCA renderings and decomposition counts.

pub mod assign;
pub mod kmeans;
pub mod pca;
pub mod probe;

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec::Vec;

pub use assign::{greedy_assign, hungarian_assign, miou_acc, random_baseline_miou, ConfusionMatrix, SegMetrics};
pub use kmeans::{kmeans, KMeans};
pub use pca::{pca_visualize, Pca};
pub use probe::{linear_probe, LinearProbe, ProbeConfig};

use crate::encoder::{self, EncoderParams};
use crate::error::{Error, Result};
use crate::imaging::ImageTensor;
use crate::math::Real;

/// Cap on the vectors fed to k-means; larger sets are strided down.
pub const MAX_FIT_VECTORS: usize = 1_000_000;

/// Pixel-major embedding rows of an image (normalized internally).
pub fn embed_rows<R: Real>(params: &EncoderParams<R>, img: &ImageTensor) -> Result<Vec<f64>> {
    let input = if img.is_normalized() { img.clone() } else { img.normalize() };
    Ok(encoder::forward(params, &input)?.to_rows())
}

/// Every `stride`-th row so that at most `max_rows` remain.
pub fn stride_subsample(rows: &[f64], dim: usize, max_rows: usize) -> Vec<f64> {
    let n = rows.len() / dim;
    if n <= max_rows {
        return rows.to_vec();
    }
    let stride = n.div_ceil(max_rows);
    rows.chunks(dim).step_by(stride).flatten().copied().collect()
}

fn has_distinct(rows: &[f64], dim: usize, k: usize) -> bool {
    let mut seen = BTreeSet::new();
    for x in rows.chunks(dim) {
        seen.insert(x.iter().map(|v| v.to_bits()).collect::<Vec<u64>>());
        if seen.len() >= k {
            return true;
        }
    }
    false
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterReport {
    pub k_eval: usize,
    pub greedy: SegMetrics,
    pub hungarian: SegMetrics,
    pub confusion: ConfusionMatrix,
}

/// k-means on `rows`, then greedy and Hungarian cluster→class matching
/// against `gt` over `classes` labels.
pub fn cluster_eval(
    rows: &[f64],
    dim: usize,
    gt: &[u32],
    classes: usize,
    k_eval: usize,
    iterations: usize,
    rng_seed: u64,
    ignore: Option<u32>,
) -> Result<ClusterReport> {
    if rows.len() != gt.len() * dim {
        return Err(Error::ShapeMismatch { what: "embeddings vs labels", expected: (gt.len(), dim), found: (rows.len() / dim.max(1), dim) });
    }
    let fit_rows = stride_subsample(rows, dim, MAX_FIT_VECTORS);
    if !has_distinct(&fit_rows, dim, k_eval) {
        return Err(Error::InvalidArgument(format!("k_eval = {k_eval} exceeds the number of distinct embeddings")));
    }
    let km = kmeans(&fit_rows, dim, k_eval, iterations, rng_seed)?;
    let pred = km.predict(rows);
    let mut cm = ConfusionMatrix::new(k_eval, classes);
    cm.accumulate(&pred, gt, ignore);
    let greedy = miou_acc(&cm.merge(&greedy_assign(&cm)));
    let hungarian = miou_acc(&cm.merge(&hungarian_assign(&cm)));
    Ok(ClusterReport { k_eval, greedy, hungarian, confusion: cm })
}

/// Probe trained on one split, scored on another.
pub fn probe_eval(
    train_rows: &[f64],
    train_gt: &[u32],
    val_rows: &[f64],
    val_gt: &[u32],
    dim: usize,
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<(LinearProbe, SegMetrics)> {
    let probe = linear_probe(train_rows, train_gt, dim, classes, cfg)?;
    let pred = probe.predict(val_rows);
    let mut cm = ConfusionMatrix::new(classes, classes);
    cm.accumulate(&pred, val_gt, None);
    Ok((probe, miou_acc(&cm)))
}

/// Per-class pixel counts.
pub fn class_histogram(gt: &[u32], classes: usize) -> Vec<u64> {
    let mut h = alloc::vec![0u64; classes];
    gt.iter().filter(|&&g| (g as usize) < classes).for_each(|&g| h[g as usize] += 1);
    h
}
