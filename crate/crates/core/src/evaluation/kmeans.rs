//! k-means++ seeding and Lloyd iterations.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub dim: usize,
    pub k: usize,
    /// `k × dim`, row-major.
    pub centroids: Vec<f64>,
    pub assignments: Vec<usize>,
    /// Inertia after each assignment pass.
    pub inertia: Vec<f64>,
}

impl KMeans {
    pub fn centroid(&self, c: usize) -> &[f64] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }

    pub fn final_inertia(&self) -> f64 {
        self.inertia.last().copied().unwrap_or(0.0)
    }

    /// Nearest centroid of every row of `rows`.
    pub fn predict(&self, rows: &[f64]) -> Vec<usize> {
        rows.chunks(self.dim).map(|x| nearest(x, &self.centroids, self.dim).0).collect()
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f64], centroids: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cen) in centroids.chunks(dim).enumerate() {
        let d = dist2(x, cen);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn seed_centroids(rows: &[f64], dim: usize, k: usize, rng: &mut seed::Rng) -> Vec<f64> {
    let n = rows.len() / dim;
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(&rows[first * dim..(first + 1) * dim]);
    let mut d2: Vec<f64> = rows.chunks(dim).map(|x| dist2(x, &centroids[..dim])).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    idx = i;
                    break;
                }
                u -= d;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        let c = &rows[pick * dim..(pick + 1) * dim];
        for (i, x) in rows.chunks(dim).enumerate() {
            d2[i] = d2[i].min(dist2(x, c));
        }
        centroids.extend_from_slice(c);
    }
    centroids
}

/// Clusters the `dim`-wide rows of `rows` into `k` groups.
///
/// An emptied cluster is reseeded at the point farthest from its centroid.
pub fn kmeans(rows: &[f64], dim: usize, k: usize, iterations: usize, rng_seed: u64) -> Result<KMeans> {
    if dim == 0 || rows.len() % dim != 0 {
        return Err(Error::InvalidArgument(format!("{} values do not form rows of width {dim}", rows.len())));
    }
    let n = rows.len() / dim;
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("k = {k} needs 1 <= k <= {n} points")));
    }
    let mut rng = seed::rng(rng_seed);
    let mut centroids = seed_centroids(rows, dim, k, &mut rng);
    let mut assignments = vec![usize::MAX; n];
    let mut dists = vec![0.0; n];
    let mut inertia = Vec::new();
    for _ in 0..iterations.max(1) {
        let mut changed = false;
        for (i, x) in rows.chunks(dim).enumerate() {
            let (c, d) = nearest(x, &centroids, dim);
            changed |= assignments[i] != c;
            assignments[i] = c;
            dists[i] = d;
        }
        // Fill empty clusters from the worst-served points.
        let mut counts = vec![0usize; k];
        assignments.iter().for_each(|&a| counts[a] += 1);
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let far = (0..n)
                .filter(|&i| counts[assignments[i]] > 1)
                .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)));
            if let Some(i) = far {
                counts[assignments[i]] -= 1;
                assignments[i] = c;
                counts[c] = 1;
                dists[i] = 0.0;
                centroids[c * dim..(c + 1) * dim].copy_from_slice(&rows[i * dim..(i + 1) * dim]);
                changed = true;
            }
        }
        inertia.push(dists.iter().sum());
        let mut sums = vec![0.0; k * dim];
        for (i, x) in rows.chunks(dim).enumerate() {
            let s = &mut sums[assignments[i] * dim..(assignments[i] + 1) * dim];
            s.iter_mut().zip(x).for_each(|(a, b)| *a += b);
        }
        for c in 0..k {
            if counts[c] > 0 {
                for d in 0..dim {
                    centroids[c * dim + d] = sums[c * dim + d] / counts[c] as f64;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let final_inertia: f64 = rows.chunks(dim).zip(&assignments).map(|(x, &a)| dist2(x, &centroids[a * dim..(a + 1) * dim])).sum();
    inertia.push(final_inertia);
    Ok(KMeans { dim, k, centroids, assignments, inertia })
}
