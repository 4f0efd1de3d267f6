//! Principal components of embedding maps, rendered as RGB.

use alloc::vec;
use alloc::vec::Vec;

use crate::encoder::EmbeddingMap;
use crate::math::{self, Real};

/// Eigenvalues (descending) and unit eigenvectors of a symmetric `n×n`
/// matrix by cyclic Jacobi rotations.
pub fn symmetric_eigen(matrix: &[f64], n: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut a = matrix.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().max(f64::MIN_POSITIVE);
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i * n + j] * a[i * n + j]).sum();
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + math::sqrt(theta * theta + 1.0));
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / math::sqrt(t * t + 1.0);
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let vectors = order.iter().map(|&i| (0..n).map(|k| v[k * n + i]).collect()).collect();
    (values, vectors)
}

/// Top principal directions of pixel-major rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    pub variances: Vec<f64>,
    /// Each flipped so its largest-magnitude coefficient is positive.
    pub components: Vec<Vec<f64>>,
}

pub fn pca(rows: &[f64], dim: usize, count: usize) -> Pca {
    let n = rows.len() / dim.max(1);
    let mut mean = vec![0.0; dim];
    for x in rows.chunks(dim) {
        mean.iter_mut().zip(x).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n.max(1) as f64);
    let mut cov = vec![0.0; dim * dim];
    for x in rows.chunks(dim) {
        for i in 0..dim {
            let di = x[i] - mean[i];
            for j in i..dim {
                cov[i * dim + j] += di * (x[j] - mean[j]);
            }
        }
    }
    for i in 0..dim {
        for j in i..dim {
            let v = cov[i * dim + j] / n.max(1) as f64;
            cov[i * dim + j] = v;
            cov[j * dim + i] = v;
        }
    }
    let (values, vectors) = symmetric_eigen(&cov, dim);
    let k = count.min(dim);
    let components = vectors
        .into_iter()
        .take(k)
        .map(|mut v| {
            let lead = v.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
            if lead < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            v
        })
        .collect();
    Pca { mean, variances: values.into_iter().take(k).collect(), components }
}

impl Pca {
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.iter().zip(x).zip(&self.mean).map(|((ci, xi), mi)| ci * (xi - mi)).sum())
            .collect()
    }
}

/// Top three components per pixel, min-max scaled to `[0, 255]`; channels
/// without variance are filled with 128. Output is interleaved RGB.
pub fn pca_visualize<R: Real>(emb: &EmbeddingMap<R>) -> Vec<u8> {
    let rows = emb.to_rows();
    let hw = emb.pixels();
    let fit = pca(&rows, emb.dim, 3);
    let top = fit.variances.first().copied().unwrap_or(0.0).max(0.0);
    let mut out = vec![128u8; hw * 3];
    for (ch, comp) in fit.components.iter().enumerate() {
        if !(fit.variances[ch] > 1e-12 * top.max(1e-300)) || top <= 1e-24 {
            continue;
        }
        let proj: Vec<f64> = rows.chunks(emb.dim).map(|x| comp.iter().zip(x).zip(&fit.mean).map(|((c, v), m)| c * (v - m)).sum()).collect();
        let lo = proj.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = proj.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(hi > lo) {
            continue;
        }
        for (p, &v) in proj.iter().enumerate() {
            out[p * 3 + ch] = math::round((v - lo) / (hi - lo) * 255.0) as u8;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand::Rng;

    fn map_from_rows(h: usize, w: usize, dim: usize, rows: &[f64]) -> EmbeddingMap<f64> {
        let hw = h * w;
        let mut data = vec![0.0; dim * hw];
        for p in 0..hw {
            for c in 0..dim {
                data[c * hw + p] = rows[p * dim + c];
            }
        }
        EmbeddingMap { dim, height: h, width: w, data, normalized: false }
    }

    #[test]
    fn axis_aligned_cloud_gives_axes_by_variance() {
        let mut rng = seed::rng(1);
        let scales = [1.0, 5.0, 2.5];
        let rows: Vec<f64> = (0..3000).flat_map(|_| scales.map(|s| s * rng.random_range(-1.0..1.0))).collect();
        let fit = pca(&rows, 3, 3);
        for (comp, axis) in fit.components.iter().zip([1usize, 2, 0]) {
            assert!((comp[axis] - 1.0).abs() < 1e-2, "{comp:?}");
        }
    }

    #[test]
    fn constant_map_is_gray() {
        let emb = map_from_rows(4, 4, 5, &[0.3; 80]);
        assert!(pca_visualize(&emb).iter().all(|&v| v == 128));
    }

    #[test]
    fn rank_two_map_fills_third_channel() {
        let mut rng = seed::rng(2);
        let rows: Vec<f64> = (0..36).flat_map(|_| {
            let a: f64 = rng.random_range(-1.0..1.0);
            let b: f64 = rng.random_range(-1.0..1.0);
            [a, b, 0.0, 0.0]
        }).collect();
        let img = pca_visualize(&map_from_rows(6, 6, 4, &rows));
        assert!(img.chunks(3).all(|p| p[2] == 128));
        assert!(img.chunks(3).any(|p| p[0] == 255) && img.chunks(3).any(|p| p[0] == 0));
    }

    /// Dominant eigenvectors by power iteration with deflation.
    fn power_components(cov: &[f64], n: usize, k: usize) -> Vec<Vec<f64>> {
        let mut m = cov.to_vec();
        let mut out = Vec::new();
        for j in 0..k {
            let mut v: Vec<f64> = (0..n).map(|i| 1.0 + (i * 7 + j) as f64 * 0.01).collect();
            let mut lambda = 0.0;
            for _ in 0..20000 {
                let mut w = vec![0.0; n];
                for r in 0..n {
                    for c in 0..n {
                        w[r] += m[r * n + c] * v[c];
                    }
                }
                let norm = math::norm(&w);
                lambda = norm;
                v = w.into_iter().map(|x| x / norm).collect();
            }
            for r in 0..n {
                for c in 0..n {
                    m[r * n + c] -= lambda * v[r] * v[c];
                }
            }
            out.push(v);
        }
        out
    }

    #[test]
    fn projection_matches_power_iteration() {
        let mut rng = seed::rng(6);
        let dim = 8;
        let mix: Vec<f64> = (0..dim * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let rows: Vec<f64> = (0..400)
            .flat_map(|_| {
                let z: Vec<f64> = (0..dim).map(|i| rng.random_range(-1.0..1.0) * (dim - i) as f64).collect();
                (0..dim).map(|r| (0..dim).map(|c| mix[r * dim + c] * z[c]).sum::<f64>()).collect::<Vec<f64>>()
            })
            .collect();
        let fit = pca(&rows, dim, 3);
        let n = 400.0;
        let mut cov = vec![0.0; dim * dim];
        for x in rows.chunks(dim) {
            for i in 0..dim {
                for j in 0..dim {
                    cov[i * dim + j] += (x[i] - fit.mean[i]) * (x[j] - fit.mean[j]) / n;
                }
            }
        }
        let oracle = power_components(&cov, dim, 3);
        for x in rows.chunks(dim).take(50) {
            let got = fit.project(x);
            for (k, v) in oracle.iter().enumerate() {
                let want: f64 = v.iter().zip(x).zip(&fit.mean).map(|((c, a), m)| c * (a - m)).sum();
                assert!((got[k].abs() - want.abs()).abs() < 1e-5, "component {k}: {} vs {want}", got[k]);
            }
        }
    }

    #[test]
    fn pixel_permutation_permutes_output() {
        let mut rng = seed::rng(3);
        let rows: Vec<f64> = (0..16 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = pca_visualize(&map_from_rows(4, 4, 4, &rows));
        let mut perm: Vec<usize> = (0..16).collect();
        perm.reverse();
        let swapped: Vec<f64> = perm.iter().flat_map(|&p| rows[p * 4..(p + 1) * 4].to_vec()).collect();
        let b = pca_visualize(&map_from_rows(4, 4, 4, &swapped));
        for (i, &p) in perm.iter().enumerate() {
            assert_eq!(&b[i * 3..i * 3 + 3], &a[p * 3..p * 3 + 3]);
        }
    }
}
