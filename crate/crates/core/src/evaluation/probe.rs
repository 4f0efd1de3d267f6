//! Per-pixel linear classifier on frozen embeddings.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::math;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { epochs: 20, lr: 0.1, batch_size: 256, seed: 0 }
    }
}

/// `logits = W x + b`, `W` is `classes × dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    pub dim: usize,
    pub classes: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LinearProbe {
    pub fn zeros(dim: usize, classes: usize) -> Self {
        Self { dim, classes, weight: vec![0.0; dim * classes], bias: vec![0.0; classes] }
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        (0..self.classes).map(|c| self.bias[c] + math::dot(&self.weight[c * self.dim..(c + 1) * self.dim], x)).collect()
    }

    pub fn predict(&self, rows: &[f64]) -> Vec<usize> {
        rows.chunks(self.dim)
            .map(|x| {
                let l = self.logits(x);
                let mut best = 0;
                for (c, &v) in l.iter().enumerate() {
                    if v > l[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }

    /// Mean softmax cross-entropy over the selected rows, with gradients
    /// `(dW, db)`.
    pub fn loss_and_grad(&self, rows: &[f64], labels: &[u32], idx: &[usize]) -> (f64, Vec<f64>, Vec<f64>) {
        let mut gw = vec![0.0; self.weight.len()];
        let mut gb = vec![0.0; self.classes];
        let mut loss = 0.0;
        let mut logp = vec![0.0; self.classes];
        let scale = 1.0 / idx.len().max(1) as f64;
        for &i in idx {
            let x = &rows[i * self.dim..(i + 1) * self.dim];
            let y = labels[i] as usize;
            math::log_softmax(&self.logits(x), &mut logp);
            loss -= logp[y] * scale;
            for c in 0..self.classes {
                let d = (math::exp(logp[c]) - if c == y { 1.0 } else { 0.0 }) * scale;
                gb[c] += d;
                for (g, &xv) in gw[c * self.dim..(c + 1) * self.dim].iter_mut().zip(x) {
                    *g += d * xv;
                }
            }
        }
        (loss, gw, gb)
    }
}

/// Minibatch SGD with cosine-decayed LR over `cfg.epochs` passes.
pub fn linear_probe(rows: &[f64], labels: &[u32], dim: usize, classes: usize, cfg: &ProbeConfig) -> Result<LinearProbe> {
    if dim == 0 || rows.len() != labels.len() * dim {
        return Err(Error::ShapeMismatch { what: "probe embeddings vs labels", expected: (labels.len(), dim), found: (rows.len() / dim.max(1), dim) });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::InvalidArgument(format!("label {bad} outside {classes} classes")));
    }
    let mut probe = LinearProbe::zeros(dim, classes);
    let n = labels.len();
    if n == 0 {
        return Ok(probe);
    }
    let batch = cfg.batch_size.max(1);
    let per_epoch = n.div_ceil(batch);
    let total = (cfg.epochs * per_epoch).max(1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = seed::rng(cfg.seed);
    let mut t = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let lr = 0.5 * cfg.lr * (1.0 + math::cos(core::f64::consts::PI * t as f64 / total as f64));
            let (_, gw, gb) = probe.loss_and_grad(rows, labels, chunk);
            probe.weight.iter_mut().zip(&gw).for_each(|(w, g)| *w -= lr * g);
            probe.bias.iter_mut().zip(&gb).for_each(|(b, g)| *b -= lr * g);
            t += 1;
        }
    }
    Ok(probe)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn separable_points_are_classified_perfectly() {
        let mut rng = seed::rng(3);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..200 {
            let y = (i % 2) as u32;
            let sign = if y == 0 { 1.0 } else { -1.0 };
            rows.extend([sign + rng.random_range(-0.2..0.2), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);
            labels.push(y);
        }
        // The plane x0 = 0 separates the classes, so a perfect probe exists.
        assert!(labels.iter().enumerate().all(|(i, &y)| (rows[i * 3] > 0.0) == (y == 0)));
        let probe = linear_probe(&rows, &labels, 3, 2, &ProbeConfig::default()).unwrap();
        let pred = probe.predict(&rows);
        assert!(pred.iter().zip(&labels).all(|(&p, &y)| p == y as usize));
    }

    #[test]
    fn constant_features_give_majority_accuracy() {
        let rows = vec![0.5; 2 * 100];
        let labels: Vec<u32> = (0..100).map(|i| if i < 70 { 2 } else { (i % 2) as u32 }).collect();
        let probe = linear_probe(&rows, &labels, 2, 3, &ProbeConfig::default()).unwrap();
        let pred = probe.predict(&rows);
        let acc = pred.iter().zip(&labels).filter(|(&p, &y)| p == y as usize).count() as f64 / 100.0;
        assert!((acc - 0.7).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = seed::rng(8);
        let (dim, classes, n) = (4, 3, 10);
        let rows: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let labels: Vec<u32> = (0..n).map(|_| rng.random_range(0..classes as u32)).collect();
        let mut probe = LinearProbe::zeros(dim, classes);
        probe.weight.iter_mut().for_each(|w| *w = rng.random_range(-0.5..0.5));
        probe.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
        let idx: Vec<usize> = (0..n).collect();
        let (_, gw, gb) = probe.loss_and_grad(&rows, &labels, &idx);
        let h = 1e-6;
        for k in 0..probe.weight.len() + classes {
            let eval = |delta: f64| {
                let mut p = probe.clone();
                if k < p.weight.len() {
                    p.weight[k] += delta;
                } else {
                    p.bias[k - p.weight.len()] += delta;
                }
                p.loss_and_grad(&rows, &labels, &idx).0
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let analytic = if k < gw.len() { gw[k] } else { gb[k - gw.len()] };
            assert!((numeric - analytic).abs() <= 1e-5 * analytic.abs().max(1e-3), "{k}: {numeric} vs {analytic}");
        }
    }

    #[test]
    fn rejects_misaligned_input() {
        assert!(linear_probe(&[0.0; 5], &[0, 1], 2, 2, &ProbeConfig::default()).is_err());
        assert!(linear_probe(&[0.0; 4], &[0, 5], 2, 2, &ProbeConfig::default()).is_err());
    }
}
