//! Prototype scoring, Sinkhorn-Knopp assignment and the swapped-prediction loss.

use alloc::collections::BTreeMap;
use alloc::collections::VecDeque;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::math;
use crate::regions::{MeanVector, RegionTree};
use crate::seed;

/// View whose assignments serve as targets for the others.
pub const PRIMARY_VIEW: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub temperature: f64,
    pub epsilon: f64,
    pub sinkhorn_iterations: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { temperature: 0.1, epsilon: 0.05, sinkhorn_iterations: 3 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(self.temperature) || !ok(self.epsilon) || self.sinkhorn_iterations == 0 {
            return Err(Error::InvalidArgument(format!("loss config must be positive, got {self:?}")));
        }
        Ok(())
    }
}

/// Concept vectors as the columns of a `D×K` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    pub dim: usize,
    pub concepts: usize,
    /// Row-major `D×K`.
    pub data: Vec<f64>,
}

impl PrototypeBank {
    /// Gaussian columns, unit-normalized.
    pub fn init(rng_seed: u64, dim: usize, concepts: usize) -> Result<Self> {
        if dim == 0 || concepts == 0 {
            return Err(Error::InvalidArgument(format!("prototype bank needs D, K >= 1, got {dim}×{concepts}")));
        }
        let mut rng = seed::rng(rng_seed);
        let data = (0..dim * concepts).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut bank = Self { dim, concepts, data };
        bank.renormalize();
        Ok(bank)
    }

    pub fn from_columns(columns: &[Vec<f64>]) -> Self {
        let concepts = columns.len();
        let dim = columns.first().map_or(0, Vec::len);
        let mut data = vec![0.0; dim * concepts];
        for (k, col) in columns.iter().enumerate() {
            for (d, &v) in col.iter().enumerate() {
                data[d * concepts + k] = v;
            }
        }
        Self { dim, concepts, data }
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        (0..self.dim).map(|d| self.data[d * self.concepts + k]).collect()
    }

    pub fn column_norms(&self) -> Vec<f64> {
        (0..self.concepts).map(|k| math::norm(&self.column(k))).collect()
    }

    /// Restores unit column norms. Zero columns are left alone.
    pub fn renormalize(&mut self) {
        for (k, n) in self.column_norms().into_iter().enumerate() {
            if n > 0.0 {
                for d in 0..self.dim {
                    self.data[d * self.concepts + k] /= n;
                }
            }
        }
    }

    /// `s_k = z · c_k`.
    pub fn score(&self, z: &[f64]) -> Vec<f64> {
        let mut s = vec![0.0; self.concepts];
        for (d, &zd) in z.iter().enumerate() {
            let row = &self.data[d * self.concepts..(d + 1) * self.concepts];
            for (sk, &c) in s.iter_mut().zip(row) {
                *sk += zd * c;
            }
        }
        s
    }

    /// `C · ds`, the gradient reaching `z` from a score gradient.
    pub fn back_score(&self, ds: &[f64]) -> Vec<f64> {
        (0..self.dim)
            .map(|d| math::dot(&self.data[d * self.concepts..(d + 1) * self.concepts], ds))
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Score vectors of one `(n, m)`.
pub fn score(z: &[f64], bank: &PrototypeBank) -> Vec<f64> {
    bank.score(z)
}

/// FIFO of past primary-view score vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreQueue {
    capacity: usize,
    concepts: usize,
    entries: VecDeque<Vec<f64>>,
}

impl ScoreQueue {
    pub fn new(capacity: usize, concepts: usize) -> Self {
        Self { capacity, concepts, entries: VecDeque::with_capacity(capacity.min(1 << 16)) }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn concepts(&self) -> usize {
        self.concepts
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn fill_ratio(&self) -> f64 {
        if self.capacity == 0 {
            0.0
        } else {
            self.len() as f64 / self.capacity as f64
        }
    }

    /// The queue only enters the assignment problem once more than half full.
    pub fn participates(&self) -> bool {
        self.capacity > 0 && 2 * self.len() > self.capacity
    }

    pub fn push(&mut self, scores: &[f64]) -> Result<()> {
        if scores.len() != self.concepts {
            return Err(Error::ShapeMismatch { what: "queued score vector", expected: (1, self.concepts), found: (1, scores.len()) });
        }
        if self.capacity == 0 {
            return Ok(());
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(scores.to_vec());
        Ok(())
    }

    pub fn push_all<'a>(&mut self, rows: impl IntoIterator<Item = &'a Vec<f64>>) -> Result<()> {
        rows.into_iter().try_for_each(|r| self.push(r))
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.entries.iter()
    }
}

/// Entropic transport plan between `rows` items and `cols` concepts.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentMatrix {
    pub rows: usize,
    pub cols: usize,
    /// Row-major plan; rows sum to `1/rows`, columns to `1/cols`.
    pub plan: Vec<f64>,
}

impl AssignmentMatrix {
    /// Row `r` rescaled to a distribution, the per-region target `q`.
    pub fn target(&self, r: usize) -> Vec<f64> {
        let row = &self.plan[r * self.cols..(r + 1) * self.cols];
        let total: f64 = row.iter().sum();
        row.iter().map(|v| v / total).collect()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.plan.chunks(self.cols).map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.cols];
        for row in self.plan.chunks(self.cols) {
            for (a, b) in s.iter_mut().zip(row) {
                *a += b;
            }
        }
        s
    }

    /// Largest deviation from the uniform marginals.
    pub fn marginal_error(&self) -> f64 {
        let r = 1.0 / self.rows as f64;
        let c = 1.0 / self.cols as f64;
        let re = self.row_sums().iter().map(|v| (v - r).abs()).fold(0.0, f64::max);
        let ce = self.col_sums().iter().map(|v| (v - c).abs()).fold(0.0, f64::max);
        re.max(ce)
    }

    /// `⟨Q, S⟩`.
    pub fn transport_value(&self, scores: &[f64]) -> f64 {
        math::dot(&self.plan, scores)
    }
}

/// Sinkhorn-Knopp on `exp(S/ε)`, `scores` row-major `rows × cols`.
///
/// Each iteration normalizes columns then rows, so the row marginals are exact
/// on return.
pub fn sinkhorn_assign(scores: &[f64], rows: usize, cols: usize, cfg: &LossConfig) -> Result<AssignmentMatrix> {
    cfg.validate()?;
    if rows == 0 || cols == 0 || scores.len() != rows * cols {
        return Err(Error::ShapeMismatch { what: "sinkhorn scores", expected: (rows, cols), found: (scores.len() / cols.max(1), cols) });
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("sinkhorn scores must be finite".into()));
    }
    let mut plan = vec![0.0; rows * cols];
    for (src, dst) in scores.chunks(cols).zip(plan.chunks_mut(cols)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = math::exp((s - max) / cfg.epsilon);
        }
    }
    let row_mass = 1.0 / rows as f64;
    let col_mass = 1.0 / cols as f64;
    let mut col = vec![0.0; cols];
    for _ in 0..cfg.sinkhorn_iterations {
        col.iter_mut().for_each(|v| *v = 0.0);
        for row in plan.chunks(cols) {
            for (a, b) in col.iter_mut().zip(row) {
                *a += b;
            }
        }
        for row in plan.chunks_mut(cols) {
            for (v, &c) in row.iter_mut().zip(&col) {
                if c > 0.0 {
                    *v *= col_mass / c;
                }
            }
        }
        for row in plan.chunks_mut(cols) {
            let total: f64 = row.iter().sum();
            if total > 0.0 {
                row.iter_mut().for_each(|v| *v *= row_mass / total);
            }
        }
    }
    Ok(AssignmentMatrix { rows, cols, plan })
}

/// Per-region targets `q`, keyed by `(image, region)`.
pub type Targets = BTreeMap<(usize, u32), Vec<f64>>;

/// Loss value and gradient w.r.t. every scored region of the non-primary views.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub score_grads: RegionTree<Vec<f64>>,
    /// Non-empty views that entered the normalizer.
    pub views: usize,
}

/// Cross-entropy of every non-primary view's softmax against the primary
/// view's target, averaged over regions within a view, then over views.
pub fn swapped_prediction_loss(scores: &RegionTree<Vec<f64>>, targets: &Targets, cfg: &LossConfig) -> Result<LossOutput> {
    cfg.validate()?;
    let tau = cfg.temperature;
    let nodes: Vec<(usize, usize)> = scores
        .nodes()
        .into_iter()
        .filter(|&(n, m)| m != PRIMARY_VIEW && scores.region_count(n, m) > 0)
        .collect();
    let views = nodes.len();
    let mut score_grads = RegionTree::new();
    let mut loss = 0.0;
    for &(n, m) in &nodes {
        let count = scores.region_count(n, m) as f64;
        let weight = 1.0 / (views as f64 * count);
        for (i, s) in scores.regions(n, m) {
            let q = targets.get(&(n, i)).ok_or_else(|| {
                Error::InvalidArgument(format!("region {i} of image {n} has no target"))
            })?;
            let logits: Vec<f64> = s.iter().map(|v| v / tau).collect();
            let mut logp = vec![0.0; logits.len()];
            math::log_softmax(&logits, &mut logp);
            loss -= weight * math::dot(q, &logp);
            let grad = logp.iter().zip(q).map(|(lp, qk)| (math::exp(*lp) - qk) * weight / tau).collect();
            score_grads.insert(n, m, i, grad);
        }
    }
    Ok(LossOutput { loss, score_grads, views })
}

/// Scores every pooled region against the bank.
pub fn score_tree(pooled: &RegionTree<MeanVector>, bank: &PrototypeBank) -> RegionTree<Vec<f64>> {
    pooled.map(|_, _, _, mv| bank.score(&mv.z))
}

/// Primary-view assignments, optionally sharing the problem with the queue.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSet {
    pub targets: Targets,
    /// Primary-view score rows in `(image, region)` order, for the queue.
    pub primary_scores: Vec<Vec<f64>>,
    pub queue_rows: usize,
}

pub fn compute_targets(scores: &RegionTree<Vec<f64>>, queue: &ScoreQueue, cfg: &LossConfig) -> Result<TargetSet> {
    let mut keys = Vec::new();
    let mut primary_scores = Vec::new();
    for (n, m, i, s) in scores.iter() {
        if m == PRIMARY_VIEW {
            keys.push((n, i));
            primary_scores.push(s.clone());
        }
    }
    if keys.is_empty() {
        return Ok(TargetSet { targets: Targets::new(), primary_scores, queue_rows: 0 });
    }
    let k = primary_scores[0].len();
    let queued: Vec<&Vec<f64>> = if queue.participates() { queue.iter().collect() } else { Vec::new() };
    let queue_rows = queued.len();
    let mut flat = Vec::with_capacity((queue_rows + keys.len()) * k);
    for row in queued.iter().copied().chain(primary_scores.iter()) {
        if row.len() != k {
            return Err(Error::ShapeMismatch { what: "score row", expected: (1, k), found: (1, row.len()) });
        }
        flat.extend_from_slice(row);
    }
    let plan = sinkhorn_assign(&flat, queue_rows + keys.len(), k, cfg)?;
    let targets = keys.iter().enumerate().map(|(r, &key)| (key, plan.target(queue_rows + r))).collect();
    Ok(TargetSet { targets, primary_scores, queue_rows })
}

/// Loss plus gradients w.r.t. the pooled means and the bank.
#[derive(Debug, Clone, PartialEq)]
pub struct StepGradients {
    pub loss: f64,
    pub mean_grads: RegionTree<Vec<f64>>,
    /// Row-major `D×K`.
    pub bank_grad: Vec<f64>,
    pub views: usize,
}

/// Chains the loss gradient through `s = Cᵀ z*` for fixed targets.
pub fn loss_with_targets(
    pooled: &RegionTree<MeanVector>,
    bank: &PrototypeBank,
    targets: &Targets,
    cfg: &LossConfig,
) -> Result<StepGradients> {
    let scores = score_tree(pooled, bank);
    let out = swapped_prediction_loss(&scores, targets, cfg)?;
    let mut bank_grad = vec![0.0; bank.data.len()];
    let mut mean_grads = RegionTree::new();
    for (n, m, i, ds) in out.score_grads.iter() {
        let z = &pooled.get(n, m, i).expect("scored region is pooled").z;
        for (d, &zd) in z.iter().enumerate() {
            let row = &mut bank_grad[d * bank.concepts..(d + 1) * bank.concepts];
            for (g, &dk) in row.iter_mut().zip(ds) {
                *g += zd * dk;
            }
        }
        mean_grads.insert(n, m, i, bank.back_score(ds));
    }
    Ok(StepGradients { loss: out.loss, mean_grads, bank_grad, views: out.views })
}

/// Full objective for one batch: targets from the primary view (with the
/// queue once warm), loss over the other views, gradients to `z*` and `C`.
pub fn assemble_step(
    pooled: &RegionTree<MeanVector>,
    bank: &PrototypeBank,
    queue: &ScoreQueue,
    cfg: &LossConfig,
) -> Result<(StepGradients, TargetSet)> {
    let scores = score_tree(pooled, bank);
    let targets = compute_targets(&scores, queue, cfg)?;
    let grads = loss_with_targets(pooled, bank, &targets.targets, cfg)?;
    Ok((grads, targets))
}

/// Entropy of the mean of `softmax(s/τ)` over rows.
pub fn concept_entropy<'a>(rows: impl IntoIterator<Item = &'a Vec<f64>>, temperature: f64) -> f64 {
    let mut mean: Vec<f64> = Vec::new();
    let mut count = 0usize;
    let mut p = Vec::new();
    for s in rows {
        if mean.is_empty() {
            mean = vec![0.0; s.len()];
            p = vec![0.0; s.len()];
        }
        let logits: Vec<f64> = s.iter().map(|v| v / temperature).collect();
        math::softmax(&logits, &mut p);
        for (a, b) in mean.iter_mut().zip(&p) {
            *a += b;
        }
        count += 1;
    }
    if count == 0 {
        return 0.0;
    }
    mean.iter_mut().for_each(|v| *v /= count as f64);
    math::entropy(&mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_unit(rng: &mut seed::Rng, d: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = math::norm(&v);
        v.into_iter().map(|x| x / n).collect()
    }

    fn mv(z: Vec<f64>) -> MeanVector {
        MeanVector { z, norm: 1.0, count: 1 }
    }

    #[test]
    fn score_examples() {
        let bank = PrototypeBank::from_columns(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]);
        assert_eq!(bank.score(&[1.0, 0.0, 0.0]), vec![1.0, 0.0]);
        assert_eq!(bank.score(&[0.0, 0.0, 1.0]), vec![0.0, 0.0]);
        let mut rng = seed::rng(3);
        let bank = PrototypeBank::init(4, 4, 3).unwrap();
        let z = rand_unit(&mut rng, 4);
        let s = bank.score(&z);
        for k in 0..3 {
            let c = bank.column(k);
            let mut want = 0.0;
            for d in 0..4 {
                want += z[d] * c[d];
            }
            assert!((s[k] - want).abs() < 1e-7);
            assert!(s[k].abs() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn init_bank_has_unit_columns() {
        let bank = PrototypeBank::init(9, 16, 32).unwrap();
        assert!(bank.column_norms().iter().all(|n| (n - 1.0).abs() < 1e-12));
        assert!(PrototypeBank::init(0, 0, 3).is_err());
    }

    #[test]
    fn sinkhorn_zero_scores_are_uniform() {
        let q = sinkhorn_assign(&[0.0; 16], 4, 4, &LossConfig::default()).unwrap();
        assert!(q.plan.iter().all(|v| (v - 1.0 / 16.0).abs() < 1e-15));
        assert!(q.target(2).iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn sinkhorn_dominant_diagonal_gives_one_hot_targets() {
        let mut s = [0.0; 16];
        for i in 0..4 {
            s[i * 4 + i] = 10.0;
        }
        let cfg = LossConfig { epsilon: 0.5, ..LossConfig::default() };
        let q = sinkhorn_assign(&s, 4, 4, &cfg).unwrap();
        for i in 0..4 {
            assert!((q.plan[i * 4 + i] - 0.25).abs() < 1e-6);
            assert!((q.target(i)[i] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn sinkhorn_converges_to_uniform_marginals() {
        let mut rng = seed::rng(8);
        let cfg = LossConfig { sinkhorn_iterations: 100, ..LossConfig::default() };
        let s: Vec<f64> = (0..15).map(|_| rng.random_range(-1.0..1.0)).collect();
        let q = sinkhorn_assign(&s, 5, 3, &cfg).unwrap();
        assert!(q.marginal_error() < 1e-6, "{}", q.marginal_error());
        assert!(q.plan.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn sinkhorn_ignores_row_offsets() {
        let mut rng = seed::rng(12);
        let cfg = LossConfig::default();
        let s: Vec<f64> = (0..24).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut shifted = s.clone();
        for (r, row) in shifted.chunks_mut(4).enumerate() {
            row.iter_mut().for_each(|v| *v += r as f64 * 0.37 - 0.8);
        }
        let a = sinkhorn_assign(&s, 6, 4, &cfg).unwrap();
        let b = sinkhorn_assign(&shifted, 6, 4, &cfg).unwrap();
        for r in 0..6 {
            for (x, y) in a.target(r).iter().zip(b.target(r)) {
                assert!((x - y).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn sinkhorn_rejects_bad_input() {
        let cfg = LossConfig::default();
        assert!(sinkhorn_assign(&[], 0, 3, &cfg).is_err());
        assert!(sinkhorn_assign(&[0.0, f64::NAN], 1, 2, &cfg).is_err());
        assert!(sinkhorn_assign(&[0.0; 4], 2, 2, &LossConfig { epsilon: 0.0, ..cfg }).is_err());
    }

    #[test]
    fn queue_is_fifo() {
        let mut q = ScoreQueue::new(3, 1);
        for v in 0..4 {
            q.push(&[v as f64]).unwrap();
        }
        let got: Vec<f64> = q.iter().map(|r| r[0]).collect();
        assert_eq!(got, vec![1.0, 2.0, 3.0]);
        assert!(q.push(&[1.0, 2.0]).is_err());
        let mut big = ScoreQueue::new(5000, 2);
        for _ in 0..6000 {
            big.push(&[0.0, 1.0]).unwrap();
        }
        assert_eq!(big.len(), 5000);
    }

    #[test]
    fn empty_queue_uses_batch_rows_only() {
        let mut scores = RegionTree::new();
        scores.insert(0, 0, 0, vec![0.2, -0.1]);
        scores.insert(0, 0, 1, vec![-0.3, 0.4]);
        let queue = ScoreQueue::new(10, 2);
        let t = compute_targets(&scores, &queue, &LossConfig::default()).unwrap();
        assert_eq!(t.queue_rows, 0);
        assert_eq!(t.targets.len(), 2);
        let mut warm = ScoreQueue::new(10, 2);
        for _ in 0..5 {
            warm.push(&[1.0, 0.0]).unwrap();
        }
        assert!(!warm.participates());
        warm.push(&[1.0, 0.0]).unwrap();
        let t = compute_targets(&scores, &warm, &LossConfig::default()).unwrap();
        assert_eq!(t.queue_rows, 6);
    }

    #[test]
    fn uniform_cross_entropy_is_log_two() {
        let mut scores = RegionTree::new();
        scores.insert(0, 1, 0, vec![0.0, 0.0]);
        let mut targets = Targets::new();
        targets.insert((0, 0), vec![0.5, 0.5]);
        let cfg = LossConfig { temperature: 1.0, ..LossConfig::default() };
        let out = swapped_prediction_loss(&scores, &targets, &cfg).unwrap();
        assert!((out.loss - core::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn confident_prediction_drives_loss_to_zero() {
        let mut scores = RegionTree::new();
        scores.insert(0, 1, 0, vec![1.0, -1.0, -1.0]);
        let mut targets = Targets::new();
        targets.insert((0, 0), vec![1.0, 0.0, 0.0]);
        let cfg = LossConfig { temperature: 0.01, ..LossConfig::default() };
        let out = swapped_prediction_loss(&scores, &targets, &cfg).unwrap();
        assert!(out.loss < 1e-80 && out.loss >= 0.0);
    }

    fn random_instance(rng: &mut seed::Rng) -> (RegionTree<Vec<f64>>, Targets) {
        let (n_img, views, regions, k) = (2, 3, 2, 4);
        let mut scores = RegionTree::new();
        let mut targets = Targets::new();
        for n in 0..n_img {
            for i in 0..regions {
                let mut q: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
                let t: f64 = q.iter().sum();
                q.iter_mut().for_each(|v| *v /= t);
                targets.insert((n, i as u32), q);
                for m in 0..views {
                    scores.insert(n, m, i as u32, (0..k).map(|_| rng.random_range(-1.0..1.0)).collect());
                }
            }
        }
        (scores, targets)
    }

    #[test]
    fn loss_matches_scalar_reimplementation_and_finite_differences() {
        let mut rng = seed::rng(77);
        let (scores, targets) = random_instance(&mut rng);
        let cfg = LossConfig { temperature: 0.3, ..LossConfig::default() };
        let out = swapped_prediction_loss(&scores, &targets, &cfg).unwrap();

        let (n_img, views, regions, k) = (2usize, 3usize, 2usize, 4usize);
        let mut naive = 0.0;
        for n in 0..n_img {
            for m in 1..views {
                let mut view_sum = 0.0;
                for i in 0..regions {
                    let s = scores.get(n, m, i as u32).unwrap();
                    let q = &targets[&(n, i as u32)];
                    let mut z = 0.0;
                    for kk in 0..k {
                        z += libm::exp(s[kk] / cfg.temperature);
                    }
                    for kk in 0..k {
                        let p = libm::exp(s[kk] / cfg.temperature) / z;
                        view_sum += q[kk] * libm::log(p);
                        let want = (p - q[kk]) / (cfg.temperature * (n_img * (views - 1) * regions) as f64);
                        let got = out.score_grads.get(n, m, i as u32).unwrap()[kk];
                        assert!((want - got).abs() < 1e-14);
                    }
                }
                naive += view_sum / regions as f64;
            }
        }
        naive = -naive / (n_img * (views - 1)) as f64;
        assert!((naive - out.loss).abs() < 1e-12);
        assert!(out.score_grads.region_ids(0, PRIMARY_VIEW).is_empty());

        let h = 1e-6;
        for (n, m, i, g) in out.score_grads.iter() {
            for kk in 0..k {
                let eval = |delta: f64| {
                    let mut t = scores.clone();
                    let s = t.get(n, m, i).unwrap().clone();
                    let mut s2 = s.clone();
                    s2[kk] += delta;
                    t.insert(n, m, i, s2);
                    swapped_prediction_loss(&t, &targets, &cfg).unwrap().loss
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let rel = (numeric - g[kk]).abs() / g[kk].abs().max(1e-8);
                assert!(rel < 1e-5, "rel {rel}");
            }
        }
    }

    #[test]
    fn empty_views_leave_the_normalizer() {
        let mut scores = RegionTree::new();
        scores.insert(0, 1, 0, vec![0.0, 0.0]);
        scores.touch(1, 1);
        let mut targets = Targets::new();
        targets.insert((0, 0), vec![0.5, 0.5]);
        let cfg = LossConfig { temperature: 1.0, ..LossConfig::default() };
        let out = swapped_prediction_loss(&scores, &targets, &cfg).unwrap();
        assert_eq!(out.views, 1);
        assert!((out.loss - core::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn softmax_targets_are_stationary() {
        let mut rng = seed::rng(4);
        let (scores, mut targets) = random_instance(&mut rng);
        let cfg = LossConfig::default();
        // One non-primary view per image so each target can equal its softmax.
        let mut single = RegionTree::new();
        for (n, m, i, s) in scores.iter() {
            if m == 1 {
                single.insert(n, m, i, s.clone());
                let logits: Vec<f64> = s.iter().map(|v| v / cfg.temperature).collect();
                let mut p = vec![0.0; s.len()];
                math::softmax(&logits, &mut p);
                targets.insert((n, i), p);
            }
        }
        let out = swapped_prediction_loss(&single, &targets, &cfg).unwrap();
        assert!(out.score_grads.iter().all(|(_, _, _, g)| g.iter().all(|v| v.abs() < 1e-13)));
    }

    #[test]
    fn concept_relabeling_leaves_loss_unchanged() {
        let mut rng = seed::rng(19);
        let (scores, targets) = random_instance(&mut rng);
        let perm = [2usize, 0, 3, 1];
        let permuted_scores = scores.map(|_, _, _, s| perm.iter().map(|&p| s[p]).collect::<Vec<f64>>());
        let permuted_targets: Targets = targets.iter().map(|(k, q)| (*k, perm.iter().map(|&p| q[p]).collect())).collect();
        let cfg = LossConfig::default();
        let a = swapped_prediction_loss(&scores, &targets, &cfg).unwrap().loss;
        let b = swapped_prediction_loss(&permuted_scores, &permuted_targets, &cfg).unwrap().loss;
        assert!((a - b).abs() < 1e-12);
        assert!(a >= 0.0);
    }

    #[test]
    fn single_region_bank_gradient_is_outer_product() {
        let mut rng = seed::rng(31);
        let bank = PrototypeBank::init(2, 5, 3).unwrap();
        let z = rand_unit(&mut rng, 5);
        let mut pooled = RegionTree::new();
        pooled.insert(0, 0, 0, mv(rand_unit(&mut rng, 5)));
        pooled.insert(0, 1, 0, mv(z.clone()));
        let mut targets = Targets::new();
        targets.insert((0, 0), vec![0.2, 0.5, 0.3]);
        let cfg = LossConfig::default();
        let g = loss_with_targets(&pooled, &bank, &targets, &cfg).unwrap();
        let s = bank.score(&z);
        let logits: Vec<f64> = s.iter().map(|v| v / cfg.temperature).collect();
        let mut p = vec![0.0; 3];
        math::softmax(&logits, &mut p);
        for d in 0..5 {
            for k in 0..3 {
                let want = z[d] * (p[k] - targets[&(0, 0)][k]) / cfg.temperature;
                assert!((g.bank_grad[d * 3 + k] - want).abs() < 1e-12);
            }
        }
        let dz = g.mean_grads.get(0, 1, 0).unwrap();
        for d in 0..5 {
            let mut want = 0.0;
            for k in 0..3 {
                want += bank.column(k)[d] * (p[k] - targets[&(0, 0)][k]) / cfg.temperature;
            }
            assert!((dz[d] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn assemble_step_targets_come_from_primary_view() {
        let mut rng = seed::rng(41);
        let bank = PrototypeBank::init(5, 4, 6).unwrap();
        let mut pooled = RegionTree::new();
        for n in 0..2 {
            for m in 0..3 {
                for i in 0..3u32 {
                    pooled.insert(n, m, i, mv(rand_unit(&mut rng, 4)));
                }
            }
        }
        let queue = ScoreQueue::new(8, 6);
        let (g, t) = assemble_step(&pooled, &bank, &queue, &LossConfig::default()).unwrap();
        assert_eq!(t.primary_scores.len(), 6);
        assert_eq!(t.targets.len(), 6);
        assert_eq!(g.views, 4);
        assert!(g.loss.is_finite() && g.loss > 0.0);
        assert!(g.mean_grads.region_ids(0, PRIMARY_VIEW).is_empty());
        for q in t.targets.values() {
            assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn concept_entropy_bounds() {
        let uniform = vec![vec![0.0; 4]; 3];
        assert!((concept_entropy(&uniform, 0.1) - libm::log(4.0)).abs() < 1e-12);
        let collapsed = vec![vec![1.0, 0.0, 0.0, 0.0]; 3];
        assert!(concept_entropy(&collapsed, 0.01) < 1e-10);
    }
}
