//! Confusion matrices, cluster-to-class matching and segmentation metrics.

use alloc::vec;
use alloc::vec::Vec;

/// Counts with rows = predicted clusters (or classes), cols = ground-truth classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub rows: usize,
    pub cols: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols, counts: vec![0; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        Self { rows: rows.len(), cols, counts: rows.iter().flatten().copied().collect() }
    }

    pub fn get(&self, r: usize, c: usize) -> u64 {
        self.counts[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[u64] {
        &self.counts[r * self.cols..(r + 1) * self.cols]
    }

    /// Adds pixel pairs; ground-truth values equal to `ignore` are skipped.
    pub fn accumulate(&mut self, pred: &[usize], gt: &[u32], ignore: Option<u32>) {
        for (&p, &g) in pred.iter().zip(gt) {
            if Some(g) == ignore {
                continue;
            }
            self.counts[p * self.cols + g as usize] += 1;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Collapses rows through `map` into a square class-by-class matrix.
    pub fn merge(&self, map: &[usize]) -> ConfusionMatrix {
        let mut out = ConfusionMatrix::new(self.cols, self.cols);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.counts[map[r] * self.cols + c] += self.get(r, c);
            }
        }
        out
    }
}

/// Each row to its majority column; ties go to the lowest class id.
pub fn greedy_assign(cm: &ConfusionMatrix) -> Vec<usize> {
    (0..cm.rows)
        .map(|r| {
            let row = cm.row(r);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Minimum-cost assignment of every row of `cost` (`n × m`, `n <= m`) to a
/// distinct column. Returns the column of each row.
pub fn min_cost_assignment(cost: &[i64], n: usize, m: usize) -> Vec<usize> {
    assert!(n <= m && cost.len() == n * m);
    let a = |i: usize, j: usize| cost[(i - 1) * m + (j - 1)];
    let inf = i64::MAX / 4;
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    out
}

/// One-to-one cluster→class matching maximizing matched counts; clusters
/// left over once every class is covered fall back to [`greedy_assign`].
///
/// With fewer clusters than classes, every cluster is matched and some
/// classes stay uncovered.
pub fn hungarian_assign(cm: &ConfusionMatrix) -> Vec<usize> {
    let mut map = greedy_assign(cm);
    if cm.rows == 0 || cm.cols == 0 {
        return map;
    }
    let cost = |r: usize, c: usize| -(cm.get(r, c) as i64);
    if cm.cols <= cm.rows {
        // Classes pick clusters.
        let flat: Vec<i64> = (0..cm.cols).flat_map(|c| (0..cm.rows).map(move |r| cost(r, c))).collect();
        for (class, cluster) in min_cost_assignment(&flat, cm.cols, cm.rows).into_iter().enumerate() {
            map[cluster] = class;
        }
    } else {
        let flat: Vec<i64> = (0..cm.rows).flat_map(|r| (0..cm.cols).map(move |c| cost(r, c))).collect();
        map = min_cost_assignment(&flat, cm.rows, cm.cols);
    }
    map
}

/// Sum of counts picked up by a cluster→class map restricted to one-to-one pairs.
pub fn matched_total(cm: &ConfusionMatrix, map: &[usize]) -> u64 {
    map.iter().enumerate().map(|(r, &c)| cm.get(r, c)).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegMetrics {
    /// `None` for classes absent from the ground truth.
    pub iou: Vec<Option<f64>>,
    pub miou: f64,
    pub accuracy: f64,
}

/// mIoU over classes present in the ground truth, and pixel accuracy, of a
/// square class-by-class matrix.
pub fn miou_acc(cm: &ConfusionMatrix) -> SegMetrics {
    let l = cm.cols;
    let total = cm.total();
    let mut iou = vec![None; l];
    let mut tp_sum = 0;
    for c in 0..l {
        let tp = cm.get(c, c);
        tp_sum += tp;
        let gt: u64 = (0..cm.rows).map(|r| cm.get(r, c)).sum();
        if gt == 0 {
            continue;
        }
        let pred: u64 = cm.row(c).iter().sum();
        iou[c] = Some(tp as f64 / (gt + pred - tp) as f64);
    }
    let present: Vec<f64> = iou.iter().flatten().copied().collect();
    let miou = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
    let accuracy = if total == 0 { 0.0 } else { tp_sum as f64 / total as f64 };
    SegMetrics { iou, miou, accuracy }
}

/// Expected mIoU of predictions drawn independently of the truth with the
/// truth's own class frequencies: `mean_c p_c / (2 - p_c)`.
pub fn random_baseline_miou(class_counts: &[u64]) -> f64 {
    let total: u64 = class_counts.iter().sum();
    let present: Vec<f64> = class_counts.iter().filter(|&&c| c > 0).map(|&c| c as f64 / total as f64).collect();
    if present.is_empty() {
        return 0.0;
    }
    present.iter().map(|p| p / (2.0 - p)).sum::<f64>() / present.len() as f64
}
