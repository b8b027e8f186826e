//! Market states: k-means over vectorized coarse-grained matrices, relabeled
//! by ascending average correlation.
//!
//! Features are the raw distinct matrix entries (no standardization unless
//! requested) and distances are Euclidean.

use rand::distr::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coarse::CgMatrix;
use crate::spectral::{pearson, AverageCorrelation};
use crate::util::mean_std;
use crate::{Error, Exec, Result, SquareMatrix};

/// Distinct entries (upper triangle with diagonal), row by row.
pub fn vectorize(m: &SquareMatrix) -> Vec<f64> {
    let n = m.dim();
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        for j in i..n {
            out.push(m.get(i, j));
        }
    }
    out
}

/// Inverse of [`vectorize`].
pub fn devectorize(v: &[f64]) -> Result<SquareMatrix> {
    // n(n+1)/2 = len
    let n = ((((8 * v.len() + 1) as f64).sqrt() - 1.0) / 2.0).round() as usize;
    if n * (n + 1) / 2 != v.len() {
        return Err(Error::validation(format!(
            "{} is not a triangular number of entries",
            v.len()
        )));
    }
    let mut m = SquareMatrix::zeros(n);
    let mut k = 0;
    for i in 0..n {
        for j in i..n {
            m.set(i, j, v[k]);
            m.set(j, i, v[k]);
            k += 1;
        }
    }
    Ok(m)
}

/// Feature rows for clustering, optionally z-scored per column.
pub fn feature_matrix(matrices: &[CgMatrix], standardize: bool) -> Vec<Vec<f64>> {
    let mut features: Vec<Vec<f64>> = matrices.iter().map(|m| vectorize(&m.values)).collect();
    if standardize && !features.is_empty() {
        let dims = features[0].len();
        for d in 0..dims {
            let col: Vec<f64> = features.iter().map(|f| f[d]).collect();
            let (mean, sd) = mean_std(&col);
            let sd = if sd > 0.0 { sd } else { 1.0 };
            for f in &mut features {
                f[d] = (f[d] - mean) / sd;
            }
        }
    }
    features
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub restarts: usize,
    pub max_iter: usize,
    #[serde(skip)]
    pub exec: Exec,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            restarts: 100,
            max_iter: 300,
            exec: Exec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    /// Cluster per point, `0..k`, in arbitrary order.
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    /// Restart that produced this result.
    pub restart: usize,
    pub iterations: usize,
    /// Inertia after every assignment step of the winning restart.
    pub inertia_history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn distinct_points(points: &[Vec<f64>]) -> usize {
    let mut keys: Vec<Vec<u64>> = points
        .iter()
        .map(|p| p.iter().map(|v| (v + 0.0).to_bits()).collect())
        .collect();
    keys.sort_unstable();
    keys.dedup();
    keys.len()
}

/// Best-of-restarts Lloyd k-means with k-means++ seeding. Restart `r` draws
/// from stream `r` of the seeded generator; ties in inertia go to the lower
/// restart index, so the result does not depend on scheduling.
pub fn kmeans(points: &[Vec<f64>], config: &KMeansConfig) -> Result<KMeansResult> {
    let k = config.k;
    if k == 0 {
        return Err(Error::validation("k must be at least 1"));
    }
    if points.len() < k {
        return Err(Error::validation(format!(
            "{} points cannot form {k} clusters",
            points.len()
        )));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::validation("all feature vectors must have the same length"));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::numerical("non-finite feature value"));
    }
    let distinct = distinct_points(points);
    if distinct < k {
        return Err(Error::validation(format!(
            "only {distinct} distinct points; {k} distinct centroids impossible"
        )));
    }
    if config.restarts == 0 {
        return Err(Error::validation("restarts must be at least 1"));
    }

    let runs = config.exec.map_range(config.restarts, |r| {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(r as u64);
        let mut run = lloyd(points, k, config.max_iter, &mut rng);
        run.restart = r;
        run
    });
    Ok(runs
        .into_iter()
        .min_by(|a, b| a.inertia.total_cmp(&b.inertia).then(a.restart.cmp(&b.restart)))
        .expect("at least one restart"))
}

fn plus_plus_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let first = rng.random_range(0..n);
    let mut centroids = vec![points[first].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = Uniform::new(0.0, total).expect("positive range").sample(rng);
            let mut acc = 0.0;
            let mut chosen = None;
            for (i, w) in d2.iter().enumerate() {
                acc += w;
                if acc > target && *w > 0.0 {
                    chosen = Some(i);
                    break;
                }
            }
            // Rounding can leave target just past the last partial sum.
            chosen.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).expect("total > 0"))
        } else {
            rng.random_range(0..n)
        };
        centroids.push(points[pick].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &points[pick]));
        }
    }
    centroids
}

fn assign(points: &[Vec<f64>], centroids: &[Vec<f64>], labels: &mut [usize]) -> (f64, bool) {
    let mut inertia = 0.0;
    let mut changed = false;
    for (p, label) in points.iter().zip(labels.iter_mut()) {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (c, centroid) in centroids.iter().enumerate() {
            let d = sq_dist(p, centroid);
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        if *label != best {
            *label = best;
            changed = true;
        }
        inertia += best_d;
    }
    (inertia, changed)
}

fn lloyd(points: &[Vec<f64>], k: usize, max_iter: usize, rng: &mut ChaCha8Rng) -> KMeansResult {
    let dim = points[0].len();
    let mut centroids = plus_plus_init(points, k, rng);
    let mut labels = vec![usize::MAX; points.len()];
    let mut history = Vec::new();
    let mut iterations = 0;
    loop {
        let (inertia, changed) = assign(points, &centroids, &mut labels);
        history.push(inertia);
        iterations += 1;
        if !changed || iterations >= max_iter.max(1) {
            break;
        }
        // Update step.
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            for s in &mut sums[c] {
                *s /= counts[c] as f64;
            }
        }
        // An empty cluster takes the point farthest from its own centroid
        // among clusters that can spare one.
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let victim = (0..points.len())
                .filter(|&i| counts[labels[i]] > 1)
                .max_by(|&i, &j| {
                    sq_dist(&points[i], &sums[labels[i]])
                        .total_cmp(&sq_dist(&points[j], &sums[labels[j]]))
                        .then(j.cmp(&i))
                })
                .expect("k <= number of points");
            let from = labels[victim];
            counts[from] -= 1;
            // Recompute the donor mean without the victim.
            let m = counts[from] as f64;
            for (s, v) in sums[from].iter_mut().zip(&points[victim]) {
                *s = (*s * (m + 1.0) - v) / m;
            }
            labels[victim] = c;
            counts[c] = 1;
            sums[c] = points[victim].clone();
        }
        centroids = sums;
    }
    let inertia = *history.last().expect("one assignment");
    KMeansResult {
        labels,
        centroids,
        inertia,
        restart: 0,
        iterations,
        inertia_history: history,
    }
}

/// Epoch labels `1..=k` ordered by ascending mean average correlation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSequence {
    pub labels: Vec<usize>,
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    pub state_avg_corr: Vec<f64>,
    pub state_sigma: Vec<f64>,
    pub inertia: f64,
    /// Two states had equal mean average correlation; ordered by raw label.
    pub tie_flagged: bool,
}

impl StateSequence {
    /// Occupation count of each state.
    pub fn occupation(&self) -> Vec<usize> {
        let mut counts = vec![0; self.k];
        for &l in &self.labels {
            counts[l - 1] += 1;
        }
        counts
    }
}

/// Relabels raw clusters `1..=k` by ascending mean of their epochs'
/// average correlation.
pub fn order_states(raw: &KMeansResult, avg_corr: &[f64]) -> Result<StateSequence> {
    let k = raw.centroids.len();
    if raw.labels.len() != avg_corr.len() {
        return Err(Error::validation(format!(
            "{} labels but {} average correlations",
            raw.labels.len(),
            avg_corr.len()
        )));
    }
    let mut members: Vec<Vec<f64>> = vec![Vec::new(); k];
    for (&l, &a) in raw.labels.iter().zip(avg_corr) {
        if l >= k {
            return Err(Error::validation(format!("raw label {l} out of range for k = {k}")));
        }
        members[l].push(a);
    }
    if let Some(empty) = members.iter().position(Vec::is_empty) {
        return Err(Error::numerical(format!("cluster {empty} has no members")));
    }
    let stats: Vec<(f64, f64)> = members.iter().map(|m| mean_std(m)).collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| stats[a].0.total_cmp(&stats[b].0).then(a.cmp(&b)));
    let tie_flagged = order.windows(2).any(|w| stats[w[0]].0 == stats[w[1]].0);
    let mut new_label = vec![0; k];
    for (rank, &raw_label) in order.iter().enumerate() {
        new_label[raw_label] = rank + 1;
    }
    Ok(StateSequence {
        labels: raw.labels.iter().map(|&l| new_label[l]).collect(),
        k,
        centroids: order.iter().map(|&c| raw.centroids[c].clone()).collect(),
        state_avg_corr: order.iter().map(|&c| stats[c].0).collect(),
        state_sigma: order.iter().map(|&c| stats[c].1).collect(),
        inertia: raw.inertia,
        tie_flagged,
    })
}

/// Element-wise mean matrix of one state with the mean and spread of its
/// epochs' average correlation.
#[derive(Debug, Clone, PartialEq)]
pub struct StateMean {
    pub state: usize,
    pub matrix: SquareMatrix,
    pub mean_avg_corr: f64,
    pub sigma_avg_corr: f64,
    pub members: usize,
}

/// `labels` are `1..=k`.
pub fn state_mean_matrices(labels: &[usize], k: usize, matrices: &[CgMatrix]) -> Result<Vec<StateMean>> {
    if labels.len() != matrices.len() {
        return Err(Error::validation(format!(
            "{} labels but {} matrices",
            labels.len(),
            matrices.len()
        )));
    }
    let dim = matrices.first().map_or(0, CgMatrix::dim);
    let mut sums = vec![vec![0.0; dim * dim]; k];
    let mut avgs: Vec<Vec<f64>> = vec![Vec::new(); k];
    for (&l, m) in labels.iter().zip(matrices) {
        if l == 0 || l > k {
            return Err(Error::validation(format!("state label {l} outside 1..={k}")));
        }
        for (s, v) in sums[l - 1].iter_mut().zip(m.values.as_slice()) {
            *s += v;
        }
        avgs[l - 1].push(m.average_correlation());
    }
    (0..k)
        .map(|s| {
            let n = avgs[s].len();
            if n == 0 {
                return Err(Error::validation(format!("state {} has no epochs", s + 1)));
            }
            let (mean, sigma) = mean_std(&avgs[s]);
            Ok(StateMean {
                state: s + 1,
                matrix: SquareMatrix::from_vec(dim, sums[s].iter().map(|v| v / n as f64).collect()),
                mean_avg_corr: mean,
                sigma_avg_corr: sigma,
                members: n,
            })
        })
        .collect()
}

/// Epoch-by-epoch distance over a strided subset of epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct SimMatrix {
    pub values: SquareMatrix,
    pub stride: usize,
    /// Epoch indices of the rows.
    pub epochs: Vec<usize>,
}

/// Smallest stride keeping at most 500 sampled epochs.
pub fn default_stride(n_epochs: usize) -> usize {
    n_epochs.div_ceil(500).max(1)
}

/// Mean absolute difference over distinct matrix positions between every
/// pair of epochs `0, stride, 2*stride, ...`.
pub fn similarity_matrix(matrices: &[CgMatrix], stride: usize) -> Result<SimMatrix> {
    similarity_matrix_with(matrices, stride, Exec::default())
}

pub fn similarity_matrix_with(matrices: &[CgMatrix], stride: usize, exec: Exec) -> Result<SimMatrix> {
    if stride == 0 {
        return Err(Error::validation("similarity stride must be at least 1"));
    }
    let picked: Vec<&CgMatrix> = matrices.iter().step_by(stride).collect();
    let vecs: Vec<Vec<f64>> = picked.iter().map(|m| vectorize(&m.values)).collect();
    let e = vecs.len();
    let rows = exec.map_range(e, |a| {
        (0..e)
            .map(|b| {
                if a == b {
                    return 0.0;
                }
                // Evaluate each unordered pair in one orientation.
                let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                let (u, v) = (&vecs[lo], &vecs[hi]);
                u.iter().zip(v).map(|(x, y)| (x - y).abs()).sum::<f64>() / u.len() as f64
            })
            .collect::<Vec<f64>>()
    });
    Ok(SimMatrix {
        values: SquareMatrix::from_vec(e, rows.concat()),
        stride,
        epochs: picked.iter().map(|m| m.epoch_index).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    /// Pearson coefficient of the label sequences; `None` if either is
    /// constant.
    pub pearson: Option<f64>,
    pub adjusted_rand: f64,
}

/// Agreement between two labelings of the same epochs.
pub fn compare_labelings(a: &[usize], b: &[usize]) -> Result<Agreement> {
    if a.len() != b.len() {
        return Err(Error::validation(format!(
            "labelings cover {} and {} epochs",
            a.len(),
            b.len()
        )));
    }
    let fa: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let fb: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    Ok(Agreement {
        pearson: pearson(&fa, &fb).ok(),
        adjusted_rand: adjusted_rand_index(a, b),
    })
}

/// Hubert-Arabie adjusted Rand index.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    use std::collections::BTreeMap;
    let n = a.len();
    if n < 2 {
        return 1.0;
    }
    let mut table: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut rows: BTreeMap<usize, u64> = BTreeMap::new();
    let mut cols: BTreeMap<usize, u64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let c2 = |v: u64| (v * v.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.values().map(|&v| c2(v)).sum();
    let sum_a: f64 = rows.values().map(|&v| c2(v)).sum();
    let sum_b: f64 = cols.values().map(|&v| c2(v)).sum();
    let expected = sum_a * sum_b / c2(n as u64);
    let max = 0.5 * (sum_a + sum_b);
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}
