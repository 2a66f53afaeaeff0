//! Balanced k-means over embeddings and cluster-histogram comparison
//! between datasets.
//!
//! Balance is enforced with a greedy pass: points claim their nearest open
//! centroid in order of ascending distance, and cluster sizes are capped so
//! that every cluster ends up with `floor(N/K)` or `ceil(N/K)` members.

use std::borrow::Borrow;
use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::EmbeddingVector;

pub const DEFAULT_K: usize = 64;
pub const DEFAULT_FIT_SAMPLE: usize = 200_000;
pub const DEFAULT_MAX_ITERS: usize = 50;

const CHUNK: usize = 1024;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("need at least K={k} points, got {n}")]
    TooFewPoints { n: usize, k: usize },
    #[error("K must be between 1 and 65535, got {0}")]
    InvalidK(usize),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("dataset `{0}` is empty")]
    EmptyDataset(String),
    #[error("histograms have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("histogram `{0}` has zero total")]
    EmptyHistogram(String),
    #[error("invalid cluster model: {0}")]
    InvalidModel(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed cluster model file: {0}")]
    Format(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    #[serde(rename = "K")]
    pub k: usize,
    pub dim: usize,
    pub seed: u64,
    /// Largest cluster size allowed while fitting.
    pub capacity: usize,
    /// Row-major `K × dim`.
    pub centroids: Vec<f64>,
}

impl ClusterModel {
    pub fn centroid(&self, j: usize) -> &[f64] {
        &self.centroids[j * self.dim..(j + 1) * self.dim]
    }

    pub fn validate(&self) -> Result<(), ClusterError> {
        if self.k == 0 || self.dim == 0 {
            return Err(ClusterError::InvalidModel("K and dim must be positive".into()));
        }
        if self.centroids.len() != self.k * self.dim {
            return Err(ClusterError::InvalidModel(format!(
                "expected {} centroid values, found {}",
                self.k * self.dim,
                self.centroids.len()
            )));
        }
        if self.centroids.iter().any(|v| !v.is_finite()) {
            return Err(ClusterError::InvalidModel("non-finite centroid".into()));
        }
        Ok(())
    }

    fn nearest(&self, x: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for j in 0..self.k {
            let d = sq_dist(x, self.centroid(j));
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        best
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ClusterError> {
        let path = path.as_ref();
        let mut s = serde_json::to_string(self)?;
        s.push('\n');
        std::fs::write(path, s).map_err(|source| ClusterError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ClusterError> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|source| ClusterError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let m: ClusterModel = serde_json::from_str(&s)?;
        m.validate()?;
        Ok(m)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid by squared Euclidean distance; ties go to the lowest id.
/// Capacity does not apply here.
pub fn assign(model: &ClusterModel, x: &EmbeddingVector) -> Result<usize, ClusterError> {
    if x.dim() != model.dim {
        return Err(ClusterError::DimensionMismatch {
            expected: model.dim,
            actual: x.dim(),
        });
    }
    Ok(model.nearest(x.values()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    Assign,
    Update,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub iteration: usize,
    pub step: Step,
    pub wcss: f64,
}

#[derive(Debug, Clone)]
pub struct BalancedFit {
    pub model: ClusterModel,
    /// Final cluster of each input point.
    pub assignment: Vec<usize>,
    pub sizes: Vec<usize>,
    /// Within-cluster sum of squares after every assign and update step.
    pub history: Vec<IterationStats>,
    pub iterations: usize,
    pub converged: bool,
}

struct Points<'a> {
    n: usize,
    dim: usize,
    rows: Vec<&'a [f64]>,
}

impl<'a> Points<'a> {
    fn new(points: &'a [EmbeddingVector]) -> Result<Self, ClusterError> {
        let dim = points.first().map(EmbeddingVector::dim).unwrap_or(0);
        let mut rows = Vec::with_capacity(points.len());
        for p in points {
            if p.dim() != dim {
                return Err(ClusterError::DimensionMismatch {
                    expected: dim,
                    actual: p.dim(),
                });
            }
            rows.push(p.values());
        }
        Ok(Points {
            n: points.len(),
            dim,
            rows,
        })
    }
}

/// k-means++ seeding. When all remaining points coincide with chosen
/// centroids, the next centroid is a uniformly drawn unchosen point.
fn kmeanspp_init(pts: &Points, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut chosen = vec![false; pts.n];
    let mut centroids = Vec::with_capacity(k * pts.dim);
    let first = rng.random_range(0..pts.n);
    chosen[first] = true;
    centroids.extend_from_slice(pts.rows[first]);
    let mut d2: Vec<f64> = pts.rows.par_iter().map(|r| sq_dist(r, pts.rows[first])).collect();

    while centroids.len() < k * pts.dim {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                if d <= 0.0 {
                    continue;
                }
                acc += d;
                pick = Some(i);
                if acc > target {
                    break;
                }
            }
            pick.expect("positive total has a positive entry")
        } else {
            let free: Vec<usize> = (0..pts.n).filter(|&i| !chosen[i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[next] = true;
        centroids.extend_from_slice(pts.rows[next]);
        let c = pts.rows[next];
        d2.par_iter_mut()
            .zip(pts.rows.par_iter())
            .for_each(|(d, r)| *d = d.min(sq_dist(r, c)));
    }
    centroids
}

#[derive(PartialEq)]
struct Candidate {
    dist: f64,
    point: usize,
    rank: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist
            .total_cmp(&other.dist)
            .then(self.point.cmp(&other.point))
            .then(self.rank.cmp(&other.rank))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Size caps: every cluster may take `base` points, and `extra` clusters
/// (first come, first served) may take one more.
struct Quota {
    base: usize,
    extra: usize,
}

impl Quota {
    fn new(n: usize, k: usize) -> Self {
        Quota {
            base: n / k,
            extra: n % k,
        }
    }

    fn capacity(&self) -> usize {
        self.base + usize::from(self.extra > 0)
    }
}

/// Greedy capacity-constrained assignment: repeatedly take the globally
/// closest (point, open centroid) pair.
fn greedy_assign(pts: &Points, centroids: &[f64], k: usize) -> Vec<usize> {
    let dim = pts.dim;
    let centroid = |j: usize| &centroids[j * dim..(j + 1) * dim];
    // per-point centroid preference order
    let prefs: Vec<Vec<u16>> = pts
        .rows
        .par_iter()
        .map(|r| {
            let d: Vec<f64> = (0..k).map(|j| sq_dist(r, centroid(j))).collect();
            let mut order: Vec<u16> = (0..k as u16).collect();
            order.sort_by(|&a, &b| d[a as usize].total_cmp(&d[b as usize]).then(a.cmp(&b)));
            order
        })
        .collect();

    let mut quota = Quota::new(pts.n, k);
    let mut sizes = vec![0usize; k];
    let mut assignment = vec![usize::MAX; pts.n];
    let mut heap: BinaryHeap<Reverse<Candidate>> = (0..pts.n)
        .map(|i| {
            let c = prefs[i][0] as usize;
            Reverse(Candidate {
                dist: sq_dist(pts.rows[i], centroid(c)),
                point: i,
                rank: 0,
            })
        })
        .collect();

    while let Some(Reverse(cand)) = heap.pop() {
        let c = prefs[cand.point][cand.rank] as usize;
        let open = sizes[c] < quota.base || (sizes[c] == quota.base && quota.extra > 0);
        if open {
            sizes[c] += 1;
            if sizes[c] == quota.base + 1 {
                quota.extra -= 1;
            }
            assignment[cand.point] = c;
        } else {
            // total capacity equals N, so an open cluster always remains
            let mut rank = cand.rank + 1;
            loop {
                let next = prefs[cand.point][rank] as usize;
                if sizes[next] < quota.base || (sizes[next] == quota.base && quota.extra > 0) {
                    break;
                }
                rank += 1;
            }
            let next = prefs[cand.point][rank] as usize;
            heap.push(Reverse(Candidate {
                dist: sq_dist(pts.rows[cand.point], centroid(next)),
                point: cand.point,
                rank,
            }));
        }
    }
    assignment
}

fn wcss(pts: &Points, centroids: &[f64], assignment: &[usize]) -> f64 {
    let dim = pts.dim;
    let parts: Vec<f64> = pts
        .rows
        .par_chunks(CHUNK)
        .zip(assignment.par_chunks(CHUNK))
        .map(|(rows, asg)| {
            rows.iter()
                .zip(asg)
                .map(|(r, &c)| sq_dist(r, &centroids[c * dim..(c + 1) * dim]))
                .sum::<f64>()
        })
        .collect();
    parts.iter().sum()
}

/// Member means; an empty cluster keeps its previous centroid.
fn update_centroids(pts: &Points, prev: &[f64], assignment: &[usize], k: usize) -> Vec<f64> {
    let dim = pts.dim;
    let mut sums = vec![0.0; k * dim];
    let mut counts = vec![0usize; k];
    for (r, &c) in pts.rows.iter().zip(assignment) {
        counts[c] += 1;
        for (s, v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(r.iter()) {
            *s += v;
        }
    }
    for c in 0..k {
        let row = &mut sums[c * dim..(c + 1) * dim];
        if counts[c] == 0 {
            row.copy_from_slice(&prev[c * dim..(c + 1) * dim]);
        } else {
            let n = counts[c] as f64;
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    sums
}

fn cluster_sizes(assignment: &[usize], k: usize) -> Vec<usize> {
    let mut sizes = vec![0; k];
    for &c in assignment {
        sizes[c] += 1;
    }
    sizes
}

/// Lloyd iterations with balanced assignment.
///
/// A new assignment is only adopted if it does not raise the within-cluster
/// sum of squares under the current centroids; otherwise fitting stops. This
/// keeps the objective non-increasing even though the greedy pass is not an
/// exact solver for the constrained assignment.
pub fn fit_balanced_kmeans(
    points: &[EmbeddingVector],
    k: usize,
    seed: u64,
    max_iters: usize,
) -> Result<BalancedFit, ClusterError> {
    if k == 0 || k > u16::MAX as usize {
        return Err(ClusterError::InvalidK(k));
    }
    if points.len() < k {
        return Err(ClusterError::TooFewPoints { n: points.len(), k });
    }
    let pts = Points::new(points)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeanspp_init(&pts, k, &mut rng);
    let mut assignment = greedy_assign(&pts, &centroids, k);
    let mut history = vec![IterationStats {
        iteration: 0,
        step: Step::Assign,
        wcss: wcss(&pts, &centroids, &assignment),
    }];

    let mut converged = false;
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        centroids = update_centroids(&pts, &centroids, &assignment, k);
        let updated = wcss(&pts, &centroids, &assignment);
        history.push(IterationStats {
            iteration: iterations,
            step: Step::Update,
            wcss: updated,
        });
        let candidate = greedy_assign(&pts, &centroids, k);
        if candidate == assignment {
            converged = true;
            break;
        }
        let cand_wcss = wcss(&pts, &centroids, &candidate);
        if cand_wcss > updated {
            log::debug!("balanced assignment would raise WCSS ({cand_wcss} > {updated}); stopping");
            converged = true;
            break;
        }
        assignment = candidate;
        history.push(IterationStats {
            iteration: iterations,
            step: Step::Assign,
            wcss: cand_wcss,
        });
    }

    let model = ClusterModel {
        k,
        dim: pts.dim,
        seed,
        capacity: Quota::new(pts.n, k).capacity(),
        centroids,
    };
    model.validate()?;
    Ok(BalancedFit {
        sizes: cluster_sizes(&assignment, k),
        model,
        assignment,
        history,
        iterations,
        converged,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterHistogram {
    pub dataset_name: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub counts: Vec<u64>,
    pub total: u64,
}

impl ClusterHistogram {
    pub fn from_counts(dataset_name: impl Into<String>, counts: Vec<u64>) -> Self {
        ClusterHistogram {
            dataset_name: dataset_name.into(),
            k: counts.len(),
            total: counts.iter().sum(),
            counts,
        }
    }

    /// Adds another histogram over the same clusters.
    pub fn merge(&mut self, other: &ClusterHistogram) -> Result<(), ClusterError> {
        if self.k != other.k {
            return Err(ClusterError::LengthMismatch(self.k, other.k));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.total += other.total;
        Ok(())
    }
}

pub fn histogram_over_clusters<I>(
    model: &ClusterModel,
    dataset: I,
    name: &str,
) -> Result<ClusterHistogram, ClusterError>
where
    I: IntoIterator,
    I::Item: Borrow<EmbeddingVector>,
{
    let mut counts = vec![0u64; model.k];
    for x in dataset {
        counts[assign(model, x.borrow())?] += 1;
    }
    let hist = ClusterHistogram::from_counts(name, counts);
    if hist.total == 0 {
        return Err(ClusterError::EmptyDataset(name.to_string()));
    }
    Ok(hist)
}

/// Parallel form of [`histogram_over_clusters`] for materialized datasets.
pub fn histogram_over_points(
    model: &ClusterModel,
    points: &[EmbeddingVector],
    name: &str,
) -> Result<ClusterHistogram, ClusterError> {
    let ids = points
        .par_iter()
        .map(|x| assign(model, x))
        .collect::<Result<Vec<_>, _>>()?;
    let mut counts = vec![0u64; model.k];
    for c in ids {
        counts[c] += 1;
    }
    let hist = ClusterHistogram::from_counts(name, counts);
    if hist.total == 0 {
        return Err(ClusterError::EmptyDataset(name.to_string()));
    }
    Ok(hist)
}

/// Total variation distance between the normalized histograms.
pub fn histogram_distance(a: &ClusterHistogram, b: &ClusterHistogram) -> Result<f64, ClusterError> {
    if a.counts.len() != b.counts.len() {
        return Err(ClusterError::LengthMismatch(a.counts.len(), b.counts.len()));
    }
    for h in [a, b] {
        if h.total == 0 {
            return Err(ClusterError::EmptyHistogram(h.dataset_name.clone()));
        }
    }
    let (ta, tb) = (a.total as f64, b.total as f64);
    let sum: f64 = a
        .counts
        .iter()
        .zip(&b.counts)
        .map(|(&x, &y)| (x as f64 / ta - y as f64 / tb).abs())
        .sum();
    Ok((0.5 * sum).min(1.0))
}

/// Symmetric pairwise TV-distance matrix.
pub fn distance_matrix(hists: &[ClusterHistogram]) -> Result<Vec<Vec<f64>>, ClusterError> {
    let n = hists.len();
    let mut m = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = histogram_distance(&hists[i], &hists[j])?;
            m[i][j] = d;
            m[j][i] = d;
        }
    }
    Ok(m)
}
