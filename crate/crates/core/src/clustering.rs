//! Deterministic k-means over unit-normalized embeddings, plus cluster
//! balance diagnostics.
//!
//! The procedure is fully specified so that two implementations given the same
//! embeddings, `K` and seed produce the same partition:
//!
//! 1. k-means++ seeding from [`Lcg64`]: the first centre is point
//!    `below(N)`; each further centre draws `u = next_f64() * total` over the
//!    squared distances to the nearest chosen centre and picks the first point
//!    whose running sum exceeds `u`. A zero total picks the lowest-index point
//!    not yet chosen.
//! 2. Lloyd iterations (at most [`MAX_ITERATIONS`]): assign each point to its
//!    nearest centroid by squared Euclidean distance, ties to the lower index;
//!    repair each empty cluster (ascending) by seizing the point farthest from
//!    its assigned centroid among clusters with more than one member; recompute
//!    centroids as means in point order. Stop when an assignment repeats the
//!    previous one.
//! 3. Relabel clusters densely by ascending smallest member label.

use std::collections::{BTreeMap, HashSet};

use thiserror::Error;

use crate::rng::Lcg64;
use crate::taxonomy::Clustering;

pub const MAX_ITERATIONS: usize = 300;
const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClusterError {
    #[error("row {0} has zero norm")]
    ZeroVector(usize),
    #[error("K = {k} exceeds the number of points {n}")]
    KExceedsN { k: usize, n: usize },
    #[error("K must be at least 1")]
    InvalidK,
    #[error("embedding set is empty or has zero dimension")]
    Empty,
    #[error("{vectors} vectors but {labels} labels")]
    LabelCount { vectors: usize, labels: usize },
    #[error("duplicate label {0:?}")]
    DuplicateLabel(String),
    #[error("row {row} is not unit norm ({norm})")]
    NotNormalized { row: usize, norm: f64 },
}

/// `N x D` row-major embedding matrix with one label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    dim: usize,
    vectors: Vec<f64>,
    labels: Vec<String>,
}

impl EmbeddingSet {
    pub fn new(dim: usize, vectors: Vec<f64>, labels: Vec<String>) -> Result<Self, ClusterError> {
        if dim == 0 || labels.is_empty() {
            return Err(ClusterError::Empty);
        }
        if vectors.len() != dim * labels.len() {
            return Err(ClusterError::LabelCount {
                vectors: vectors.len() / dim,
                labels: labels.len(),
            });
        }
        let mut seen = HashSet::new();
        for l in &labels {
            if !seen.insert(l.as_str()) {
                return Err(ClusterError::DuplicateLabel(l.clone()));
            }
        }
        Ok(Self {
            dim,
            vectors,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    /// Scales every row to unit Euclidean norm.
    pub fn normalize(&self) -> Result<Self, ClusterError> {
        let mut vectors = self.vectors.clone();
        for (i, row) in vectors.chunks_exact_mut(self.dim).enumerate() {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(ClusterError::ZeroVector(i));
            }
            row.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(Self {
            dim: self.dim,
            vectors,
            labels: self.labels.clone(),
        })
    }

    fn check_normalized(&self) -> Result<(), ClusterError> {
        for i in 0..self.len() {
            let norm = self.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > NORM_TOLERANCE {
                return Err(ClusterError::NotNormalized { row: i, norm });
            }
        }
        Ok(())
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone)]
pub struct KMeansResult {
    pub clustering: Clustering,
    /// Centroids in the final (relabelled) cluster order, row-major `K x D`.
    pub centroids: Vec<f64>,
    /// Sum of squared distances after every centroid update.
    pub sse_history: Vec<f64>,
    pub iterations: usize,
}

impl KMeansResult {
    pub fn sse(&self) -> f64 {
        *self.sse_history.last().expect("at least one iteration")
    }
}

fn seed_centroids(e: &EmbeddingSet, k: usize, rng: &mut Lcg64) -> Vec<usize> {
    let n = e.len();
    let mut chosen = vec![rng.below(n)];
    let mut nearest: Vec<f64> = (0..n)
        .map(|i| sq_dist(e.row(i), e.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let u = rng.next_f64() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, d) in nearest.iter().enumerate() {
                acc += d;
                if acc > u {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can leave `u` at the very top of the range.
            pick.unwrap_or_else(|| nearest.iter().rposition(|&d| d > 0.0).expect("total > 0"))
        } else {
            (0..n).find(|i| !chosen.contains(i)).expect("k <= n")
        };
        chosen.push(next);
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(sq_dist(e.row(i), e.row(next)));
        }
    }
    chosen
}

fn assign(e: &EmbeddingSet, centroids: &[f64], out: &mut [usize]) {
    let d = e.dim();
    for (i, slot) in out.iter_mut().enumerate() {
        let p = e.row(i);
        let mut best = (f64::INFINITY, 0);
        for (j, c) in centroids.chunks_exact(d).enumerate() {
            let dist = sq_dist(p, c);
            if dist < best.0 {
                best = (dist, j);
            }
        }
        *slot = best.1;
    }
}

fn repair_empty(e: &EmbeddingSet, centroids: &[f64], k: usize, labels: &mut [usize]) {
    let d = e.dim();
    let mut sizes = vec![0usize; k];
    labels.iter().for_each(|&l| sizes[l] += 1);
    for j in 0..k {
        if sizes[j] > 0 {
            continue;
        }
        let mut far = (-1.0, usize::MAX);
        for (i, &l) in labels.iter().enumerate() {
            if sizes[l] > 1 {
                let dist = sq_dist(e.row(i), &centroids[l * d..(l + 1) * d]);
                if dist > far.0 {
                    far = (dist, i);
                }
            }
        }
        let i = far.1;
        sizes[labels[i]] -= 1;
        labels[i] = j;
        sizes[j] = 1;
    }
}

fn update_centroids(e: &EmbeddingSet, k: usize, labels: &[usize], centroids: &mut [f64]) {
    let d = e.dim();
    let mut counts = vec![0usize; k];
    centroids.iter_mut().for_each(|c| *c = 0.0);
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for (c, x) in centroids[l * d..(l + 1) * d].iter_mut().zip(e.row(i)) {
            *c += x;
        }
    }
    for (j, c) in centroids.chunks_exact_mut(d).enumerate() {
        let n = counts[j] as f64;
        c.iter_mut().for_each(|x| *x /= n);
    }
}

fn sse(e: &EmbeddingSet, centroids: &[f64], labels: &[usize]) -> f64 {
    let d = e.dim();
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| sq_dist(e.row(i), &centroids[l * d..(l + 1) * d]))
        .sum()
}

/// Runs seeded k-means++ / Lloyd on `e`, whose rows must already be unit norm.
pub fn kmeans(e: &EmbeddingSet, k: usize, seed: u64) -> Result<KMeansResult, ClusterError> {
    let n = e.len();
    if k == 0 {
        return Err(ClusterError::InvalidK);
    }
    if k > n {
        return Err(ClusterError::KExceedsN { k, n });
    }
    e.check_normalized()?;
    let d = e.dim();
    let mut rng = Lcg64::new(seed);
    let mut centroids: Vec<f64> = seed_centroids(e, k, &mut rng)
        .into_iter()
        .flat_map(|i| e.row(i).to_vec())
        .collect();

    let mut labels = vec![usize::MAX; n];
    let mut next = vec![0usize; n];
    let mut sse_history = Vec::new();
    let mut iterations = 0;
    while iterations < MAX_ITERATIONS {
        iterations += 1;
        assign(e, &centroids, &mut next);
        repair_empty(e, &centroids, k, &mut next);
        if next == labels {
            break;
        }
        std::mem::swap(&mut labels, &mut next);
        update_centroids(e, k, &labels, &mut centroids);
        sse_history.push(sse(e, &centroids, &labels));
    }

    // Dense relabel by smallest member label.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| e.labels()[a].cmp(&e.labels()[b]));
    let mut relabel = vec![usize::MAX; k];
    let mut next_id = 0;
    for &i in &order {
        if relabel[labels[i]] == usize::MAX {
            relabel[labels[i]] = next_id;
            next_id += 1;
        }
    }
    let mut out_centroids = vec![0.0; k * d];
    for j in 0..k {
        let r = relabel[j];
        out_centroids[r * d..(r + 1) * d].copy_from_slice(&centroids[j * d..(j + 1) * d]);
    }
    let assignment: BTreeMap<String, usize> = e
        .labels()
        .iter()
        .zip(&labels)
        .map(|(l, &c)| (l.clone(), relabel[c]))
        .collect();
    Ok(KMeansResult {
        clustering: Clustering::new(assignment).expect("repair keeps every cluster nonempty"),
        centroids: out_centroids,
        sse_history,
        iterations,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BalanceReport {
    pub sizes: Vec<usize>,
    /// Shannon entropy of the size distribution over `ln K`; 1 when `K = 1`.
    pub normalized_entropy: f64,
    pub max_share: f64,
}

pub fn balance(c: &Clustering) -> BalanceReport {
    let sizes = c.sizes();
    let n: usize = sizes.iter().sum();
    let k = sizes.len();
    let normalized_entropy = if k <= 1 {
        1.0
    } else {
        let h: f64 = sizes
            .iter()
            .filter(|&&s| s > 0)
            .map(|&s| {
                let p = s as f64 / n as f64;
                -p * p.ln()
            })
            .sum();
        h / (k as f64).ln()
    };
    let max_share = *sizes.iter().max().unwrap_or(&0) as f64 / n as f64;
    BalanceReport {
        sizes,
        normalized_entropy,
        max_share,
    }
}
