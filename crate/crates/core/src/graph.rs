//! Consistency graphs over one question's sampled responses.

use std::collections::HashSet;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::QuestionRecord;
use crate::error::{Error, Result};
use crate::labeling::rouge_l_text;
use crate::linalg::{dot, norm, Matrix};

pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Domain(format!(
            "cosine similarity of vectors with dimensions {} and {}",
            u.len(),
            v.len()
        )));
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Domain("cosine similarity of a zero vector".into()));
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Output of [`kmeans`]: cluster ids are ordered by size, largest first.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub assignments: Vec<usize>,
    /// Non-increasing; one entry per effective cluster.
    pub sizes: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
}

impl ClusterAssignment {
    pub fn k(&self) -> usize {
        self.sizes.len()
    }
}

pub const KMEANS_RESTARTS: usize = 5;
pub const KMEANS_MAX_ITER: usize = 100;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn distinct_count(points: &[Vec<f64>]) -> usize {
    points
        .iter()
        .map(|p| p.iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        .collect::<HashSet<_>>()
        .len()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_seeds(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            // rounding can leave the target past the last positive weight
            if d2[pick] == 0.0 {
                pick = d2.iter().rposition(|&d| d > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centroids.push(points[next].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &centroids[centroids.len() - 1]));
        }
    }
    centroids
}

struct LloydRun {
    assignments: Vec<usize>,
    centroids: Vec<Vec<f64>>,
    inertia: f64,
}

fn lloyd(points: &[Vec<f64>], mut centroids: Vec<Vec<f64>>) -> LloydRun {
    let dim = points[0].len();
    let k = centroids.len();
    let mut assignments: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
    for _ in 0..KMEANS_MAX_ITER {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            sums[a].iter_mut().zip(p).for_each(|(s, x)| *s += x);
        }
        for c in 0..k {
            // an emptied cluster keeps its previous centroid
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
        if next == assignments {
            break;
        }
        assignments = next;
    }
    let inertia = points
        .iter()
        .zip(&assignments)
        .map(|(p, &a)| sq_dist(p, &centroids[a]))
        .sum();
    LloydRun {
        assignments,
        centroids,
        inertia,
    }
}

/// Lloyd's algorithm with k-means++ seeding and [`KMEANS_RESTARTS`] restarts.
///
/// The effective k is `min(k_max, distinct points)`. Clusters are relabeled
/// by size (largest first); equal sizes keep their seeding order.
pub fn kmeans(points: &[Vec<f64>], k_max: usize, seed: u64) -> Result<ClusterAssignment> {
    if points.is_empty() {
        return Err(Error::Domain("k-means needs at least one point".into()));
    }
    if k_max == 0 {
        return Err(Error::Config("k_max must be at least 1".into()));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Domain("k-means points have mixed dimensions".into()));
    }
    let k = k_max.min(distinct_count(points));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<LloydRun> = None;
    for _ in 0..KMEANS_RESTARTS {
        let run = lloyd(points, plus_plus_seeds(points, k, &mut rng));
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    let best = best.expect("at least one restart");

    let mut counts = vec![0usize; k];
    for &a in &best.assignments {
        counts[a] += 1;
    }
    let mut order: Vec<usize> = (0..k).filter(|&c| counts[c] > 0).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let mut relabel = vec![usize::MAX; k];
    for (new, &old) in order.iter().enumerate() {
        relabel[old] = new;
    }
    Ok(ClusterAssignment {
        assignments: best.assignments.iter().map(|&a| relabel[a]).collect(),
        sizes: order.iter().map(|&c| counts[c]).collect(),
        centroids: order.iter().map(|&c| best.centroids[c].clone()).collect(),
        inertia: best.inertia,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeWeightMode {
    #[default]
    Cosine,
    Rouge,
}

impl std::str::FromStr for EdgeWeightMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(EdgeWeightMode::Cosine),
            "rouge" => Ok(EdgeWeightMode::Rouge),
            other => Err(Error::Config(format!("unknown edge weight mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphOptions {
    #[serde(default)]
    pub edge_weights: EdgeWeightMode,
    #[serde(default = "default_k_max")]
    pub k_max: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_k_max() -> usize {
    3
}

impl Default for GraphOptions {
    fn default() -> Self {
        GraphOptions {
            edge_weights: EdgeWeightMode::Cosine,
            k_max: default_k_max(),
            seed: 0,
        }
    }
}

/// Fully connected similarity graph over one question's responses.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyGraph {
    pub n: usize,
    /// Symmetric, unit diagonal, entries in [0, 1].
    pub weights: Matrix,
    /// One-hot cluster membership, `n x k_max`.
    pub node_features: Matrix,
    /// `k_max` entries, non-increasing; unused clusters have size 0.
    pub cluster_sizes: Vec<usize>,
    pub assignments: Vec<usize>,
    /// Index of the response whose confidence is evaluated.
    pub primary: usize,
}

impl ConsistencyGraph {
    /// Builds the graph directly from a weight matrix and cluster labels.
    pub fn from_parts(weights: Matrix, assignments: Vec<usize>, k_max: usize, primary: usize) -> Result<Self> {
        let n = weights.rows();
        if assignments.len() != n || assignments.iter().any(|&a| a >= k_max) || primary >= n.max(1) {
            return Err(Error::Domain("inconsistent graph parts".into()));
        }
        let mut node_features = Matrix::zeros(n, k_max);
        let mut cluster_sizes = vec![0; k_max];
        for (i, &a) in assignments.iter().enumerate() {
            node_features[(i, a)] = 1.0;
            cluster_sizes[a] += 1;
        }
        let graph = ConsistencyGraph {
            n,
            weights,
            node_features,
            cluster_sizes,
            assignments,
            primary,
        };
        graph.check()?;
        Ok(graph)
    }

    /// Verifies the structural invariants.
    pub fn check(&self) -> Result<()> {
        let w = &self.weights;
        if w.rows() != self.n || w.cols() != self.n || !w.is_symmetric(0.0) {
            return Err(Error::Numeric("graph weights are not an n x n symmetric matrix".into()));
        }
        for i in 0..self.n {
            if (w[(i, i)] - 1.0).abs() > 1e-9 {
                return Err(Error::Numeric(format!("weight diagonal at {i} is {}", w[(i, i)])));
            }
            if w.row(i).iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Numeric(format!("weight row {i} leaves [0, 1]")));
            }
        }
        if self.cluster_sizes.windows(2).any(|p| p[0] < p[1]) {
            return Err(Error::Numeric("cluster sizes are not non-increasing".into()));
        }
        for j in 0..self.node_features.cols() {
            let ones = (0..self.n).filter(|&i| self.node_features[(i, j)] == 1.0).count();
            if ones != self.cluster_sizes[j] {
                return Err(Error::Numeric(format!("feature column {j} disagrees with cluster size")));
            }
        }
        for i in 0..self.n {
            if self.node_features.row(i).iter().sum::<f64>() != 1.0 {
                return Err(Error::Numeric(format!("feature row {i} is not one-hot")));
            }
        }
        Ok(())
    }

    pub fn k_max(&self) -> usize {
        self.node_features.cols()
    }

    /// Relabels nodes so that new node `i` is old node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> ConsistencyGraph {
        let inverse = invert(perm);
        ConsistencyGraph {
            n: self.n,
            weights: self.weights.permuted(perm),
            node_features: self.node_features.permuted_rows(perm),
            cluster_sizes: self.cluster_sizes.clone(),
            assignments: perm.iter().map(|&p| self.assignments[p]).collect(),
            primary: inverse[self.primary],
        }
    }
}

pub(crate) fn invert(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Builds the consistency graph for one question.
///
/// If no response is flagged primary, the response closest (by cosine) to the
/// largest cluster's centroid becomes primary.
pub fn build_graph(record: &QuestionRecord, options: &GraphOptions) -> Result<ConsistencyGraph> {
    let n = record.responses.len();
    if n < 2 {
        return Err(Error::Data(format!(
            "question {}: graph construction needs at least 2 responses, found {n}",
            record.id
        )));
    }
    let embeddings: Vec<Vec<f64>> = record
        .responses
        .iter()
        .enumerate()
        .map(|(i, r)| {
            r.embedding.clone().ok_or_else(|| {
                Error::Data(format!("question {}: response {i} has no embedding", record.id))
            })
        })
        .collect::<Result<_>>()?;

    let mut weights = Matrix::identity(n);
    for i in 0..n {
        for j in (i + 1)..n {
            let w = match options.edge_weights {
                EdgeWeightMode::Cosine => cosine_similarity(&embeddings[i], &embeddings[j])
                    .map_err(|e| Error::Data(format!("question {}: {e}", record.id)))?
                    .clamp(0.0, 1.0),
                EdgeWeightMode::Rouge => {
                    rouge_l_text(&record.responses[i].text, &record.responses[j].text)?
                }
            };
            weights[(i, j)] = w;
            weights[(j, i)] = w;
        }
    }

    let clusters = kmeans(&embeddings, options.k_max, options.seed)?;
    let primary = match record.primary_index() {
        Some(p) => p,
        None => {
            let centroid = &clusters.centroids[0];
            let mut best = (usize::MAX, f64::NEG_INFINITY);
            for (i, e) in embeddings.iter().enumerate() {
                if clusters.assignments[i] != 0 {
                    continue;
                }
                let s = cosine_similarity(e, centroid).unwrap_or(f64::NEG_INFINITY);
                if s > best.1 || best.0 == usize::MAX {
                    best = (i, s);
                }
            }
            best.0
        }
    };
    ConsistencyGraph::from_parts(weights, clusters.assignments, options.k_max, primary)
}

/// Marks the graph's primary response in the record when none is set.
pub fn assign_default_primary(record: &mut QuestionRecord, graph: &ConsistencyGraph) {
    if record.primary_index().is_none() {
        record.responses[graph.primary].is_primary = true;
    }
}

/// Pools responses sampled from the original question and its rephrasings
/// into one response set, grouped by prompt index (stable within a group).
pub fn pool_multi_prompt(mut record: QuestionRecord) -> QuestionRecord {
    record.responses.sort_by_key(|r| r.prompt_index);
    record
}
