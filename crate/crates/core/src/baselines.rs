//! Reference confidence estimators and post-hoc calibrators.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::QuestionRecord;
use crate::error::{Error, Result};
use crate::graph::ConsistencyGraph;
use crate::linalg::{jacobi_eigenvalues, Matrix};

/// Confidence of each response = share of responses in its cluster.
pub fn cluster_frequency_confidence(graph: &ConsistencyGraph) -> Vec<f64> {
    let n = graph.n as f64;
    graph
        .assignments
        .iter()
        .map(|&c| graph.cluster_sizes[c] as f64 / n)
        .collect()
}

/// Length-normalized sequence likelihood `exp(logprob_sum / token_count)`.
pub fn seq_likelihood_confidence(record: &QuestionRecord) -> Result<Vec<f64>> {
    record
        .responses
        .iter()
        .enumerate()
        .map(|(i, r)| match (r.token_logprob_sum, r.token_count) {
            (Some(sum), Some(count)) if count >= 1 => Ok((sum / count as f64).exp()),
            _ => Err(Error::Data(format!(
                "question {}: response {i} lacks token_logprob_sum/token_count",
                record.id
            ))),
        })
        .collect()
}

/// Degree confidences and the eigenvalue-based uncertainty of a graph.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralConfidence {
    /// `sum_j w_ij / n` per response.
    pub degree: Vec<f64>,
    /// `sum_k max(0, 1 - lambda_k)` over the normalized Laplacian spectrum.
    pub uncertainty: f64,
    /// Ascending eigenvalues of `I - D^{-1/2} W D^{-1/2}`.
    pub laplacian_eigenvalues: Vec<f64>,
}

pub const JACOBI_TOLERANCE: f64 = 1e-10;

/// Symmetric normalized Laplacian of a nonnegative weight matrix.
pub fn normalized_laplacian(weights: &Matrix) -> Result<Matrix> {
    let n = weights.rows();
    let degrees: Vec<f64> = (0..n).map(|i| weights.row(i).iter().sum()).collect();
    if degrees.iter().any(|&d| d <= 0.0) {
        return Err(Error::Domain("normalized laplacian needs positive degrees".into()));
    }
    let mut l = Matrix::identity(n);
    for i in 0..n {
        for j in 0..n {
            l[(i, j)] -= weights[(i, j)] / (degrees[i] * degrees[j]).sqrt();
        }
    }
    Ok(l)
}

pub fn graph_spectral_confidence(graph: &ConsistencyGraph) -> Result<SpectralConfidence> {
    let n = graph.n as f64;
    let degree = (0..graph.n)
        .map(|i| graph.weights.row(i).iter().sum::<f64>() / n)
        .collect();
    let laplacian = normalized_laplacian(&graph.weights)?;
    let eig = jacobi_eigenvalues(&laplacian, JACOBI_TOLERANCE)?;
    let uncertainty = eig.values.iter().map(|&l| (1.0 - l).max(0.0)).sum();
    Ok(SpectralConfidence {
        degree,
        uncertainty,
        laplacian_eigenvalues: eig.values,
    })
}

fn check_fit_inputs(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Data(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("calibrator scores must be finite".into()));
    }
    let positives = labels.iter().filter(|&&y| y).count();
    if positives == 0 || positives == labels.len() {
        return Err(Error::Numeric(
            "calibrator fit needs at least one positive and one negative label".into(),
        ));
    }
    Ok(())
}

/// `p = sigmoid(a * score + b)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlattScaler {
    pub a: f64,
    pub b: f64,
    pub iterations: usize,
}

const PLATT_MAX_ITER: usize = 100;
const PLATT_GRAD_TOL: f64 = 1e-10;

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn platt_objective(scores: &[f64], labels: &[bool], a: f64, b: f64) -> f64 {
    scores
        .iter()
        .zip(labels)
        .map(|(&s, &y)| {
            let z = a * s + b;
            softplus(z) - if y { z } else { 0.0 }
        })
        .sum()
}

impl PlattScaler {
    /// Newton's method with backtracking on the log-loss.
    pub fn fit(scores: &[f64], labels: &[bool]) -> Result<Self> {
        check_fit_inputs(scores, labels)?;
        if scores.iter().all(|&s| s == scores[0]) {
            return Err(Error::Numeric("platt scaling on constant scores is degenerate".into()));
        }
        let positives = labels.iter().filter(|&&y| y).count() as f64;
        let negatives = labels.len() as f64 - positives;
        let (mut a, mut b) = (0.0, ((positives + 1.0) / (negatives + 1.0)).ln());
        let mut value = platt_objective(scores, labels, a, b);
        let mut iterations = 0;
        while iterations < PLATT_MAX_ITER {
            let (mut ga, mut gb, mut haa, mut hab, mut hbb) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (&s, &y) in scores.iter().zip(labels) {
                let p = logistic(a * s + b);
                let r = p - if y { 1.0 } else { 0.0 };
                let w = p * (1.0 - p);
                ga += r * s;
                gb += r;
                haa += w * s * s;
                hab += w * s;
                hbb += w;
            }
            if (ga * ga + gb * gb).sqrt() < PLATT_GRAD_TOL {
                break;
            }
            iterations += 1;
            let det = haa * hbb - hab * hab;
            // fall back to steepest descent when the Hessian is numerically singular
            let (da, db) = if det > 1e-300 * haa.max(hbb).max(1.0) {
                (-(hbb * ga - hab * gb) / det, -(haa * gb - hab * ga) / det)
            } else {
                (-ga, -gb)
            };
            let slope = ga * da + gb * db;
            let mut step = 1.0;
            loop {
                let (na, nb) = (a + step * da, b + step * db);
                let candidate = platt_objective(scores, labels, na, nb);
                if candidate <= value + 1e-4 * step * slope {
                    a = na;
                    b = nb;
                    value = candidate;
                    break;
                }
                step *= 0.5;
                if step < 1e-12 {
                    // no further decrease available at this precision
                    return Ok(PlattScaler { a, b, iterations });
                }
            }
        }
        if !(a.is_finite() && b.is_finite()) {
            return Err(Error::Numeric("platt fit diverged".into()));
        }
        Ok(PlattScaler { a, b, iterations })
    }

    pub fn apply(&self, score: f64) -> f64 {
        logistic(self.a * score + self.b)
    }
}

/// Monotone step function fitted by pool-adjacent-violators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsotonicCalibrator {
    /// Distinct training scores, ascending.
    pub thresholds: Vec<f64>,
    /// Fitted value at each threshold, non-decreasing.
    pub values: Vec<f64>,
}

/// Weighted pool-adjacent-violators: least-squares non-decreasing fit of
/// `targets` with positive `weights`.
pub fn pava(targets: &[f64], weights: &[f64]) -> Vec<f64> {
    // blocks of (weighted mean, total weight, point count)
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(targets.len());
    for (&y, &w) in targets.iter().zip(weights) {
        blocks.push((y, w, 1));
        while blocks.len() >= 2 {
            let (m2, w2, c2) = blocks[blocks.len() - 1];
            let (m1, w1, c1) = blocks[blocks.len() - 2];
            if m1 <= m2 {
                break;
            }
            blocks.truncate(blocks.len() - 2);
            blocks.push(((m1 * w1 + m2 * w2) / (w1 + w2), w1 + w2, c1 + c2));
        }
    }
    blocks
        .into_iter()
        .flat_map(|(m, _, c)| std::iter::repeat_n(m, c))
        .collect()
}

impl IsotonicCalibrator {
    pub fn fit(scores: &[f64], labels: &[bool]) -> Result<Self> {
        check_fit_inputs(scores, labels)?;
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]));
        // tied scores collapse into one weighted point
        let mut thresholds: Vec<f64> = Vec::new();
        let mut sums: Vec<f64> = Vec::new();
        let mut weights: Vec<f64> = Vec::new();
        for i in order {
            let y = if labels[i] { 1.0 } else { 0.0 };
            if thresholds.last() == Some(&scores[i]) {
                *sums.last_mut().unwrap() += y;
                *weights.last_mut().unwrap() += 1.0;
            } else {
                thresholds.push(scores[i]);
                sums.push(y);
                weights.push(1.0);
            }
        }
        let means: Vec<f64> = sums.iter().zip(&weights).map(|(s, w)| s / w).collect();
        let values = pava(&means, &weights);
        Ok(IsotonicCalibrator { thresholds, values })
    }

    /// Value of the step containing `score`; clamped outside the fitted range.
    pub fn apply(&self, score: f64) -> f64 {
        let idx = self.thresholds.partition_point(|&t| t <= score);
        self.values[idx.saturating_sub(1)]
    }
}

/// Dataset split a calibrator was fitted on or is applied to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosthocMethod {
    #[default]
    None,
    Platt,
    Isotonic,
}

impl FromStr for PosthocMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(PosthocMethod::None),
            "platt" => Ok(PosthocMethod::Platt),
            "isotonic" => Ok(PosthocMethod::Isotonic),
            other => Err(Error::Config(format!("unknown post-hoc calibrator `{other}`"))),
        }
    }
}

impl fmt::Display for PosthocMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PosthocMethod::None => "none",
            PosthocMethod::Platt => "platt",
            PosthocMethod::Isotonic => "isotonic",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PosthocCalibrator {
    Identity,
    Platt(PlattScaler),
    Isotonic(IsotonicCalibrator),
}

impl PosthocCalibrator {
    pub fn apply(&self, score: f64) -> f64 {
        match self {
            PosthocCalibrator::Identity => score,
            PosthocCalibrator::Platt(p) => p.apply(score),
            PosthocCalibrator::Isotonic(i) => i.apply(score),
        }
    }
}

/// A post-hoc calibrator that remembers which split it was fitted on and
/// refuses to be applied to that same split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedPosthoc {
    pub calibrator: PosthocCalibrator,
    pub fitted_on: Split,
}

impl FittedPosthoc {
    pub fn fit(method: PosthocMethod, scores: &[f64], labels: &[bool], split: Split) -> Result<Self> {
        let calibrator = match method {
            PosthocMethod::None => PosthocCalibrator::Identity,
            PosthocMethod::Platt => PosthocCalibrator::Platt(PlattScaler::fit(scores, labels)?),
            PosthocMethod::Isotonic => {
                PosthocCalibrator::Isotonic(IsotonicCalibrator::fit(scores, labels)?)
            }
        };
        Ok(FittedPosthoc {
            calibrator,
            fitted_on: split,
        })
    }

    pub fn apply(&self, scores: &[f64], split: Split) -> Result<Vec<f64>> {
        if split == self.fitted_on && self.calibrator != PosthocCalibrator::Identity {
            return Err(Error::Config(format!(
                "post-hoc calibrator was fitted on the {split:?} split and cannot be applied to it"
            )));
        }
        Ok(scores.iter().map(|&s| self.calibrator.apply(s)).collect())
    }
}

/// Confidence source used for evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConfidenceMethod {
    ClusterFreq,
    Seqlik,
    Degree,
    Gnn,
}

impl FromStr for ConfidenceMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cluster-freq" => Ok(ConfidenceMethod::ClusterFreq),
            "seqlik" => Ok(ConfidenceMethod::Seqlik),
            "degree" => Ok(ConfidenceMethod::Degree),
            "gnn" => Ok(ConfidenceMethod::Gnn),
            other => Err(Error::Config(format!("unknown confidence method `{other}`"))),
        }
    }
}

impl fmt::Display for ConfidenceMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConfidenceMethod::ClusterFreq => "cluster-freq",
            ConfidenceMethod::Seqlik => "seqlik",
            ConfidenceMethod::Degree => "degree",
            ConfidenceMethod::Gnn => "gnn",
        })
    }
}
