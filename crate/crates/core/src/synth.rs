//! Synthetic response sets with a known correctness process.
//!
//! Each question plants a "correct" cluster holding a share `x` of the
//! responses and one or two "wrong" clusters. Correct responses are right with
//! probability `distortion(x)`, wrong ones with `distortion(0.15 x)`, so the
//! cluster share is informative about correctness without being equal to it.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::baselines::cluster_frequency_confidence;
use crate::dataset::{QuestionRecord, ResponseRecord};
use crate::error::{Error, Result};
use crate::graph::{build_graph, GraphOptions};
use crate::linalg::{dot, norm};
use crate::metrics::{ece, Pair, DEFAULT_BINS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distortion {
    Identity,
    Square,
    Sqrt,
}

impl Distortion {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Distortion::Identity => x,
            Distortion::Square => x * x,
            Distortion::Sqrt => x.sqrt(),
        }
    }
}

impl FromStr for Distortion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Distortion::Identity),
            "square" => Ok(Distortion::Square),
            "sqrt" => Ok(Distortion::Sqrt),
            other => Err(Error::Config(format!("unknown distortion `{other}`"))),
        }
    }
}

impl fmt::Display for Distortion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Distortion::Identity => "identity",
            Distortion::Square => "square",
            Distortion::Sqrt => "sqrt",
        })
    }
}

pub const SHARE_RANGE: (f64, f64) = (0.2, 1.0);
pub const WRONG_SHARE_FACTOR: f64 = 0.15;
pub const MAX_CENTER_COSINE: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_questions: usize,
    pub n_per_question: usize,
    pub distortion: Distortion,
    pub seed: u64,
    pub dimension: usize,
    pub noise_sigma: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_questions: 200,
            n_per_question: 30,
            distortion: Distortion::Identity,
            seed: 0,
            dimension: 16,
            noise_sigma: 0.05,
        }
    }
}

/// Ground truth recorded for one generated question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionTruth {
    pub id: String,
    /// Drawn share `x` of the correct cluster.
    pub dominant_share: f64,
    /// Number of responses placed at the correct center, `ceil(x n)` capped at `n - 2`.
    pub dominant_size: usize,
    /// Planted cluster per response: 0 correct, 1 or 2 wrong.
    pub planted: Vec<usize>,
    /// True correctness probability per response.
    pub probabilities: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub records: Vec<QuestionRecord>,
    pub truths: Vec<QuestionTruth>,
}

/// Seed for question `index`, independent across questions.
pub fn question_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64).wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn cosine(u: &[f64], v: &[f64]) -> f64 {
    dot(u, v) / (norm(u) * norm(v))
}

fn planted_centers(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    loop {
        let centers: Vec<Vec<f64>> = (0..count).map(|_| random_unit(rng, dim)).collect();
        let ok = (0..count).all(|i| (0..i).all(|j| cosine(&centers[i], &centers[j]) <= MAX_CENTER_COSINE));
        if ok {
            return centers;
        }
    }
}

fn generate_question(config: &SynthConfig, index: usize) -> (QuestionRecord, QuestionTruth) {
    let n = config.n_per_question;
    let mut rng = ChaCha8Rng::seed_from_u64(question_seed(config.seed, index));
    let x = rng.random_range(SHARE_RANGE.0..SHARE_RANGE.1);
    // at least two wrong responses, so k-means with k = 3 never has to split
    // the correct cluster
    let dominant = ((x * n as f64).ceil() as usize).clamp(1, n.saturating_sub(2).max(1));
    let rest = n - dominant;
    let wrong_sizes = match rest {
        0 => vec![],
        1 => vec![1],
        _ => {
            let first = rng.random_range(1..rest);
            vec![first, rest - first]
        }
    };
    let centers = planted_centers(&mut rng, 1 + wrong_sizes.len(), config.dimension);

    let mut planted = vec![0; dominant];
    for (c, &size) in wrong_sizes.iter().enumerate() {
        planted.extend(std::iter::repeat_n(c + 1, size));
    }
    let p_correct = config.distortion.apply(x);
    let p_wrong = config.distortion.apply(WRONG_SHARE_FACTOR * x);

    let id = format!("synth-{index:06}");
    let mut responses = Vec::with_capacity(n);
    let mut probabilities = Vec::with_capacity(n);
    for &cluster in &planted {
        let noisy: Vec<f64> = centers[cluster]
            .iter()
            .map(|c| c + config.noise_sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let len = norm(&noisy);
        let embedding: Vec<f64> = noisy.iter().map(|v| v / len).collect();
        let p = if cluster == 0 { p_correct } else { p_wrong };
        let label = u8::from(rng.random::<f64>() < p);
        probabilities.push(p);
        responses.push(ResponseRecord {
            embedding: Some(embedding),
            label: Some(label),
            ..ResponseRecord::new(format!("{id} answer {cluster}"))
        });
    }

    let primary = (0..dominant)
        .max_by(|&a, &b| {
            let ca = cosine(responses[a].embedding.as_deref().unwrap(), &centers[0]);
            let cb = cosine(responses[b].embedding.as_deref().unwrap(), &centers[0]);
            ca.total_cmp(&cb).then(b.cmp(&a))
        })
        .unwrap_or(0);
    responses[primary].is_primary = true;

    let record = QuestionRecord {
        id: id.clone(),
        question: format!("synthetic question {index}"),
        rephrasings: vec![],
        reference_answer: Some(format!("{id} answer 0")),
        responses,
    };
    let truth = QuestionTruth {
        id,
        dominant_share: x,
        dominant_size: dominant,
        planted,
        probabilities,
    };
    (record, truth)
}

pub fn generate(config: &SynthConfig) -> Result<SyntheticDataset> {
    if config.n_per_question < 2 || config.dimension < 2 || config.noise_sigma.is_nan() || config.noise_sigma < 0.0 {
        return Err(Error::Config(format!(
            "synthetic config needs n >= 2, dimension >= 2, sigma >= 0: {config:?}"
        )));
    }
    let (records, truths) = (0..config.num_questions)
        .map(|i| generate_question(config, i))
        .unzip();
    Ok(SyntheticDataset { records, truths })
}

pub fn write_truths(truths: &[QuestionTruth], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for t in truths {
        let line = serde_json::to_string(t).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_truths(path: impl AsRef<Path>) -> Result<Vec<QuestionTruth>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut truths = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        truths.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(truths)
}

/// Confidence source scored by [`oracle_ece_of_baseline`].
#[derive(Debug, Clone, PartialEq)]
pub enum OracleBaseline {
    /// Cluster share of the primary response, from the full graph pipeline.
    ClusterFrequency(GraphOptions),
    /// The recorded true probability itself.
    Truth,
    /// Externally computed primary-response confidences, one per question.
    Given(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    /// ECE against the sampled primary-response labels.
    pub ece: f64,
    /// `E|confidence - true probability|` over primary responses.
    pub expected_gap: f64,
    pub questions: usize,
}

/// Scores a baseline's primary-response confidences against sampled labels
/// and against the recorded true probabilities.
pub fn oracle_ece_of_baseline(data: &SyntheticDataset, baseline: &OracleBaseline) -> Result<OracleReport> {
    if data.records.len() != data.truths.len() {
        return Err(Error::Data("records and truths differ in length".into()));
    }
    let mut pairs: Vec<Pair> = Vec::with_capacity(data.records.len());
    let mut gap = 0.0;
    for (q, (record, truth)) in data.records.iter().zip(&data.truths).enumerate() {
        let primary = record
            .primary_index()
            .ok_or_else(|| Error::Data(format!("question {} has no primary response", record.id)))?;
        let confidence = match baseline {
            OracleBaseline::ClusterFrequency(options) => {
                cluster_frequency_confidence(&build_graph(record, options)?)[primary]
            }
            OracleBaseline::Truth => truth.probabilities[primary],
            OracleBaseline::Given(values) => *values.get(q).ok_or_else(|| {
                Error::Data(format!("no given confidence for question {}", record.id))
            })?,
        };
        let label = record.responses[primary]
            .label
            .ok_or_else(|| Error::Data(format!("question {} primary is unlabeled", record.id)))?;
        pairs.push((confidence, label == 1));
        gap += (confidence - truth.probabilities[primary]).abs();
    }
    let (ece, _) = ece(&pairs, DEFAULT_BINS)?;
    Ok(OracleReport {
        ece,
        expected_gap: gap / pairs.len() as f64,
        questions: pairs.len(),
    })
}
