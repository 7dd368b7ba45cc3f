//! Stage runners behind the command-line tool.
//!
//! Every stage reads and writes fixed file names inside a work directory and
//! records what it wrote in `manifest.json`: the resolved config, its hash,
//! the seeds, the stage version, and SHA-256 digests of inputs and outputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{
    cluster_frequency_confidence, graph_spectral_confidence, seq_likelihood_confidence,
    ConfidenceMethod, FittedPosthoc, Split,
};
use crate::config::{hex, MethodSpec, PipelineConfig, Stage};
use crate::dataset::{
    read_dataset, validate_dataset_with, write_dataset, PrimaryPolicy, QuestionRecord,
};
use crate::error::{Error, Result};
use crate::gnn::{calibrate, train_with_validation, CalibrationScores, GcnModel, LabeledGraph, QuestionScores};
use crate::graph::{assign_default_primary, build_graph, pool_multi_prompt, ConsistencyGraph};
use crate::ingest::embed_dataset;
use crate::labeling::{ingest_manual_labels, label_by_llm_judge, label_by_rouge, HttpJudge, LabelMethod};
use crate::linalg::Matrix;
use crate::metrics::{evaluate, EvalReport, Pair};
use crate::synth::{generate, write_truths, SynthConfig};

pub const MANIFEST: &str = "manifest.json";
pub const SYNTH_DATASET: &str = "dataset.jsonl";
pub const SYNTH_TRUTHS: &str = "truths.jsonl";
pub const EMBEDDED: &str = "embedded.jsonl";
pub const LABELED: &str = "labeled.jsonl";
pub const UNLABELED: &str = "unlabeled.csv";
pub const PREPARED: &str = "prepared.jsonl";
pub const GRAPHS: &str = "graphs.jsonl";
pub const SPLITS: &str = "splits.json";
pub const MODEL: &str = "model.json";
pub const TRAINING_LOG: &str = "training_log.csv";
pub const REPORT: &str = "report.json";
pub const RELIABILITY: &str = "reliability.csv";
pub const REPEAT_JSON: &str = "repeat.json";
pub const REPEAT_TABLE: &str = "repeat_table.md";

/// Baselines the report lists as unavailable.
pub const NOT_COMPUTED: [&str; 3] = ["verbalized", "self-checkgpt", "apricot"];

pub fn scores_file(method: ConfidenceMethod) -> String {
    format!("scores_{method}.json")
}

pub fn eval_file(spec: &MethodSpec) -> String {
    format!("eval_{}.json", spec.file_stem())
}

pub fn reliability_file(spec: &MethodSpec) -> String {
    format!("reliability_{}.csv", spec.file_stem())
}

/// A stage error tagged with the stage that raised it.
#[derive(Debug)]
pub struct StageFailure {
    pub stage: Stage,
    pub error: Error,
}

impl std::fmt::Display for StageFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} stage failed: {}", self.stage.name(), self.error)
    }
}

impl std::error::Error for StageFailure {}

#[derive(Debug, Clone)]
pub struct Workspace {
    dir: PathBuf,
}

impl Workspace {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Workspace { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Data(format!("cannot serialize {}: {e}", path.display())))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactStatus {
    /// The producing stage started but did not finish.
    Partial,
    Complete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub synth: Option<u64>,
    pub ingest: u64,
    pub graph: u64,
    pub train: u64,
    pub split: u64,
    pub test: u64,
}

impl Seeds {
    pub fn of(config: &PipelineConfig) -> Self {
        Seeds {
            synth: config.synth.as_ref().map(|s| s.seed),
            ingest: config.ingest.seed,
            graph: config.graph.seed,
            train: config.train.seed,
            split: config.train.split_seed,
            test: config.evaluate.test_seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub stage: Stage,
    pub stage_version: u32,
    pub config_hash: String,
    pub seeds: Seeds,
    /// SHA-256 of each input, keyed by path.
    pub inputs: BTreeMap<String, String>,
    pub sha256: Option<String>,
    pub status: ArtifactStatus,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    /// Resolved configs keyed by their hash.
    pub configs: BTreeMap<String, PipelineConfig>,
    pub artifacts: BTreeMap<String, ArtifactEntry>,
}

impl Manifest {
    pub fn load(ws: &Workspace) -> Result<Self> {
        let path = ws.path(MANIFEST);
        if path.exists() {
            read_json(&path)
        } else {
            Ok(Manifest {
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                ..Default::default()
            })
        }
    }

    pub fn save(&self, ws: &Workspace) -> Result<()> {
        write_json(self, &ws.path(MANIFEST))
    }
}

/// Runs `body` as `stage`, flagging `outputs` partial until it succeeds.
fn run_stage(
    ws: &Workspace,
    config: &PipelineConfig,
    stage: Stage,
    inputs: &[PathBuf],
    outputs: &[String],
    body: impl FnOnce() -> Result<()>,
) -> std::result::Result<(), StageFailure> {
    let fail = |error| StageFailure { stage, error };
    let hash = config.hash();
    let mut input_hashes = BTreeMap::new();
    for path in inputs {
        input_hashes.insert(path.display().to_string(), sha256_file(path).map_err(fail)?);
    }
    let mut manifest = Manifest::load(ws).map_err(fail)?;
    manifest.configs.insert(hash.clone(), config.clone());
    let entry = ArtifactEntry {
        stage,
        stage_version: stage.version(),
        config_hash: hash,
        seeds: Seeds::of(config),
        inputs: input_hashes,
        sha256: None,
        status: ArtifactStatus::Partial,
    };
    for name in outputs {
        manifest.artifacts.insert(name.clone(), entry.clone());
    }
    manifest.save(ws).map_err(fail)?;

    body().map_err(fail)?;

    for name in outputs {
        let digest = sha256_file(ws.path(name)).map_err(fail)?;
        let e = manifest.artifacts.get_mut(name).expect("registered above");
        e.sha256 = Some(digest);
        e.status = ArtifactStatus::Complete;
    }
    manifest.save(ws).map_err(fail)
}

/// Maps `f` over `items` on up to `jobs` threads, preserving order.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    let f = &f;
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(f).collect::<Vec<R>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

fn check_records(records: &[QuestionRecord]) -> Result<()> {
    let errors = validate_dataset_with(records, PrimaryPolicy::AllowUnassigned);
    if errors.is_empty() {
        return Ok(());
    }
    let mut message = format!("{} validation error(s)", errors.len());
    for e in errors.iter().take(10) {
        let _ = write!(message, "; question {} {}: {}", e.question_id, e.field, e.message);
    }
    Err(Error::Data(message))
}

/// Serialized form of a [`ConsistencyGraph`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphRecord {
    pub id: String,
    pub k_max: usize,
    pub primary: usize,
    pub assignments: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
}

impl GraphRecord {
    pub fn new(id: &str, graph: &ConsistencyGraph) -> Self {
        GraphRecord {
            id: id.to_string(),
            k_max: graph.k_max(),
            primary: graph.primary,
            assignments: graph.assignments.clone(),
            weights: (0..graph.n).map(|i| graph.weights.row(i).to_vec()).collect(),
        }
    }

    pub fn to_graph(&self) -> Result<ConsistencyGraph> {
        let weights = Matrix::from_rows(&self.weights)?;
        ConsistencyGraph::from_parts(weights, self.assignments.clone(), self.k_max, self.primary)
            .map_err(|e| Error::Data(format!("graph {}: {e}", self.id)))
    }
}

pub fn write_graphs(graphs: &[GraphRecord], path: &Path) -> Result<()> {
    let mut out = String::new();
    for g in graphs {
        let line = serde_json::to_string(g).map_err(|e| Error::Data(e.to_string()))?;
        out.push_str(&line);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_graphs(path: &Path) -> Result<Vec<(String, ConsistencyGraph)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let record: GraphRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
            Ok((record.id.clone(), record.to_graph()?))
        })
        .collect()
}

/// Question ids per split, each list in dataset order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

/// Draws the test set with `test_seed`, then splits the remainder into
/// train and validation with `split_seed`. Both fractions are of the whole.
pub fn make_splits(ids: &[String], val_fraction: f64, test_fraction: f64, test_seed: u64, split_seed: u64) -> Splits {
    let n = ids.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(test_seed));
    let n_test = ((n as f64 * test_fraction).round() as usize).min(n);
    let mut test = order[..n_test].to_vec();
    let mut rest = order[n_test..].to_vec();
    rest.sort_unstable();
    rest.shuffle(&mut ChaCha8Rng::seed_from_u64(split_seed));
    let n_val = ((n as f64 * val_fraction).round() as usize).min(rest.len());
    let mut validation = rest[..n_val].to_vec();
    let mut train = rest[n_val..].to_vec();
    let names = |v: &mut Vec<usize>| {
        v.sort_unstable();
        v.iter().map(|&i| ids[i].clone()).collect::<Vec<_>>()
    };
    Splits {
        train: names(&mut train),
        validation: names(&mut validation),
        test: names(&mut test),
    }
}

/// Dataset and graphs as written by the graph stage.
pub struct Prepared {
    pub records: Vec<QuestionRecord>,
    pub graphs: Vec<ConsistencyGraph>,
    index: BTreeMap<String, usize>,
}

impl Prepared {
    pub fn load(ws: &Workspace) -> Result<Self> {
        let records = read_dataset(ws.path(PREPARED))?;
        let graphs = read_graphs(&ws.path(GRAPHS))?;
        Self::new(records, graphs)
    }

    pub fn new(records: Vec<QuestionRecord>, graphs: Vec<(String, ConsistencyGraph)>) -> Result<Self> {
        if records.len() != graphs.len() || records.iter().zip(&graphs).any(|(r, (id, _))| &r.id != id) {
            return Err(Error::Data("prepared dataset and graphs do not line up".into()));
        }
        let index = records.iter().enumerate().map(|(i, r)| (r.id.clone(), i)).collect();
        Ok(Prepared {
            records,
            graphs: graphs.into_iter().map(|(_, g)| g).collect(),
            index,
        })
    }

    pub fn ids(&self) -> Vec<String> {
        self.records.iter().map(|r| r.id.clone()).collect()
    }

    fn position(&self, id: &str) -> Result<usize> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| Error::Data(format!("unknown question id {id}")))
    }

    fn labeled(&self, ids: &[String]) -> Result<Vec<LabeledGraph>> {
        ids.iter()
            .map(|id| {
                let i = self.position(id)?;
                LabeledGraph::from_record(&self.records[i], self.graphs[i].clone())
            })
            .collect()
    }
}

pub fn synth_stage(ws: &Workspace, config: &PipelineConfig) -> std::result::Result<(), StageFailure> {
    let synth = config.synth.clone().unwrap_or_default();
    write_synthetic(ws, config, &synth, SYNTH_DATASET, SYNTH_TRUTHS)
}

/// Generates a synthetic dataset into `ws` with its truths sidecar.
pub fn write_synthetic(
    ws: &Workspace,
    config: &PipelineConfig,
    synth: &SynthConfig,
    dataset_name: &str,
    truths_name: &str,
) -> std::result::Result<(), StageFailure> {
    let outputs = [dataset_name.to_string(), truths_name.to_string()];
    run_stage(ws, config, Stage::Synth, &[], &outputs, || {
        let data = generate(synth)?;
        write_dataset(&data.records, ws.path(dataset_name))?;
        write_truths(&data.truths, ws.path(truths_name))
    })
}

fn ingest_input(ws: &Workspace, config: &PipelineConfig) -> Result<PathBuf> {
    match (&config.synth, &config.data.input) {
        (Some(_), _) => Ok(ws.path(SYNTH_DATASET)),
        (None, Some(p)) => Ok(p.clone()),
        (None, None) => Err(Error::Config(
            "no input dataset: set data.input, pass --input, or add a [synth] section".into(),
        )),
    }
}

pub fn ingest_stage(ws: &Workspace, config: &PipelineConfig) -> std::result::Result<(), StageFailure> {
    let input = ingest_input(ws, config).map_err(|error| StageFailure {
        stage: Stage::Ingest,
        error,
    })?;
    run_stage(ws, config, Stage::Ingest, std::slice::from_ref(&input), &[EMBEDDED.into()], || {
        let records = read_dataset(&input)?;
        check_records(&records)?;
        let records = embed_dataset(records, &config.ingest)?;
        write_dataset(&records, ws.path(EMBEDDED))
    })
}

pub fn label_stage(ws: &Workspace, config: &PipelineConfig) -> std::result::Result<(), StageFailure> {
    let mut inputs = vec![ws.path(EMBEDDED)];
    let mut outputs = vec![LABELED.to_string()];
    let label = &config.label;
    if label.method == LabelMethod::Manual {
        match &config.data.labels_csv {
            Some(p) => inputs.push(p.clone()),
            None => {
                return Err(StageFailure {
                    stage: Stage::Label,
                    error: Error::Config("manual labeling needs data.labels_csv or --labels-csv".into()),
                })
            }
        }
    }
    if label.method == LabelMethod::LlmJudge {
        outputs.push(UNLABELED.into());
    }
    run_stage(ws, config, Stage::Label, &inputs, &outputs, || {
        label.validate()?;
        let records = read_dataset(ws.path(EMBEDDED))?;
        let labeled = match label.method {
            LabelMethod::Rouge => parallel_map(&records, config.run.jobs, |r| {
                label_by_rouge(r.clone(), label.tau, label.overwrite)
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?,
            LabelMethod::LlmJudge => {
                let judge = HttpJudge::from_env(label.judge_endpoint.clone().unwrap_or_default());
                let results = parallel_map(&records, config.run.jobs, |r| {
                    label_by_llm_judge(r.clone(), &judge, label.overwrite)
                });
                let mut out = Vec::with_capacity(records.len());
                let mut csv = String::from("question_id,response_index,last_reply\n");
                for result in results {
                    let (record, missing) = result?;
                    for m in missing {
                        let reply = m.last_reply.replace('"', "\"\"");
                        let _ = writeln!(csv, "{},{},\"{}\"", m.question_id, m.response_index, reply);
                    }
                    out.push(record);
                }
                let path = ws.path(UNLABELED);
                std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
                out
            }
            LabelMethod::Manual => {
                ingest_manual_labels(records, config.data.labels_csv.as_ref().expect("checked"))?
            }
        };
        check_records(&labeled)?;
        write_dataset(&labeled, ws.path(LABELED))
    })
}

pub fn graph_stage(ws: &Workspace, config: &PipelineConfig) -> std::result::Result<(), StageFailure> {
    let outputs = [PREPARED.to_string(), GRAPHS.to_string(), SPLITS.to_string()];
    run_stage(ws, config, Stage::Graph, &[ws.path(LABELED)], &outputs, || {
        let records = read_dataset(ws.path(LABELED))?;
        let built = parallel_map(&records, config.run.jobs, |r| {
            let mut record = pool_multi_prompt(r.clone());
            let graph = build_graph(&record, &config.graph)?;
            assign_default_primary(&mut record, &graph);
            Ok((record, graph))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let graphs: Vec<GraphRecord> = built.iter().map(|(r, g)| GraphRecord::new(&r.id, g)).collect();
        let records: Vec<QuestionRecord> = built.into_iter().map(|(r, _)| r).collect();
        let ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
        let splits = make_splits(
            &ids,
            config.train.val_fraction,
            config.evaluate.test_fraction,
            config.evaluate.test_seed,
            config.train.split_seed,
        );
        write_dataset(&records, ws.path(PREPARED))?;
        write_graphs(&graphs, &ws.path(GRAPHS))?;
        write_json(&splits, &ws.path(SPLITS))
    })
}

fn train_on_splits(prepared: &Prepared, splits: &Splits, config: &PipelineConfig) -> Result<(GcnModel, crate::gnn::TrainingLog)> {
    let train_set = prepared.labeled(&splits.train)?;
    let val_set = prepared.labeled(&splits.validation)?;
    let train_refs: Vec<&LabeledGraph> = train_set.iter().collect();
    let val_refs: Vec<&LabeledGraph> = val_set.iter().collect();
    train_with_validation(&train_refs, &val_refs, &config.train)
}

pub fn train_stage(ws: &Workspace, config: &PipelineConfig) -> std::result::Result<(), StageFailure> {
    let inputs = [ws.path(PREPARED), ws.path(GRAPHS), ws.path(SPLITS)];
    let outputs = [MODEL.to_string(), TRAINING_LOG.to_string()];
    run_stage(ws, config, Stage::Train, &inputs, &outputs, || {
        let prepared = Prepared::load(ws)?;
        let splits: Splits = read_json(&ws.path(SPLITS))?;
        let (model, log) = train_on_splits(&prepared, &splits, config)?;
        model.save(ws.path(MODEL))?;
        log.write_csv(ws.path(TRAINING_LOG))
    })
}

fn gnn_scores(model: &GcnModel, prepared: &Prepared, batch_size: usize) -> Result<CalibrationScores> {
    let ids = prepared.ids();
    calibrate(
        model,
        ids.iter().map(String::as_str).zip(prepared.graphs.iter()),
        batch_size,
    )
}

pub fn calibrate_stage(ws: &Workspace, config: &PipelineConfig) -> std::result::Result<(), StageFailure> {
    let inputs = [ws.path(MODEL), ws.path(GRAPHS), ws.path(PREPARED)];
    let out = scores_file(ConfidenceMethod::Gnn);
    run_stage(ws, config, Stage::Calibrate, &inputs, std::slice::from_ref(&out), || {
        let model = GcnModel::load(ws.path(MODEL))?;
        let prepared = Prepared::load(ws)?;
        gnn_scores(&model, &prepared, config.train.batch_size)?.save(ws.path(&out))
    })
}

/// Scores every question with a training-free confidence method.
pub fn baseline_scores(method: ConfidenceMethod, prepared: &Prepared, jobs: usize) -> Result<CalibrationScores> {
    let items: Vec<usize> = (0..prepared.records.len()).collect();
    let scored = parallel_map(&items, jobs, |&i| {
        let (record, graph) = (&prepared.records[i], &prepared.graphs[i]);
        let probabilities = match method {
            ConfidenceMethod::ClusterFreq => cluster_frequency_confidence(graph),
            ConfidenceMethod::Seqlik => seq_likelihood_confidence(record)?,
            ConfidenceMethod::Degree => graph_spectral_confidence(graph)?.degree,
            ConfidenceMethod::Gnn => {
                return Err(Error::Config("the gnn method is scored by the calibrate stage".into()))
            }
        };
        Ok((
            record.id.clone(),
            QuestionScores {
                primary_index: graph.primary,
                primary_probability: probabilities[graph.primary],
                probabilities,
            },
        ))
    });
    let mut scores = CalibrationScores::default();
    for item in scored {
        let (id, q) = item?;
        scores.questions.insert(id, q);
    }
    Ok(scores)
}

pub fn baseline_stage(
    ws: &Workspace,
    config: &PipelineConfig,
    method: ConfidenceMethod,
) -> std::result::Result<(), StageFailure> {
    let inputs = [ws.path(PREPARED), ws.path(GRAPHS)];
    let out = scores_file(method);
    run_stage(ws, config, Stage::Baseline, &inputs, std::slice::from_ref(&out), || {
        let prepared = Prepared::load(ws)?;
        baseline_scores(method, &prepared, config.run.jobs)?.save(ws.path(&out))
    })
}

/// Evaluation of one method on the test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodEvaluation {
    pub method: MethodSpec,
    pub per_response: bool,
    pub test_questions: usize,
    pub report: EvalReport,
}

fn split_pairs(
    prepared: &Prepared,
    scores: &CalibrationScores,
    ids: &[String],
    per_response: bool,
) -> Result<(Vec<f64>, Vec<bool>)> {
    let mut conf = Vec::new();
    let mut labels = Vec::new();
    for id in ids {
        let record = &prepared.records[prepared.position(id)?];
        let q = scores
            .questions
            .get(id)
            .ok_or_else(|| Error::Data(format!("no scores for question {id}")))?;
        let indices: Vec<usize> = if per_response {
            (0..record.responses.len()).collect()
        } else {
            vec![q.primary_index]
        };
        for i in indices {
            let label = record.responses.get(i).and_then(|r| r.label).ok_or_else(|| {
                Error::Data(format!("question {id}: response {i} is unlabeled"))
            })?;
            let p = *q.probabilities.get(i).ok_or_else(|| {
                Error::Data(format!("question {id}: no score for response {i}"))
            })?;
            conf.push(p);
            labels.push(label == 1);
        }
    }
    Ok((conf, labels))
}

/// Fits the post-hoc calibrator on the validation split and scores the test split.
pub fn evaluate_method(
    prepared: &Prepared,
    scores: &CalibrationScores,
    splits: &Splits,
    spec: MethodSpec,
    per_response: bool,
    bins: usize,
) -> Result<MethodEvaluation> {
    let (val_scores, val_labels) = split_pairs(prepared, scores, &splits.validation, per_response)?;
    let fitted = FittedPosthoc::fit(spec.posthoc, &val_scores, &val_labels, Split::Validation)?;
    let (test_scores, test_labels) = split_pairs(prepared, scores, &splits.test, per_response)?;
    let calibrated = fitted.apply(&test_scores, Split::Test)?;
    let pairs: Vec<Pair> = calibrated.into_iter().zip(test_labels).collect();
    Ok(MethodEvaluation {
        method: spec,
        per_response,
        test_questions: splits.test.len(),
        report: evaluate(&pairs, bins)?,
    })
}

pub fn evaluate_stage(
    ws: &Workspace,
    config: &PipelineConfig,
    spec: MethodSpec,
) -> std::result::Result<(), StageFailure> {
    let scores_path = ws.path(&scores_file(spec.method));
    let inputs = [ws.path(PREPARED), ws.path(GRAPHS), ws.path(SPLITS), scores_path.clone()];
    let outputs = [eval_file(&spec), reliability_file(&spec)];
    run_stage(ws, config, Stage::Evaluate, &inputs, &outputs, || {
        let prepared = Prepared::load(ws)?;
        let scores = CalibrationScores::load(&scores_path)?;
        let splits: Splits = read_json(&ws.path(SPLITS))?;
        let eval = evaluate_method(
            &prepared,
            &scores,
            &splits,
            spec,
            config.evaluate.per_response,
            config.evaluate.bins,
        )?;
        write_json(&eval, &ws.path(&outputs[0]))?;
        eval.report.write_reliability_csv(ws.path(&outputs[1]))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: MethodSpec,
    pub brier: f64,
    pub auroc: f64,
    pub ece: f64,
    pub n: usize,
}

/// Contents of `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub method: MethodSpec,
    pub per_response: bool,
    pub test_questions: usize,
    #[serde(flatten)]
    pub metrics: EvalReport,
    pub comparisons: Vec<ComparisonRow>,
    pub not_computed: Vec<String>,
}

pub fn report_stage(ws: &Workspace, config: &PipelineConfig) -> std::result::Result<(), StageFailure> {
    let spec = config.evaluate.spec();
    let mut specs = vec![spec];
    specs.extend(config.evaluate.compare.iter().copied().filter(|s| *s != spec));
    let inputs: Vec<PathBuf> = specs
        .iter()
        .map(|s| ws.path(&eval_file(s)))
        .filter(|p| p.exists() || *p == ws.path(&eval_file(&spec)))
        .collect();
    let outputs = [REPORT.to_string(), RELIABILITY.to_string()];
    run_stage(ws, config, Stage::Report, &inputs, &outputs, || {
        let evals = inputs
            .iter()
            .map(|p| read_json::<MethodEvaluation>(p))
            .collect::<Result<Vec<_>>>()?;
        let main = evals[0].clone();
        let report = Report {
            method: main.method,
            per_response: main.per_response,
            test_questions: main.test_questions,
            comparisons: evals
                .iter()
                .map(|e| ComparisonRow {
                    method: e.method,
                    brier: e.report.brier,
                    auroc: e.report.auroc,
                    ece: e.report.ece,
                    n: e.report.n,
                })
                .collect(),
            metrics: main.report,
            not_computed: NOT_COMPUTED.iter().map(|s| s.to_string()).collect(),
        };
        write_json(&report, &ws.path(REPORT))?;
        report.metrics.write_reliability_csv(ws.path(RELIABILITY))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator); 0 for a single run.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        MeanStd { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatRow {
    pub method: MethodSpec,
    pub brier: MeanStd,
    pub auroc: MeanStd,
    pub ece: MeanStd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatRun {
    pub split_seed: u64,
    pub evaluations: Vec<MethodEvaluation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatSummary {
    pub repeats: usize,
    pub rows: Vec<RepeatRow>,
    pub runs: Vec<RepeatRun>,
}

/// Three decimals without the leading zero, as in `.136`.
pub fn short_decimal(v: f64) -> String {
    let s = format!("{v:.3}");
    match s.strip_prefix("0.") {
        Some(rest) => format!(".{rest}"),
        None => match s.strip_prefix("-0.") {
            Some(rest) => format!("-.{rest}"),
            None => s,
        },
    }
}

impl RepeatSummary {
    /// Markdown table with one `mean ± std` cell per metric.
    pub fn table(&self) -> String {
        let mut out = String::from("| Method | Brier | AUROC | ECE |\n|---|---|---|---|\n");
        let cell = |m: &MeanStd| format!("{} ± {}", short_decimal(m.mean), short_decimal(m.std));
        for r in &self.rows {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {} |",
                r.method,
                cell(&r.brier),
                cell(&r.auroc),
                cell(&r.ece)
            );
        }
        out
    }
}

/// Runs `repeat.repeats` train/evaluate cycles with split seeds
/// `train.split_seed, train.split_seed + 1, ...` over a fixed test split.
pub fn run_repeats(prepared: &Prepared, config: &PipelineConfig) -> Result<RepeatSummary> {
    let methods = &config.repeat.methods;
    if methods.is_empty() {
        return Err(Error::Config("repeat.methods is empty".into()));
    }
    let mut fixed: BTreeMap<ConfidenceMethod, CalibrationScores> = BTreeMap::new();
    for spec in methods {
        if spec.method != ConfidenceMethod::Gnn && !fixed.contains_key(&spec.method) {
            fixed.insert(spec.method, baseline_scores(spec.method, prepared, config.run.jobs)?);
        }
    }
    let ids = prepared.ids();
    let mut runs = Vec::with_capacity(config.repeat.repeats);
    for r in 0..config.repeat.repeats {
        let split_seed = config.train.split_seed.wrapping_add(r as u64);
        let splits = make_splits(
            &ids,
            config.train.val_fraction,
            config.evaluate.test_fraction,
            config.evaluate.test_seed,
            split_seed,
        );
        let gnn = if methods.iter().any(|m| m.method == ConfidenceMethod::Gnn) {
            let (model, _) = train_on_splits(prepared, &splits, config)?;
            Some(gnn_scores(&model, prepared, config.train.batch_size)?)
        } else {
            None
        };
        let evaluations = methods
            .iter()
            .map(|spec| {
                let scores = match spec.method {
                    ConfidenceMethod::Gnn => gnn.as_ref().expect("trained above"),
                    m => &fixed[&m],
                };
                evaluate_method(
                    prepared,
                    scores,
                    &splits,
                    *spec,
                    config.evaluate.per_response,
                    config.evaluate.bins,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        runs.push(RepeatRun { split_seed, evaluations });
    }
    let rows = methods
        .iter()
        .enumerate()
        .map(|(m, spec)| {
            let metric = |f: fn(&EvalReport) -> f64| {
                MeanStd::of(&runs.iter().map(|run| f(&run.evaluations[m].report)).collect::<Vec<_>>())
            };
            RepeatRow {
                method: *spec,
                brier: metric(|e| e.brier),
                auroc: metric(|e| e.auroc),
                ece: metric(|e| e.ece),
            }
        })
        .collect();
    Ok(RepeatSummary {
        repeats: config.repeat.repeats,
        rows,
        runs,
    })
}

pub fn repeat_stage(ws: &Workspace, config: &PipelineConfig) -> std::result::Result<(), StageFailure> {
    let inputs = [ws.path(PREPARED), ws.path(GRAPHS)];
    let outputs = [REPEAT_JSON.to_string(), REPEAT_TABLE.to_string()];
    run_stage(ws, config, Stage::Repeat, &inputs, &outputs, || {
        let prepared = Prepared::load(ws)?;
        let summary = run_repeats(&prepared, config)?;
        write_json(&summary, &ws.path(REPEAT_JSON))?;
        let path = ws.path(REPEAT_TABLE);
        std::fs::write(&path, summary.table()).map_err(|e| Error::io(&path, e))
    })
}

/// Every method `run` scores: the evaluated one plus the comparisons.
fn run_methods(config: &PipelineConfig) -> Vec<MethodSpec> {
    let mut specs = vec![config.evaluate.spec()];
    for s in &config.evaluate.compare {
        if !specs.contains(s) {
            specs.push(*s);
        }
    }
    specs
}

/// Executes `run.stages` in order, exactly as the matching subcommands would.
pub fn run_pipeline(ws: &Workspace, config: &PipelineConfig) -> std::result::Result<(), StageFailure> {
    config.validate().map_err(|error| StageFailure {
        stage: config.run.stages.first().copied().unwrap_or(Stage::Ingest),
        error,
    })?;
    for &stage in &config.run.stages {
        match stage {
            // only with a [synth] section; otherwise the input comes from data.input
            Stage::Synth if config.synth.is_none() => {}
            Stage::Synth => synth_stage(ws, config)?,
            Stage::Ingest => ingest_stage(ws, config)?,
            Stage::Label => label_stage(ws, config)?,
            Stage::Graph => graph_stage(ws, config)?,
            Stage::Train => train_stage(ws, config)?,
            Stage::Calibrate => calibrate_stage(ws, config)?,
            Stage::Baseline => {
                let mut done = Vec::new();
                for spec in run_methods(config) {
                    if spec.method != ConfidenceMethod::Gnn && !done.contains(&spec.method) {
                        baseline_stage(ws, config, spec.method)?;
                        done.push(spec.method);
                    }
                }
            }
            Stage::Evaluate => {
                for spec in run_methods(config) {
                    evaluate_stage(ws, config, spec)?;
                }
            }
            Stage::Report => report_stage(ws, config)?,
            Stage::Repeat => repeat_stage(ws, config)?,
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_partition_ids() {
        let ids: Vec<String> = (0..100).map(|i| format!("q{i:03}")).collect();
        let s = make_splits(&ids, 0.1, 0.2, 1, 2);
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (70, 10, 20));
        let mut all: Vec<String> = [s.train.clone(), s.validation.clone(), s.test.clone()].concat();
        all.sort();
        assert_eq!(all, ids);

        let other = make_splits(&ids, 0.1, 0.2, 1, 3);
        assert_eq!(other.test, s.test);
        assert_ne!(other.validation, s.validation);
    }

    #[test]
    fn mean_and_sample_std() {
        let m = MeanStd::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.mean, 2.5);
        assert!((m.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(MeanStd::of(&[0.7]).std, 0.0);
    }

    #[test]
    fn short_decimals() {
        assert_eq!(short_decimal(0.1364), ".136");
        assert_eq!(short_decimal(0.0), ".000");
        assert_eq!(short_decimal(1.0), "1.000");
    }

    #[test]
    fn parallel_map_keeps_order() {
        let items: Vec<u32> = (0..37).collect();
        for jobs in [1, 2, 5, 64] {
            assert_eq!(parallel_map(&items, jobs, |x| x * 2), items.iter().map(|x| x * 2).collect::<Vec<_>>());
        }
    }

    #[test]
    fn graph_records_round_trip() {
        let w = Matrix::from_rows(&[vec![1.0, 0.25, 0.0], vec![0.25, 1.0, 0.5], vec![0.0, 0.5, 1.0]]).unwrap();
        let g = ConsistencyGraph::from_parts(w, vec![0, 0, 1], 3, 1).unwrap();
        let record = GraphRecord::new("q", &g);
        let text = serde_json::to_string(&record).unwrap();
        let back: GraphRecord = serde_json::from_str(&text).unwrap();
        assert_eq!(back.to_graph().unwrap(), g);
    }
}
