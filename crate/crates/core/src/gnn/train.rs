use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::QuestionRecord;
use crate::error::{Error, Result};
use crate::graph::ConsistencyGraph;

use super::model::{GcnModel, DEFAULT_HIDDEN_DIMS};
use super::propagate::{backward_from_trace, forward_batch, loss_from_logits, GraphBatch};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub min_learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub split_seed: u64,
    pub val_fraction: f64,
    /// Seeds parameter initialization and mini-batch shuffling.
    pub seed: u64,
    pub hidden_dims: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-8,
            plateau_factor: 0.9,
            plateau_patience: 10,
            min_learning_rate: 1e-7,
            batch_size: 32,
            max_epochs: 500,
            early_stop_patience: 50,
            split_seed: 0,
            val_fraction: 0.1,
            seed: 0,
            hidden_dims: DEFAULT_HIDDEN_DIMS.to_vec(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train config: {m}")));
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad("plateau_factor must lie in (0, 1)");
        }
        if !(0.0..self.learning_rate).contains(&self.min_learning_rate) {
            return bad("need 0 <= min_learning_rate < learning_rate");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch_size and max_epochs must be positive");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 1)");
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return bad("hidden_dims must be non-empty and positive");
        }
        Ok(())
    }
}

/// Reduce-on-plateau learning-rate schedule.
#[derive(Debug, Clone)]
pub struct PlateauSchedule {
    lr: f64,
    factor: f64,
    patience: usize,
    min_lr: f64,
    best: f64,
    bad_epochs: usize,
    pub reductions: usize,
}

impl PlateauSchedule {
    pub fn new(config: &TrainConfig) -> Self {
        PlateauSchedule {
            lr: config.learning_rate,
            factor: config.plateau_factor,
            patience: config.plateau_patience,
            min_lr: config.min_learning_rate,
            best: f64::INFINITY,
            bad_epochs: 0,
            reductions: 0,
        }
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    /// Records one epoch's validation loss; returns the rate for the next epoch.
    pub fn observe(&mut self, val_loss: f64) -> f64 {
        if val_loss < self.best {
            self.best = val_loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                self.lr = (self.lr * self.factor).max(self.min_lr);
                self.bad_epochs = 0;
                self.reductions += 1;
            }
        }
        self.lr
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: i32,
    first: GcnModel,
    second: GcnModel,
}

impl Adam {
    pub fn new(model: &GcnModel, config: &TrainConfig) -> Self {
        Adam {
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
            step: 0,
            first: model.zeros_like(),
            second: model.zeros_like(),
        }
    }

    pub fn update(&mut self, model: &mut GcnModel, grads: &GcnModel, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        let params = model.tensors_mut();
        let firsts = self.first.tensors_mut();
        let seconds = self.second.tensors_mut();
        for (((p, g), m), v) in params.into_iter().zip(grads.tensors()).zip(firsts).zip(seconds) {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// A consistency graph with one 0/1 label per node.
#[derive(Debug, Clone)]
pub struct LabeledGraph {
    pub id: String,
    pub graph: ConsistencyGraph,
    pub labels: Vec<f64>,
}

impl LabeledGraph {
    pub fn from_record(record: &QuestionRecord, graph: ConsistencyGraph) -> Result<Self> {
        let labels = record
            .responses
            .iter()
            .enumerate()
            .map(|(i, r)| {
                r.label.map(f64::from).ok_or_else(|| {
                    Error::Data(format!("question {}: response {i} is unlabeled", record.id))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if labels.len() != graph.n {
            return Err(Error::Data(format!(
                "question {}: {} labels for a graph of {} nodes",
                record.id,
                labels.len(),
                graph.n
            )));
        }
        Ok(LabeledGraph {
            id: record.id.clone(),
            graph,
            labels,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-question loss over the epoch's mini-batches.
    pub train_loss: f64,
    /// Mean per-question loss on the validation split.
    pub val_loss: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,learning_rate\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{},{},{}", e.epoch, e.train_loss, e.val_loss, e.learning_rate);
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Splits indices `0..len` into (train, val) by `split_seed`.
pub fn split_indices(len: usize, val_fraction: f64, split_seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(split_seed));
    let mut val_len = (len as f64 * val_fraction).round() as usize;
    if val_fraction > 0.0 && len >= 2 {
        val_len = val_len.clamp(1, len - 1);
    }
    let val = idx.split_off(len - val_len);
    (idx, val)
}

/// Mean per-question loss of `model` over `data`, evaluated in batches.
pub fn mean_loss(model: &GcnModel, data: &[&LabeledGraph], batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for chunk in data.chunks(batch_size.max(1)) {
        let batch = GraphBatch::new(chunk.iter().map(|d| &d.graph))?;
        let labels: Vec<f64> = chunk.iter().flat_map(|d| d.labels.iter().copied()).collect();
        let trace = forward_batch(model, &batch)?;
        total += loss_from_logits(&trace.logits, &labels).0;
    }
    Ok(total / data.len() as f64)
}

/// Trains on `data`, holding out `val_fraction` of it (by `split_seed`) for
/// validation.
pub fn train(data: &[LabeledGraph], config: &TrainConfig) -> Result<(GcnModel, TrainingLog)> {
    let (train_idx, val_idx) = split_indices(data.len(), config.val_fraction, config.split_seed);
    let train_set: Vec<&LabeledGraph> = train_idx.iter().map(|&i| &data[i]).collect();
    let val_set: Vec<&LabeledGraph> = val_idx.iter().map(|&i| &data[i]).collect();
    train_with_validation(&train_set, &val_set, config)
}

/// Trains with an explicit validation set and returns the parameters with
/// the lowest validation loss.
pub fn train_with_validation(
    train_set: &[&LabeledGraph],
    val_set: &[&LabeledGraph],
    config: &TrainConfig,
) -> Result<(GcnModel, TrainingLog)> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Data("training needs non-empty train and validation splits".into()));
    }
    let input_dim = train_set[0].graph.k_max();
    let mut model = GcnModel::new(input_dim, &config.hidden_dims, config.seed)?;
    let mut adam = Adam::new(&model, config);
    let mut schedule = PlateauSchedule::new(config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7261_696e);

    let mut best = (model.clone(), f64::INFINITY, 0usize);
    let mut since_best = 0;
    let mut log = TrainingLog {
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_loss: f64::INFINITY,
        stopped_early: false,
    };
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=config.max_epochs {
        let lr = schedule.learning_rate();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let graphs: Vec<&LabeledGraph> = chunk.iter().map(|&i| train_set[i]).collect();
            let batch = GraphBatch::new(graphs.iter().map(|d| &d.graph))?;
            let labels: Vec<f64> = graphs.iter().flat_map(|d| d.labels.iter().copied()).collect();
            let trace = forward_batch(&model, &batch)?;
            let (value, mut dlogits) = loss_from_logits(&trace.logits, &labels);
            // optimize the mean per-question loss of the batch
            let scale = 1.0 / graphs.len() as f64;
            dlogits.iter_mut().for_each(|g| *g *= scale);
            let grads = backward_from_trace(&model, &batch, &trace, &dlogits);
            adam.update(&mut model, &grads, lr);
            epoch_loss += value;
        }
        let train_loss = epoch_loss / train_set.len() as f64;
        let val_loss = mean_loss(&model, val_set, config.batch_size)?;
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(Error::Numeric(format!("loss diverged at epoch {epoch}")));
        }
        log.epochs.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            learning_rate: lr,
        });
        if val_loss < best.1 {
            best = (model.clone(), val_loss, epoch);
            since_best = 0;
        } else {
            since_best += 1;
        }
        schedule.observe(val_loss);
        if since_best >= config.early_stop_patience {
            log.stopped_early = true;
            break;
        }
    }
    log.best_epoch = best.2;
    log.best_val_loss = best.1;
    Ok((best.0, log))
}

/// Per-response probabilities of one question plus the evaluated primary one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionScores {
    pub probabilities: Vec<f64>,
    pub primary_index: usize,
    pub primary_probability: f64,
}

/// Predicted correctness probabilities keyed by question id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CalibrationScores {
    pub questions: BTreeMap<String, QuestionScores>,
}

impl CalibrationScores {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Data(format!("cannot serialize scores: {e}")))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }
}

/// Runs the model over every graph. `graphs` pairs each question id with its graph.
pub fn calibrate<'a>(
    model: &GcnModel,
    graphs: impl IntoIterator<Item = (&'a str, &'a ConsistencyGraph)>,
    batch_size: usize,
) -> Result<CalibrationScores> {
    model.check()?;
    let items: Vec<(&str, &ConsistencyGraph)> = graphs.into_iter().collect();
    let mut scores = CalibrationScores::default();
    for chunk in items.chunks(batch_size.max(1)) {
        let batch = GraphBatch::new(chunk.iter().map(|(_, g)| *g))?;
        let probs = forward_batch(model, &batch)?.probabilities();
        for ((id, g), range) in chunk.iter().zip(batch.ranges()) {
            let probabilities = probs[range].to_vec();
            let primary_probability = probabilities[g.primary];
            let previous = scores.questions.insert(
                id.to_string(),
                QuestionScores {
                    probabilities,
                    primary_index: g.primary,
                    primary_probability,
                },
            );
            if previous.is_some() {
                return Err(Error::Data(format!("duplicate question id {id}")));
            }
        }
    }
    Ok(scores)
}
