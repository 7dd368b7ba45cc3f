//! Declarative run configuration: one TOML file with a section per stage.
//! Command-line flags are applied on top through [`Overrides`].

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{ConfidenceMethod, PosthocMethod};
use crate::error::{Error, Result};
use crate::gnn::TrainConfig;
use crate::graph::{EdgeWeightMode, GraphOptions};
use crate::ingest::{EmbeddingMode, EmbeddingProviderConfig};
use crate::labeling::{LabelMethod, LabelerConfig};
use crate::metrics::DEFAULT_BINS;
use crate::synth::SynthConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Synth,
    Ingest,
    Label,
    Graph,
    Train,
    Calibrate,
    Baseline,
    Evaluate,
    Report,
    Repeat,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Ingest => "ingest",
            Stage::Label => "label",
            Stage::Graph => "graph",
            Stage::Train => "train",
            Stage::Calibrate => "calibrate",
            Stage::Baseline => "baseline",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
            Stage::Repeat => "repeat",
        }
    }

    /// Bumped whenever a stage's output for a fixed config changes.
    pub fn version(self) -> u32 {
        1
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Input dataset (JSONL). Ignored when a `[synth]` section is present.
    pub input: Option<PathBuf>,
    /// `question_id,response_index,label` file for manual labeling.
    pub labels_csv: Option<PathBuf>,
}

/// A confidence method with an optional post-hoc calibrator, written
/// `method` or `method+posthoc` (for example `degree+isotonic`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MethodSpec {
    pub method: ConfidenceMethod,
    pub posthoc: PosthocMethod,
}

impl MethodSpec {
    pub fn new(method: ConfidenceMethod, posthoc: PosthocMethod) -> Self {
        MethodSpec { method, posthoc }
    }

    /// Stem used for artifact file names, e.g. `degree_isotonic`.
    pub fn file_stem(&self) -> String {
        format!("{}_{}", self.method, self.posthoc)
    }
}

impl std::fmt::Display for MethodSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.posthoc {
            PosthocMethod::None => write!(f, "{}", self.method),
            p => write!(f, "{}+{}", self.method, p),
        }
    }
}

impl FromStr for MethodSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (method, posthoc) = match s.split_once('+') {
            Some((m, p)) => (m.trim().parse()?, p.trim().parse()?),
            None => (s.trim().parse()?, PosthocMethod::None),
        };
        Ok(MethodSpec { method, posthoc })
    }
}

impl Serialize for MethodSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MethodSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub method: ConfidenceMethod,
    pub posthoc: PosthocMethod,
    pub bins: usize,
    /// Score every response instead of only the primary one.
    pub per_response: bool,
    pub test_fraction: f64,
    /// Fixes the test split; train/validation use `train.split_seed`.
    pub test_seed: u64,
    /// Extra methods evaluated by `run` and listed in the report.
    pub compare: Vec<MethodSpec>,
}

impl EvaluateConfig {
    pub fn spec(&self) -> MethodSpec {
        MethodSpec::new(self.method, self.posthoc)
    }
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            method: ConfidenceMethod::Gnn,
            posthoc: PosthocMethod::None,
            bins: DEFAULT_BINS,
            per_response: false,
            test_fraction: 0.1,
            test_seed: 0,
            compare: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RepeatConfig {
    pub repeats: usize,
    pub methods: Vec<MethodSpec>,
}

impl Default for RepeatConfig {
    fn default() -> Self {
        RepeatConfig {
            repeats: 10,
            methods: vec![MethodSpec::new(ConfidenceMethod::Gnn, PosthocMethod::None)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Stages executed by `graphcal run`, in order.
    pub stages: Vec<Stage>,
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            stages: vec![
                Stage::Synth,
                Stage::Ingest,
                Stage::Label,
                Stage::Graph,
                Stage::Train,
                Stage::Calibrate,
                Stage::Baseline,
                Stage::Evaluate,
                Stage::Report,
            ],
            jobs: 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub data: DataConfig,
    pub synth: Option<SynthConfig>,
    pub ingest: EmbeddingProviderConfig,
    pub label: LabelerConfig,
    pub graph: GraphOptions,
    pub train: TrainConfig,
    pub evaluate: EvaluateConfig,
    pub repeat: RepeatConfig,
    pub run: RunConfig,
}

/// Values given on the command line; each `Some` replaces the config value.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub input: Option<PathBuf>,
    pub labels_csv: Option<PathBuf>,
    /// Replaces every seed in the config.
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub embedding_mode: Option<EmbeddingMode>,
    pub embedding_endpoint: Option<String>,
    pub dimension: Option<usize>,
    pub label_method: Option<LabelMethod>,
    pub tau: Option<f64>,
    pub judge_endpoint: Option<String>,
    pub edge_weights: Option<EdgeWeightMode>,
    pub k_max: Option<usize>,
    pub max_epochs: Option<usize>,
    pub hidden_dims: Option<Vec<usize>>,
    pub split_seed: Option<u64>,
    pub method: Option<ConfidenceMethod>,
    pub posthoc: Option<PosthocMethod>,
    pub per_response: bool,
    pub bins: Option<usize>,
    pub repeats: Option<usize>,
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(p) = &o.input {
            self.data.input = Some(p.clone());
        }
        if let Some(p) = &o.labels_csv {
            self.data.labels_csv = Some(p.clone());
        }
        if let Some(seed) = o.seed {
            self.ingest.seed = seed;
            self.graph.seed = seed;
            self.train.seed = seed;
            self.train.split_seed = seed;
            self.evaluate.test_seed = seed;
            if let Some(s) = &mut self.synth {
                s.seed = seed;
            }
        }
        if let Some(j) = o.jobs {
            self.run.jobs = j;
        }
        if let Some(m) = o.embedding_mode {
            self.ingest.mode = m;
        }
        if let Some(u) = &o.embedding_endpoint {
            self.ingest.endpoint_url = Some(u.clone());
        }
        if let Some(d) = o.dimension {
            self.ingest.dimension = Some(d);
        }
        if let Some(m) = o.label_method {
            self.label.method = m;
        }
        if let Some(t) = o.tau {
            self.label.tau = t;
        }
        if let Some(u) = &o.judge_endpoint {
            self.label.judge_endpoint = Some(u.clone());
        }
        if let Some(e) = o.edge_weights {
            self.graph.edge_weights = e;
        }
        if let Some(k) = o.k_max {
            self.graph.k_max = k;
        }
        if let Some(e) = o.max_epochs {
            self.train.max_epochs = e;
        }
        if let Some(h) = &o.hidden_dims {
            self.train.hidden_dims = h.clone();
        }
        if let Some(s) = o.split_seed {
            self.train.split_seed = s;
        }
        if let Some(m) = o.method {
            self.evaluate.method = m;
        }
        if let Some(p) = o.posthoc {
            self.evaluate.posthoc = p;
        }
        if o.per_response {
            self.evaluate.per_response = true;
        }
        if let Some(b) = o.bins {
            self.evaluate.bins = b;
        }
        if let Some(r) = o.repeats {
            self.repeat.repeats = r;
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.ingest.validate()?;
        self.label.validate()?;
        self.train.validate()?;
        if self.graph.k_max == 0 {
            return Err(Error::Config("graph.k_max must be at least 1".into()));
        }
        if self.run.jobs == 0 {
            return Err(Error::Config("run.jobs must be at least 1".into()));
        }
        if self.evaluate.bins == 0 {
            return Err(Error::Config("evaluate.bins must be at least 1".into()));
        }
        let (v, t) = (self.train.val_fraction, self.evaluate.test_fraction);
        if !(0.0..1.0).contains(&t) || v + t >= 1.0 {
            return Err(Error::Config(format!(
                "val_fraction {v} and test_fraction {t} leave no training data"
            )));
        }
        if self.repeat.repeats == 0 {
            return Err(Error::Config("repeat.repeats must be at least 1".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form of the resolved config.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex(&Sha256::digest(json.as_bytes()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
