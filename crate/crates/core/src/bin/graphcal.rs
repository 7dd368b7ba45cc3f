use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use graphcal::baselines::{ConfidenceMethod, PosthocMethod};
use graphcal::config::{MethodSpec, Overrides, PipelineConfig, Stage};
use graphcal::error::Error;
use graphcal::graph::EdgeWeightMode;
use graphcal::ingest::EmbeddingMode;
use graphcal::labeling::LabelMethod;
use graphcal::pipeline::{self, StageFailure, Workspace};
use graphcal::synth::{Distortion, SynthConfig};

#[derive(Parser, Debug)]
#[command(name = "graphcal", version, about = "Calibrated confidence for sampled LLM answers")]
struct Cli {
    /// TOML config; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory holding every stage's artifacts.
    #[arg(long, global = true, default_value = "graphcal-out")]
    workdir: PathBuf,
    /// Worker threads for per-question work.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Replaces every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct EvalFlags {
    #[arg(long, value_parser = parse_with::<ConfidenceMethod>)]
    method: Option<ConfidenceMethod>,
    #[arg(long, value_parser = parse_with::<PosthocMethod>)]
    posthoc: Option<PosthocMethod>,
    /// Score every response rather than only the primary one.
    #[arg(long)]
    per_response: bool,
    #[arg(long)]
    bins: Option<usize>,
}

#[derive(Args, Debug, Default)]
struct TrainFlags {
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Comma-separated hidden widths, e.g. `256,512,1024`.
    #[arg(long, value_delimiter = ',')]
    hidden_dims: Option<Vec<usize>>,
    #[arg(long)]
    split_seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with a truths sidecar.
    Synth {
        #[arg(long)]
        questions: usize,
        #[arg(long, default_value_t = 30)]
        n: usize,
        #[arg(long, default_value = "identity", value_parser = parse_with::<Distortion>)]
        distortion: Distortion,
        #[arg(long, default_value_t = 16)]
        dimension: usize,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to `<out stem>.truths.jsonl` next to `--out`.
        #[arg(long)]
        truths: Option<PathBuf>,
    },
    /// Validate the input dataset and fill in embeddings.
    Ingest {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, value_parser = ["precomputed", "service", "hash"])]
        embedding_mode: Option<String>,
        #[arg(long)]
        embedding_endpoint: Option<String>,
        #[arg(long)]
        dimension: Option<usize>,
    },
    /// Attach correctness labels.
    Label {
        #[arg(long, value_parser = ["rouge", "llm_judge", "manual"])]
        label_method: Option<String>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        judge_endpoint: Option<String>,
        #[arg(long)]
        labels_csv: Option<PathBuf>,
    },
    /// Build consistency graphs and the train/validation/test split.
    Graph {
        #[arg(long, value_parser = parse_with::<EdgeWeightMode>)]
        edge_weights: Option<EdgeWeightMode>,
        #[arg(long)]
        k_max: Option<usize>,
    },
    /// Train the graph calibrator.
    Train {
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Score every question with the trained calibrator.
    Calibrate,
    /// Score every question with a training-free method.
    Baseline {
        #[arg(long, value_parser = parse_with::<ConfidenceMethod>)]
        method: ConfidenceMethod,
    },
    /// Compute test-split metrics for one method.
    Evaluate {
        #[command(flatten)]
        eval: EvalFlags,
    },
    /// Assemble report.json and reliability.csv.
    Report {
        #[command(flatten)]
        eval: EvalFlags,
    },
    /// Repeat training and evaluation over several splits.
    Repeat {
        #[arg(long)]
        repeats: Option<usize>,
        /// Methods to tabulate, e.g. `gnn,degree+isotonic`.
        #[arg(long, value_delimiter = ',', value_parser = parse_with::<MethodSpec>)]
        methods: Option<Vec<MethodSpec>>,
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long)]
        per_response: bool,
    },
    /// Run the stages listed in the config, in order.
    Run {
        #[arg(long)]
        input: Option<PathBuf>,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        eval: EvalFlags,
    },
}

fn parse_with<T: std::str::FromStr<Err = Error>>(s: &str) -> Result<T, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn embedding_mode(s: &str) -> EmbeddingMode {
    match s {
        "service" => EmbeddingMode::Service,
        "hash" => EmbeddingMode::Hash,
        _ => EmbeddingMode::Precomputed,
    }
}

fn label_method(s: &str) -> LabelMethod {
    match s {
        "llm_judge" => LabelMethod::LlmJudge,
        "manual" => LabelMethod::Manual,
        _ => LabelMethod::Rouge,
    }
}

impl TrainFlags {
    fn apply(&self, o: &mut Overrides) {
        o.max_epochs = self.max_epochs;
        o.hidden_dims = self.hidden_dims.clone();
        o.split_seed = self.split_seed;
    }
}

impl EvalFlags {
    fn apply(&self, o: &mut Overrides) {
        o.method = self.method;
        o.posthoc = self.posthoc;
        o.per_response = self.per_response;
        o.bins = self.bins;
    }
}

fn truths_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
    out.with_file_name(format!("{stem}.truths.jsonl"))
}

fn file_name(path: &Path) -> Result<String, Error> {
    path.file_name()
        .and_then(|s| s.to_str())
        .map(str::to_string)
        .ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))
}

fn execute(cli: Cli) -> Result<(), StageFailure> {
    let config_stage = match &cli.command {
        Command::Synth { .. } => Stage::Synth,
        Command::Ingest { .. } => Stage::Ingest,
        Command::Label { .. } => Stage::Label,
        Command::Graph { .. } => Stage::Graph,
        Command::Train { .. } => Stage::Train,
        Command::Calibrate => Stage::Calibrate,
        Command::Baseline { .. } => Stage::Baseline,
        Command::Evaluate { .. } => Stage::Evaluate,
        Command::Report { .. } => Stage::Report,
        Command::Repeat { .. } => Stage::Repeat,
        Command::Run { .. } => Stage::Ingest,
    };
    let fail = |error| StageFailure {
        stage: config_stage,
        error,
    };

    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path).map_err(fail)?,
        None => PipelineConfig::default(),
    };
    let mut o = Overrides {
        seed: cli.seed,
        jobs: cli.jobs,
        ..Default::default()
    };
    match &cli.command {
        Command::Ingest {
            input,
            embedding_mode: mode,
            embedding_endpoint,
            dimension,
        } => {
            o.input = input.clone();
            o.embedding_mode = mode.as_deref().map(embedding_mode);
            o.embedding_endpoint = embedding_endpoint.clone();
            o.dimension = *dimension;
        }
        Command::Label {
            label_method: method,
            tau,
            judge_endpoint,
            labels_csv,
        } => {
            o.label_method = method.as_deref().map(label_method);
            o.tau = *tau;
            o.judge_endpoint = judge_endpoint.clone();
            o.labels_csv = labels_csv.clone();
        }
        Command::Graph { edge_weights, k_max } => {
            o.edge_weights = *edge_weights;
            o.k_max = *k_max;
        }
        Command::Train { train } => train.apply(&mut o),
        Command::Evaluate { eval } | Command::Report { eval } => eval.apply(&mut o),
        Command::Repeat {
            repeats,
            methods,
            train,
            per_response,
        } => {
            o.repeats = *repeats;
            o.per_response = *per_response;
            train.apply(&mut o);
            if let Some(m) = methods {
                config.repeat.methods = m.clone();
            }
        }
        Command::Run { input, train, eval } => {
            o.input = input.clone();
            train.apply(&mut o);
            eval.apply(&mut o);
        }
        Command::Synth { .. } | Command::Calibrate | Command::Baseline { .. } => {}
    }
    config.apply(&o);
    config.validate().map_err(fail)?;

    if let Command::Synth {
        questions,
        n,
        distortion,
        dimension,
        noise,
        out,
        truths,
    } = &cli.command
    {
        let synth = SynthConfig {
            num_questions: *questions,
            n_per_question: *n,
            distortion: *distortion,
            seed: cli.seed.unwrap_or(0),
            dimension: *dimension,
            noise_sigma: *noise,
        };
        let truths = truths.clone().unwrap_or_else(|| truths_path(out));
        let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        if truths.parent() != out.parent() {
            return Err(fail(Error::Config("--truths must sit next to --out".into())));
        }
        let ws = Workspace::new(dir).map_err(fail)?;
        config.synth = Some(synth.clone());
        let (d, t) = (file_name(out).map_err(fail)?, file_name(&truths).map_err(fail)?);
        return pipeline::write_synthetic(&ws, &config, &synth, &d, &t);
    }

    let ws = Workspace::new(&cli.workdir).map_err(fail)?;
    match cli.command {
        Command::Synth { .. } => unreachable!("handled above"),
        Command::Ingest { .. } => pipeline::ingest_stage(&ws, &config),
        Command::Label { .. } => pipeline::label_stage(&ws, &config),
        Command::Graph { .. } => pipeline::graph_stage(&ws, &config),
        Command::Train { .. } => pipeline::train_stage(&ws, &config),
        Command::Calibrate => pipeline::calibrate_stage(&ws, &config),
        Command::Baseline { method } => pipeline::baseline_stage(&ws, &config, method),
        Command::Evaluate { .. } => pipeline::evaluate_stage(&ws, &config, config.evaluate.spec()),
        Command::Report { .. } => pipeline::report_stage(&ws, &config),
        Command::Repeat { .. } => pipeline::repeat_stage(&ws, &config),
        Command::Run { .. } => pipeline::run_pipeline(&ws, &config),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("graphcal: {failure}");
            ExitCode::from(failure.error.exit_code() as u8)
        }
    }
}
