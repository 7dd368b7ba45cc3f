//! The `graphcal` binary: exit codes, manifest bookkeeping, and stage-by-stage
//! runs agreeing with a single `run`.

use std::path::Path;
use std::process::{Command, Output};

use graphcal::pipeline::{ArtifactStatus, Manifest, Workspace, MODEL, REPORT};
use serde_json::Value;

fn graphcal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_graphcal")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = graphcal(args);
    assert!(
        out.status.success(),
        "graphcal {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

const CONFIG: &str = r#"
[train]
hidden_dims = [8, 8]
max_epochs = 6

[evaluate]
compare = ["degree+isotonic"]

[run]
stages = ["ingest", "label", "graph", "train", "calibrate", "baseline", "evaluate", "report"]
"#;

/// Writes a small synthetic dataset and a config reading it; returns the config path.
fn setup(root: &Path) -> String {
    let data = root.join("data/synth.jsonl");
    std::fs::create_dir_all(data.parent().unwrap()).unwrap();
    ok(&["--seed", "3", "synth", "--questions", "60", "--distortion", "square", "--out", data.to_str().unwrap()]);
    assert!(root.join("data/synth.truths.jsonl").exists());
    let config = root.join("config.toml");
    let text = format!("[data]\ninput = {:?}\n{CONFIG}", data.to_str().unwrap());
    std::fs::write(&config, text).unwrap();
    config.to_str().unwrap().to_string()
}

#[test]
fn stage_by_stage_equals_run() {
    let root = tempfile::tempdir().unwrap();
    let config = setup(root.path());
    let whole = root.path().join("whole");
    let steps = root.path().join("steps");
    ok(&["--config", &config, "--workdir", whole.to_str().unwrap(), "run"]);

    let w = steps.to_str().unwrap();
    for args in [
        vec!["ingest"],
        vec!["label"],
        vec!["graph"],
        vec!["train"],
        vec!["calibrate"],
        vec!["baseline", "--method", "degree"],
        vec!["evaluate"],
        vec!["evaluate", "--method", "degree", "--posthoc", "isotonic"],
        vec!["report"],
    ] {
        let mut full = vec!["--config", config.as_str(), "--workdir", w];
        full.extend(args);
        ok(&full);
    }
    for name in [REPORT, MODEL, "scores_gnn.json", "scores_degree.json", "splits.json", "graphs.jsonl"] {
        let a = std::fs::read(whole.join(name)).unwrap();
        let b = std::fs::read(steps.join(name)).unwrap();
        assert!(a == b, "{name} differs between run and stage-by-stage");
    }
    let report: Value = serde_json::from_slice(&std::fs::read(whole.join(REPORT)).unwrap()).unwrap();
    assert_eq!(report["method"], "gnn");
    assert_eq!(report["comparisons"][1]["method"], "degree+isotonic");
    assert_eq!(report["not_computed"].as_array().unwrap().len(), 3);
}

#[test]
fn manifest_records_complete_artifacts() {
    let root = tempfile::tempdir().unwrap();
    let config = setup(root.path());
    let work = root.path().join("work");
    ok(&["--config", &config, "--workdir", work.to_str().unwrap(), "run"]);
    let manifest = Manifest::load(&Workspace::new(&work).unwrap()).unwrap();
    assert_eq!(manifest.tool_version, env!("CARGO_PKG_VERSION"));
    assert_eq!(manifest.configs.len(), 1);
    let hash = manifest.configs.keys().next().unwrap();
    for name in ["embedded.jsonl", "labeled.jsonl", MODEL, "training_log.csv", REPORT, "reliability.csv"] {
        let entry = &manifest.artifacts[name];
        assert_eq!(entry.status, ArtifactStatus::Complete, "{name}");
        assert_eq!(&entry.config_hash, hash);
        let digest = graphcal::pipeline::sha256_file(work.join(name)).unwrap();
        assert_eq!(entry.sha256.as_deref(), Some(digest.as_str()), "{name}");
    }
    assert!(manifest.artifacts["embedded.jsonl"].inputs.values().all(|h| h.len() == 64));
}

#[test]
fn flags_override_config() {
    let root = tempfile::tempdir().unwrap();
    let config = setup(root.path());
    let work = root.path().join("work");
    let w = work.to_str().unwrap();
    ok(&["--config", &config, "--workdir", w, "--seed", "9", "run", "--max-epochs", "2", "--bins", "5"]);
    let manifest = Manifest::load(&Workspace::new(&work).unwrap()).unwrap();
    let resolved = manifest.configs.values().next().unwrap();
    assert_eq!(resolved.train.max_epochs, 2);
    assert_eq!(resolved.train.hidden_dims, vec![8, 8]);
    assert_eq!(resolved.evaluate.bins, 5);
    assert_eq!((resolved.train.seed, resolved.graph.seed, resolved.evaluate.test_seed), (9, 9, 9));
    let log = std::fs::read_to_string(work.join("training_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    let report: Value = serde_json::from_slice(&std::fs::read(work.join(REPORT)).unwrap()).unwrap();
    assert_eq!(report["bins"].as_array().unwrap().len(), 5);
}

#[test]
fn configuration_errors_exit_2() {
    let root = tempfile::tempdir().unwrap();
    let w = root.path().to_str().unwrap();
    let missing = graphcal(&["--config", "/nonexistent/config.toml", "--workdir", w, "run"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("graphcal:"));

    let bad = root.path().join("bad.toml");
    std::fs::write(&bad, "[graph]\nk_max = 0\n").unwrap();
    let out = graphcal(&["--config", bad.to_str().unwrap(), "--workdir", w, "run"]);
    assert_eq!(out.status.code(), Some(2));

    let unknown = root.path().join("unknown.toml");
    std::fs::write(&unknown, "[graph]\nkmax = 3\n").unwrap();
    let out = graphcal(&["--config", unknown.to_str().unwrap(), "--workdir", w, "run"]);
    assert_eq!(out.status.code(), Some(2));

    // no input at all
    let out = graphcal(&["--workdir", w, "ingest"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn data_errors_exit_3() {
    let root = tempfile::tempdir().unwrap();
    let w = root.path().join("work");
    let w = w.to_str().unwrap();
    let out = graphcal(&["--workdir", w, "evaluate"]);
    assert_eq!(out.status.code(), Some(3));

    let broken = root.path().join("broken.jsonl");
    std::fs::write(&broken, "{\"id\": \"q1\", \"responses\": 7}\n").unwrap();
    let out = graphcal(&["--workdir", w, "ingest", "--input", broken.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ingest"));
}
