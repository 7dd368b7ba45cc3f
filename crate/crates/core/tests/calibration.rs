//! Post-hoc calibrators, the synthetic generator's statistics, and training
//! sanity checks.

mod common;

use graphcal::baselines::{IsotonicCalibrator, PlattScaler};
use graphcal::gnn::{calibrate, forward, train, GcnModel, LabeledGraph, TrainConfig};
use graphcal::graph::{build_graph, kmeans, GraphOptions};
use graphcal::metrics::auroc;
use graphcal::synth::{generate, oracle_ece_of_baseline, Distortion, OracleBaseline, SynthConfig};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[test]
fn platt_recovers_known_parameters() {
    // Each score group carries exactly the positive fraction sigma(a s + b),
    // so (a, b) is the exact maximum-likelihood fit.
    let (a, b) = (2.5, -0.7);
    let m = 101;
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for k in 1..=100 {
        let s = (logit(k as f64 / m as f64) - b) / a;
        for i in 0..m {
            scores.push(s);
            labels.push(i < k);
        }
    }
    assert_eq!(scores.len(), 10_100);
    let fit = PlattScaler::fit(&scores, &labels).unwrap();
    assert!((fit.a - a).abs() < 1e-4, "a = {}", fit.a);
    assert!((fit.b - b).abs() < 1e-4, "b = {}", fit.b);
    assert!((fit.apply(0.0) - sigmoid(b)).abs() < 1e-4);

    // sampled labels land near, but not within 1e-4 of, the truth
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let scores: Vec<f64> = (0..10_000).map(|_| rng.random_range(-2.0..2.0)).collect();
    let labels: Vec<bool> = scores.iter().map(|s| rng.random::<f64>() < sigmoid(a * s + b)).collect();
    let fit = PlattScaler::fit(&scores, &labels).unwrap();
    assert!((fit.a - a).abs() < 0.2 && (fit.b - b).abs() < 0.1, "{fit:?}");
}

#[test]
fn platt_is_increasing_and_keeps_ranking() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let scores: Vec<f64> = (0..2000).map(|_| rng.random::<f64>()).collect();
    let labels: Vec<bool> = scores.iter().map(|s| rng.random::<f64>() < s * s).collect();
    let fit = PlattScaler::fit(&scores, &labels).unwrap();
    assert!(fit.a > 0.0);
    let before: Vec<(f64, bool)> = scores.iter().copied().zip(labels.iter().copied()).collect();
    let after: Vec<(f64, bool)> = before.iter().map(|&(s, y)| (fit.apply(s), y)).collect();
    assert!((auroc(&before).unwrap() - auroc(&after).unwrap()).abs() < 1e-12);
}

#[test]
fn isotonic_on_calibrated_scores_is_near_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let scores: Vec<f64> = (0..20_000).map(|_| rng.random::<f64>()).collect();
    let labels: Vec<bool> = scores.iter().map(|&s| rng.random::<f64>() < s).collect();
    let iso = IsotonicCalibrator::fit(&scores, &labels).unwrap();
    let grid: Vec<f64> = (1..100).map(|i| i as f64 / 100.0).collect();
    let mean_gap = grid.iter().map(|&s| (iso.apply(s) - s).abs()).sum::<f64>() / grid.len() as f64;
    let worst = grid[9..90].iter().map(|&s| (iso.apply(s) - s).abs()).fold(0.0, f64::max);
    assert!(mean_gap < 0.02, "mean gap {mean_gap}");
    assert!(worst < 0.06, "worst gap on [0.1, 0.9] {worst}");
}

#[test]
fn dominant_labels_follow_the_share_by_decile() {
    let data = generate(&SynthConfig {
        num_questions: 5000,
        distortion: Distortion::Identity,
        seed: 21,
        ..Default::default()
    })
    .unwrap();
    let mut sums = [(0.0, 0.0, 0usize, 0usize); 10];
    for (record, truth) in data.records.iter().zip(&data.truths) {
        let x = truth.dominant_share;
        let d = (((x - 0.2) / 0.8) * 10.0).floor().clamp(0.0, 9.0) as usize;
        sums[d].0 += x;
        sums[d].2 += 1;
        for (r, &c) in record.responses.iter().zip(&truth.planted) {
            if c == 0 {
                sums[d].1 += f64::from(r.label.unwrap());
                sums[d].3 += 1;
            }
        }
    }
    for (d, (x_sum, pos, questions, responses)) in sums.iter().enumerate() {
        let mean_x = x_sum / *questions as f64;
        let freq = pos / *responses as f64;
        assert!((freq - mean_x).abs() <= 0.02, "decile {d}: frequency {freq} vs mean share {mean_x}");
    }
}

fn oracle(distortion: Distortion, baseline: OracleBaseline) -> f64 {
    let data = generate(&SynthConfig {
        num_questions: 5000,
        distortion,
        seed: 22,
        ..Default::default()
    })
    .unwrap();
    oracle_ece_of_baseline(&data, &baseline).unwrap().ece
}

#[test]
fn cluster_frequency_is_calibrated_only_without_distortion() {
    let identity = oracle(Distortion::Identity, OracleBaseline::ClusterFrequency(GraphOptions::default()));
    assert!(identity <= 0.03, "identity ECE {identity}");
    let square = oracle(Distortion::Square, OracleBaseline::ClusterFrequency(GraphOptions::default()));
    assert!(square >= 0.10, "square ECE {square}");
    let truth = oracle(Distortion::Square, OracleBaseline::Truth);
    assert!(truth <= 0.02, "truth ECE {truth}");
}

#[test]
fn kmeans_recovers_the_dominant_cluster() {
    let data = generate(&SynthConfig {
        num_questions: 1000,
        seed: 23,
        ..Default::default()
    })
    .unwrap();
    let mut hits = 0;
    for (i, (record, truth)) in data.records.iter().zip(&data.truths).enumerate() {
        let points: Vec<Vec<f64>> = record.responses.iter().map(|r| r.embedding.clone().unwrap()).collect();
        let found = kmeans(&points, 3, i as u64).unwrap();
        // the cluster holding the first planted-correct response
        let c = found.assignments[0];
        let hit = found.sizes[c] == truth.dominant_size
            && truth.planted.iter().zip(&found.assignments).all(|(&p, &a)| (p == 0) == (a == c));
        hits += usize::from(hit);
    }
    let rate = hits as f64 / data.records.len() as f64;
    assert!(rate >= 0.99, "dominant cluster recovered for {rate}");
}

fn labeled_synthetic(questions: usize, seed: u64) -> Vec<LabeledGraph> {
    let data = generate(&SynthConfig {
        num_questions: questions,
        distortion: Distortion::Square,
        seed,
        ..Default::default()
    })
    .unwrap();
    data.records
        .iter()
        .map(|r| LabeledGraph::from_record(r, build_graph(r, &GraphOptions::default()).unwrap()).unwrap())
        .collect()
}

fn small_config(max_epochs: usize) -> TrainConfig {
    TrainConfig {
        hidden_dims: vec![16, 16],
        learning_rate: 1e-3,
        max_epochs,
        ..Default::default()
    }
}

#[test]
fn training_loss_decreases_over_first_epochs() {
    let data = labeled_synthetic(200, 31);
    let (_, log) = train(&data, &small_config(10)).unwrap();
    assert_eq!(log.epochs.len(), 10);
    let first = log.epochs[0].train_loss;
    let last = log.epochs[9].train_loss;
    assert!(last < first, "train loss {first} -> {last}");
}

fn entropy(p: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 {
        0.0
    } else {
        -(p * p.ln() + (1.0 - p) * (1.0 - p).ln())
    }
}

#[test]
fn training_beats_constant_predictor() {
    // labels are a deterministic function of cluster share
    let mut data = labeled_synthetic(200, 32);
    for g in &mut data {
        let n = g.graph.n as f64;
        let mut counts = vec![0usize; g.graph.k_max()];
        for &c in &g.graph.assignments {
            counts[c] += 1;
        }
        g.labels = g
            .graph
            .assignments
            .iter()
            .map(|&c| f64::from(u8::from(counts[c] as f64 / n >= 0.5)))
            .collect();
    }
    let config = small_config(60);
    let (model, log) = train(&data, &config).unwrap();
    // same split as train()
    let (_, val) = graphcal::gnn::split_indices(data.len(), config.val_fraction, config.split_seed);
    let labels: Vec<f64> = val.iter().flat_map(|&i| data[i].labels.clone()).collect();
    let mean = labels.iter().sum::<f64>() / labels.len() as f64;
    let n = data[0].graph.n as f64;
    let baseline = n * entropy(mean);
    assert!(log.best_val_loss < baseline, "val loss {} vs baseline {baseline}", log.best_val_loss);
    let refs: Vec<&LabeledGraph> = val.iter().map(|&i| &data[i]).collect();
    let again = graphcal::gnn::mean_loss(&model, &refs, 32).unwrap();
    assert!((again - log.best_val_loss).abs() < 1e-9);
}

#[test]
fn calibrate_reproduces_forward_and_zero_model_gives_half() {
    let data = labeled_synthetic(20, 33);
    let model = GcnModel::new(3, &[8, 8], 1).unwrap();
    let scores = calibrate(&model, data.iter().map(|g| (g.id.as_str(), &g.graph)), 7).unwrap();
    for g in &data {
        let q = &scores.questions[&g.id];
        for (a, b) in q.probabilities.iter().zip(forward(&model, &g.graph).unwrap()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(q.primary_probability, q.probabilities[g.graph.primary]);
    }
    let zero = model.zeros_like();
    let scores = calibrate(&zero, data.iter().map(|g| (g.id.as_str(), &g.graph)), 7).unwrap();
    assert!(scores.questions.values().all(|q| q.probabilities.iter().all(|&p| p == 0.5)));
}
