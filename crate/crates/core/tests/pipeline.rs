use std::fs;

use clusterguard::model::forward;
use clusterguard::orchestrator::{load_datasets, Experiment};
use clusterguard::{run_experiment, ExperimentConfig, ParamVector, RunOptions};

fn config() -> ExperimentConfig {
    ExperimentConfig::from_json_str(
        r#"{
            "dataset": {"source": "synthetic", "num_classes": 4, "input_dim": 6,
                        "samples_per_class": 30, "test_samples_per_class": 15, "seed": 3},
            "num_clients": 6,
            "rounds": 4,
            "attack": {"kind": "label-flip", "malicious_fraction": 0.34},
            "diagnostics": {"enabled": true},
            "checkpoint_every": 2,
            "master_seed": 11
        }"#,
    )
    .unwrap()
}

#[test]
fn test_artifacts_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let config = config();
    let options = RunOptions {
        threads: Some(2),
        out_dir: Some(dir.path().to_path_buf()),
    };
    let outcome = run_experiment(&config, &options).unwrap();
    assert_eq!(outcome.rounds.len(), 4);
    assert_eq!(outcome.malicious.len(), 2);

    let read = |name: &str| ParamVector::read_from(fs::File::open(dir.path().join(name)).unwrap()).unwrap();
    assert_eq!(read("final_model.bin"), outcome.final_params);
    assert_eq!(read("checkpoints/round_0004.bin"), outcome.final_params);
    assert_ne!(read("checkpoints/round_0002.bin"), outcome.final_params);
    assert!(!dir.path().join("checkpoints/round_0003.bin").exists());

    let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    // One row per client plus one summary row per round, plus the header.
    assert_eq!(metrics.lines().count(), 1 + 4 * (6 + 1));
    let diagnostics = fs::read_to_string(dir.path().join("diagnostics.csv")).unwrap();
    assert_eq!(diagnostics.lines().count(), 1 + 4);

    let summary: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["final_test_acc"].as_f64().unwrap(), outcome.final_accuracy());
    assert_eq!(summary["malicious_clients"].as_array().unwrap().len(), 2);
    let reparsed: ExperimentConfig = serde_json::from_value(summary["config"].clone()).unwrap();
    assert_eq!(reparsed, config);
}

#[test]
fn test_saved_model_reproduces_reported_accuracy() {
    let config = config();
    let outcome = run_experiment(&config, &RunOptions::default()).unwrap();
    let (_, test) = load_datasets(&config).unwrap();
    let spec = Experiment::setup(&config).unwrap().spec;
    let probs = forward(&spec, &outcome.final_params, test.features.view()).unwrap();
    let correct = probs
        .rows()
        .into_iter()
        .zip(&test.labels)
        .filter(|(row, &y)| {
            let argmax = (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best });
            argmax == y
        })
        .count();
    assert_eq!(correct as f64 / test.len() as f64, outcome.final_accuracy());
}

#[test]
fn test_stepwise_rounds_match_batch_run() {
    let config = config();
    let mut experiment = Experiment::setup(&config).unwrap();
    let stepped: Vec<f64> = (0..config.rounds)
        .map(|_| experiment.run_round().unwrap().metrics.test_acc)
        .collect();
    let outcome = run_experiment(&config, &RunOptions::default()).unwrap();
    let batch: Vec<f64> = outcome.rounds.iter().map(|r| r.test_acc).collect();
    assert_eq!(stepped, batch);
    assert_eq!(experiment.global, outcome.final_params);
}
