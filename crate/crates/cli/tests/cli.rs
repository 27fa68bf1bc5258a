use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_clusterguard");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("config.json");
    let text = format!(
        r#"{{
            "dataset": {{"source": "synthetic", "num_classes": 3, "input_dim": 4,
                         "samples_per_class": 20, "test_samples_per_class": 10, "seed": 7}},
            "num_clients": 5,
            "rounds": 3,
            "attack": {{"kind": "gaussian-update"}}
            {extra}
        }}"#
    );
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn test_run_writes_outputs_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let out = run(&["run", "--config", &cfg, "--out", a.to_str().unwrap(), "--threads", "1"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(a.join("metrics.csv").is_file() && a.join("summary.json").is_file());
    let out = run(&["run", "--config", &cfg, "--out", b.to_str().unwrap(), "--threads", "4"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(
        fs::read(a.join("metrics.csv")).unwrap(),
        fs::read(b.join("metrics.csv")).unwrap()
    );
}

#[test]
fn test_invalid_config_exits_2_naming_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#", "selection_prob": 0"#);
    let out = run(&["run", "--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("selection_prob"), "{}", stderr(&out));

    let missing = run(&["run", "--config", "/nonexistent/config.json", "--out", "/tmp/x"]);
    assert_eq!(missing.status.code(), Some(2));
    assert_eq!(run(&["run"]).status.code(), Some(2));
}

#[test]
fn test_seed_override_flows_to_master_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let o = dir.path().join("o");
    let out = run(&["run", "--config", &cfg, "--out", o.to_str().unwrap(), "--seed", "99"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(o.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["config"]["master_seed"], 99);
}

#[test]
fn test_sweep_and_report() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "");
    let sweep = dir.path().join("sweep.json");
    fs::write(
        &sweep,
        r#"{"base_config": "config.json", "aggregators": ["clusterguard", "fedavg"],
            "attacks": ["gaussian-update", "none"], "seeds": [1, 2], "out_dir": "results"}"#,
    )
    .unwrap();
    let out = run(&["sweep", "--config", sweep.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let results = dir.path().join("results");
    let cells = fs::read_dir(&results)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().is_dir())
        .count();
    assert_eq!(cells, 8);

    let rows = clusterguard_cli::read_report_csv(&results.join("report.csv")).unwrap();
    let order: Vec<(&str, &str)> = rows
        .iter()
        .map(|r| (r.aggregator.as_str(), r.attack.as_str()))
        .collect();
    assert_eq!(
        order,
        [
            ("clusterguard", "gaussian-update"),
            ("clusterguard", "none"),
            ("fedavg", "gaussian-update"),
            ("fedavg", "none")
        ]
    );
    for r in &rows {
        let accs: Vec<f64> = r.seed_accs.split(';').map(|v| v.parse().unwrap()).collect();
        assert_eq!(accs.len(), 2);
        let mean = accs.iter().sum::<f64>() / 2.0;
        assert!((r.mean_final_acc.unwrap() - mean).abs() < 1e-9);
    }

    let md = run(&["report", "--out", results.to_str().unwrap()]);
    assert!(md.status.success(), "{}", stderr(&md));
    let md = String::from_utf8(md.stdout).unwrap();
    let csv = run(&["report", "--out", results.to_str().unwrap(), "--format", "csv"]);
    let csv = String::from_utf8(csv.stdout).unwrap();
    assert_eq!(md.lines().count(), 4);
    assert!(md.lines().nth(2).unwrap().starts_with("| FedAvg |"));
    assert!(md.lines().nth(3).unwrap().starts_with("| ClusterGuardFL |"));
    assert!(md.contains("| — |"));
    // Markdown and CSV carry the same 2-decimal values.
    for (m, c) in md.lines().skip(2).zip(csv.lines().skip(1)) {
        let m_cells: Vec<&str> = m.trim_matches('|').split('|').map(str::trim).collect();
        let c_cells: Vec<&str> = c.split(',').collect();
        assert_eq!(m_cells, c_cells);
    }
    let fedavg_none = rows
        .iter()
        .find(|r| r.aggregator == "fedavg" && r.attack == "none")
        .unwrap();
    let shown: f64 = csv.lines().nth(1).unwrap().split(',').nth(1).unwrap().parse().unwrap();
    assert!((shown - fedavg_none.mean_final_acc.unwrap() * 100.0).abs() <= 0.005 + 1e-9);
}

#[test]
fn test_sweep_rejects_duplicate_seeds() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "");
    let sweep = dir.path().join("sweep.json");
    fs::write(
        &sweep,
        r#"{"base_config": "config.json", "aggregators": ["fedavg"], "attacks": ["none"], "seeds": [3, 3], "out_dir": "r"}"#,
    )
    .unwrap();
    assert_eq!(
        run(&["sweep", "--config", sweep.to_str().unwrap()]).status.code(),
        Some(2)
    );
}

#[test]
fn test_sweep_reports_failed_cells() {
    let dir = tempfile::tempdir().unwrap();
    write_config(dir.path(), "");
    let sweep = dir.path().join("sweep.json");
    // krum:3 needs at least 9 clients; the fedavg cells still run.
    fs::write(
        &sweep,
        r#"{"base_config": "config.json", "aggregators": ["krum:3", "fedavg"], "attacks": ["none"], "seeds": [1], "out_dir": "r"}"#,
    )
    .unwrap();
    let out = run(&["sweep", "--config", sweep.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let rows = clusterguard_cli::read_report_csv(&dir.path().join("r/report.csv")).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].num_seeds, 0);
    assert!(rows[1].mean_final_acc.is_some());
}

#[test]
fn test_report_on_empty_dir_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        run(&["report", "--out", dir.path().to_str().unwrap()]).status.code(),
        Some(2)
    );
}

#[test]
fn test_verify_passes_and_catches_injected_fault() {
    let out = run(&["verify"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let table = String::from_utf8(out.stdout).unwrap();
    for suite in ["emd_1d", "krum", "weiszfeld", "gradient", "variance_decomposition"] {
        assert_eq!(table.lines().filter(|l| l.starts_with(suite)).count(), 1, "{table}");
    }
    let broken = run(&["verify", "--inject-fault", "emd_1d"]);
    assert_eq!(broken.status.code(), Some(1));
    assert!(stderr(&broken).contains("emd_1d"));
    assert!(String::from_utf8(broken.stdout).unwrap().contains("emd_1d failed: "));
    assert_eq!(run(&["verify", "--inject-fault", "nonsense"]).status.code(), Some(2));
}
