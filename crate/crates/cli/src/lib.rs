//! Command implementations behind the `clusterguard` binary.
//!
//! Each command returns `Ok(())` or a [`CliError`] whose kind maps onto the
//! process exit code: 2 for invalid input, 1 for runtime failures.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clusterguard::attacks::AttackKind;
use clusterguard::verify::{self, Faults};
use clusterguard::{run_experiment, AggregatorKind, Error, ExperimentConfig, RunOptions};
use serde::{Deserialize, Serialize};

pub const REPORT_FILE: &str = "report.csv";

#[derive(Debug)]
pub enum CliError {
    Invalid(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Invalid(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Invalid(m) => write!(f, "invalid input: {m}"),
            CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } | Error::Format { .. } | Error::Json(_) => CliError::Invalid(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn io_error(context: &str, path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{context} {}: {e}", path.display()))
}

/// Loads an experiment config, mapping a missing file to invalid input.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    if !path.is_file() {
        return Err(CliError::Invalid(format!(
            "config file {} does not exist",
            path.display()
        )));
    }
    Ok(ExperimentConfig::from_path(path)?)
}

pub fn cmd_run(config_path: &Path, out_dir: &Path, seed: Option<u64>, threads: Option<usize>) -> Result<(), CliError> {
    let mut config = load_config(config_path)?;
    if let Some(s) = seed {
        config.master_seed = s;
    }
    let outcome = run_experiment(
        &config,
        &RunOptions {
            threads,
            out_dir: Some(out_dir.to_path_buf()),
        },
    )?;
    println!(
        "{} / {}: final accuracy {:.2}% after {} rounds, outputs in {}",
        config.aggregator.display_name(),
        config.attack.kind.as_str(),
        outcome.final_accuracy() * 100.0,
        outcome.rounds.len(),
        out_dir.display()
    );
    Ok(())
}

/// Grid of experiments crossing aggregators, attacks and seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// Experiment config every cell starts from; relative to the sweep file.
    pub base_config: PathBuf,
    pub aggregators: Vec<String>,
    pub attacks: Vec<String>,
    pub seeds: Vec<u64>,
    /// Relative to the sweep file.
    pub out_dir: PathBuf,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<(Vec<AggregatorKind>, Vec<AttackKind>), CliError> {
        if self.aggregators.is_empty() || self.attacks.is_empty() || self.seeds.is_empty() {
            return Err(CliError::Invalid(
                "sweep needs nonempty aggregators, attacks and seeds".into(),
            ));
        }
        let mut seen = std::collections::BTreeSet::new();
        if let Some(dup) = self.seeds.iter().find(|s| !seen.insert(**s)) {
            return Err(CliError::Invalid(format!("seed {dup} is listed twice")));
        }
        let aggs = self
            .aggregators
            .iter()
            .map(|a| AggregatorKind::parse(a).map_err(CliError::from))
            .collect::<Result<Vec<_>, _>>()?;
        let attacks = self
            .attacks
            .iter()
            .map(|a| AttackKind::parse(a).ok_or_else(|| CliError::Invalid(format!("unknown attack `{a}`"))))
            .collect::<Result<Vec<_>, _>>()?;
        Ok((aggs, attacks))
    }
}

fn cell_name(aggregator: &str, attack: &str, seed: u64) -> String {
    let clean: String = aggregator
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{clean}__{attack}__seed{seed}")
}

/// One aggregated row of `report.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub aggregator: String,
    pub attack: String,
    pub num_seeds: usize,
    /// Fraction in [0, 1]; empty when every seed failed.
    pub mean_final_acc: Option<f64>,
    /// `;`-separated per-seed final accuracies in seed order.
    pub seed_accs: String,
}

pub fn cmd_sweep(
    sweep_path: &Path,
    out_override: Option<&Path>,
    seed: Option<u64>,
    threads: Option<usize>,
) -> Result<(), CliError> {
    let text = fs::read_to_string(sweep_path)
        .map_err(|e| CliError::Invalid(format!("cannot read sweep file {}: {e}", sweep_path.display())))?;
    let mut spec: SweepSpec = serde_json::from_str(&text).map_err(|e| CliError::Invalid(format!("sweep file: {e}")))?;
    if let Some(s) = seed {
        spec.seeds = vec![s];
    }
    let (aggs, attacks) = spec.validate()?;
    let base_dir = sweep_path.parent().unwrap_or(Path::new("."));
    let base = load_config(&base_dir.join(&spec.base_config))?;
    let out_dir = out_override.map_or_else(|| base_dir.join(&spec.out_dir), Path::to_path_buf);
    fs::create_dir_all(&out_dir).map_err(|e| io_error("cannot create", &out_dir, e))?;

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (agg_text, agg) in spec.aggregators.iter().zip(&aggs) {
        for attack in &attacks {
            let mut accs = Vec::new();
            for &s in &spec.seeds {
                let mut config = base.clone();
                config.aggregator = agg.clone();
                config.attack.kind = *attack;
                config.master_seed = s;
                let cell = out_dir.join(cell_name(agg_text, attack.as_str(), s));
                match run_experiment(
                    &config,
                    &RunOptions {
                        threads,
                        out_dir: Some(cell.clone()),
                    },
                ) {
                    Ok(outcome) => {
                        println!(
                            "{:<40} {:.2}%",
                            cell_name(agg_text, attack.as_str(), s),
                            outcome.final_accuracy() * 100.0
                        );
                        accs.push(outcome.final_accuracy());
                    }
                    Err(e) => {
                        eprintln!("cell {} failed: {e}", cell.display());
                        failures.push(cell_name(agg_text, attack.as_str(), s));
                    }
                }
            }
            rows.push(ReportRow {
                aggregator: agg_text.clone(),
                attack: attack.as_str().to_string(),
                num_seeds: accs.len(),
                mean_final_acc: (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64),
                seed_accs: accs.iter().map(f64::to_string).collect::<Vec<_>>().join(";"),
            });
        }
    }
    write_report_csv(&out_dir.join(REPORT_FILE), &rows)?;
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "{} sweep cell(s) failed: {}",
            failures.len(),
            failures.join(", ")
        )))
    }
}

fn write_report_csv(path: &Path, rows: &[ReportRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    w.flush().map_err(|e| io_error("cannot write", path, e))
}

pub fn read_report_csv(path: &Path) -> Result<Vec<ReportRow>, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .collect::<Result<Vec<ReportRow>, _>>()
        .map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))
}

pub fn cmd_verify(seed: u64, faults: Faults, out: &mut impl Write) -> Result<(), CliError> {
    let results = verify::run_all(seed, faults);
    let mut table = String::new();
    let _ = writeln!(
        table,
        "{:<24} {:>9} {:>12} {:>10}  result",
        "suite", "instances", "worst", "tolerance"
    );
    for r in &results {
        let _ = writeln!(
            table,
            "{:<24} {:>9} {:>12.3e} {:>10.0e}  {}",
            r.name,
            r.instances,
            r.worst_error,
            r.tolerance,
            if r.passed() { "pass" } else { "FAIL" }
        );
    }
    for r in results.iter().filter(|r| !r.passed()) {
        let _ = writeln!(
            table,
            "\n{} failed: {}",
            r.name,
            r.failure.as_deref().unwrap_or_default()
        );
    }
    out.write_all(table.as_bytes())
        .map_err(|e| CliError::Runtime(format!("cannot write output: {e}")))?;
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "oracle suites failed: {}",
            failed.join(", ")
        )))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ReportFormat {
    Markdown,
    Csv,
}

/// Table rows in their fixed order.
pub const REPORT_ROWS: [&str; 8] = [
    "FedAvg",
    "Median",
    "Trimmed Mean",
    "Krum",
    "GeoMed",
    "AutoGM",
    "Clustering",
    "ClusterGuardFL",
];

pub const REPORT_COLUMNS: [(&str, AttackKind); 3] = [
    ("No Attack", AttackKind::None),
    ("Label Flipping", AttackKind::LabelFlip),
    ("Gaussian", AttackKind::GaussianUpdate),
];

const MISSING: &str = "—";

/// Collects report rows from `report.csv`, or from per-cell summaries when it is absent.
fn collect_rows(dir: &Path) -> Result<Vec<ReportRow>, CliError> {
    let report = dir.join(REPORT_FILE);
    if report.is_file() {
        return read_report_csv(&report);
    }
    let mut cells: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| CliError::Invalid(format!("cannot read {}: {e}", dir.display())))?;
    for entry in entries.flatten() {
        let summary = entry.path().join("summary.json");
        let Ok(text) = fs::read_to_string(&summary) else {
            continue;
        };
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", summary.display())))?;
        let (Some(agg), Some(attack), Some(acc)) = (
            value["aggregator"].as_str(),
            value["attack"].as_str(),
            value["final_test_acc"].as_f64(),
        ) else {
            continue;
        };
        cells
            .entry((agg.to_string(), attack.to_string()))
            .or_default()
            .push(acc);
    }
    Ok(cells
        .into_iter()
        .map(|((aggregator, attack), accs)| ReportRow {
            aggregator,
            attack,
            num_seeds: accs.len(),
            mean_final_acc: Some(accs.iter().sum::<f64>() / accs.len() as f64),
            seed_accs: accs.iter().map(f64::to_string).collect::<Vec<_>>().join(";"),
        })
        .collect())
}

/// Renders the aggregator x attack accuracy matrix (percent, 2 decimals).
pub fn render_report(rows: &[ReportRow], format: ReportFormat) -> Result<String, CliError> {
    let mut matrix: BTreeMap<&'static str, [Option<f64>; 3]> = BTreeMap::new();
    for row in rows {
        let name = AggregatorKind::parse(&row.aggregator)?.display_name();
        let attack = AttackKind::parse(&row.attack)
            .ok_or_else(|| CliError::Invalid(format!("unknown attack `{}` in report", row.attack)))?;
        let col = REPORT_COLUMNS
            .iter()
            .position(|(_, a)| *a == attack)
            .expect("every attack has a column");
        matrix.entry(name).or_insert([None; 3])[col] = row.mean_final_acc;
    }
    let cell = |v: Option<f64>| v.map_or(MISSING.to_string(), |a| format!("{:.2}", a * 100.0));
    let mut out = String::new();
    let headers: Vec<&str> = REPORT_COLUMNS.iter().map(|(h, _)| *h).collect();
    match format {
        ReportFormat::Markdown => {
            let _ = writeln!(out, "| Aggregator | {} |", headers.join(" | "));
            let _ = writeln!(out, "|---|{}", "---|".repeat(headers.len()));
        }
        ReportFormat::Csv => {
            let _ = writeln!(out, "aggregator,{}", headers.join(","));
        }
    }
    for name in REPORT_ROWS {
        let Some(values) = matrix.get(name) else { continue };
        let cells: Vec<String> = values.iter().map(|v| cell(*v)).collect();
        match format {
            ReportFormat::Markdown => {
                let _ = writeln!(out, "| {name} | {} |", cells.join(" | "));
            }
            ReportFormat::Csv => {
                let _ = writeln!(out, "{name},{}", cells.join(","));
            }
        }
    }
    Ok(out)
}

pub fn cmd_report(dir: &Path, format: ReportFormat) -> Result<String, CliError> {
    if !dir.is_dir() {
        return Err(CliError::Invalid(format!("{} is not a directory", dir.display())));
    }
    let rows = collect_rows(dir)?;
    if rows.is_empty() {
        return Err(CliError::Invalid(format!("no sweep results in {}", dir.display())));
    }
    render_report(&rows, format)
}
