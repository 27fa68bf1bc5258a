//! Experiment configuration: a JSON document with defaults for everything
//! except what identifies the data.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aggregation::AggregatorKind;
use crate::attacks::AttackConfig;
use crate::data::PartitionKind;
use crate::dissimilarity::DissimilarityMode;
use crate::error::{Error, Result};
use crate::model::ModelKind;

pub const DEFAULT_SOFTMAX_LR: f64 = 0.05;
pub const DEFAULT_MLP_LR: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub hidden_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::SoftmaxRegression,
            hidden_dim: 64,
        }
    }
}

fn default_synthetic_classes() -> usize {
    10
}
fn default_synthetic_dim() -> usize {
    20
}
fn default_samples_per_class() -> usize {
    100
}
fn default_test_samples_per_class() -> usize {
    30
}
fn default_spread() -> f64 {
    0.15
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// IDX image/label files, optionally gzip-compressed.
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
        /// Inferred from the labels when absent.
        #[serde(default)]
        num_classes: Option<usize>,
    },
    Synthetic {
        #[serde(default = "default_synthetic_classes")]
        num_classes: usize,
        #[serde(default = "default_synthetic_dim")]
        input_dim: usize,
        #[serde(default = "default_samples_per_class")]
        samples_per_class: usize,
        #[serde(default = "default_test_samples_per_class")]
        test_samples_per_class: usize,
        #[serde(default = "default_spread")]
        spread: f64,
        /// Derived from the master seed when absent.
        #[serde(default)]
        seed: Option<u64>,
    },
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synthetic {
            num_classes: default_synthetic_classes(),
            input_dim: default_synthetic_dim(),
            samples_per_class: default_samples_per_class(),
            test_samples_per_class: default_test_samples_per_class(),
            spread: default_spread(),
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionConfig {
    pub kind: PartitionKind,
    pub shards_per_client: usize,
    pub alpha: f64,
    pub seed: Option<u64>,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        PartitionConfig {
            kind: PartitionKind::Iid,
            shards_per_client: 2,
            alpha: 0.5,
            seed: None,
        }
    }
}

/// Local learning rate, fixed or varying with the (1-based) round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LearningRate {
    Fixed(f64),
    /// One value per round; the last value repeats once the list runs out.
    Schedule(Vec<f64>),
    /// `initial / (1 + decay * (round - 1))`.
    InverseTime {
        initial: f64,
        decay: f64,
    },
}

impl LearningRate {
    pub fn at(&self, round: usize) -> f64 {
        match self {
            LearningRate::Fixed(v) => *v,
            LearningRate::Schedule(values) => values[(round.max(1) - 1).min(values.len() - 1)],
            LearningRate::InverseTime { initial, decay } => initial / (1.0 + decay * (round.max(1) - 1) as f64),
        }
    }

    fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        let ok = match self {
            LearningRate::Fixed(v) => positive(*v),
            LearningRate::Schedule(values) => !values.is_empty() && values.iter().all(|v| positive(*v)),
            LearningRate::InverseTime { initial, decay } => positive(*initial) && *decay >= 0.0 && decay.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config("lr", "learning rates must be positive and finite"))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsConfig {
    pub enabled: bool,
    pub gamma: f64,
    pub lipschitz_probes: usize,
    pub lipschitz_radius: f64,
    /// Full-batch steps for the reference optimum; 0 skips the PL estimate.
    pub pl_reference_steps: usize,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig {
            enabled: false,
            gamma: 1.0,
            lipschitz_probes: 2,
            lipschitz_radius: 1e-3,
            pl_reference_steps: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub dataset: DatasetConfig,
    pub partition: PartitionConfig,
    pub attack: AttackConfig,
    pub aggregator: AggregatorKind,
    pub num_clients: usize,
    pub selection_prob: f64,
    pub rounds: usize,
    pub local_passes: usize,
    pub batch_sample_prob: f64,
    pub batch_size: usize,
    /// Per-model default when absent.
    pub lr: Option<LearningRate>,
    pub cluster_count: usize,
    pub softmax_temperature: f64,
    /// Maximum number of local samples used to compute a dissimilarity score.
    pub eval_cap: usize,
    pub dissimilarity_mode: DissimilarityMode,
    pub diagnostics: DiagnosticsConfig,
    /// Standard deviation of optional Gaussian noise added to the aggregate.
    pub noise_sigma: f64,
    pub master_seed: u64,
    pub checkpoint_every: Option<usize>,
    /// Fill the `ms` metrics column. Off by default so metrics stay reproducible.
    pub record_timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: ModelConfig::default(),
            dataset: DatasetConfig::default(),
            partition: PartitionConfig::default(),
            attack: AttackConfig::default(),
            aggregator: AggregatorKind::ClusterGuard,
            num_clients: 10,
            selection_prob: 1.0,
            rounds: 30,
            local_passes: 1,
            batch_sample_prob: 1.0,
            batch_size: 32,
            lr: None,
            cluster_count: 2,
            softmax_temperature: 1.0,
            eval_cap: 512,
            dissimilarity_mode: DissimilarityMode::PerSample,
            diagnostics: DiagnosticsConfig::default(),
            noise_sigma: 0.0,
            master_seed: 0,
            checkpoint_every: None,
            record_timing: false,
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates. Parse errors carry the JSON path of the offending field.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let field = if path == "." { "<root>".to_string() } else { path };
            Error::config(field, e.into_inner().to_string())
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut config = Self::from_json_str(&text)?;
        if let Some(dir) = path.parent() {
            config.resolve_paths(dir);
        }
        Ok(config)
    }

    /// Makes relative dataset paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        if let DatasetConfig::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            ..
        } = &mut self.dataset
        {
            for p in [train_images, train_labels, test_images, test_labels] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
    }

    pub fn learning_rate(&self) -> LearningRate {
        self.lr.clone().unwrap_or(LearningRate::Fixed(match self.model.kind {
            ModelKind::SoftmaxRegression => DEFAULT_SOFTMAX_LR,
            ModelKind::Mlp => DEFAULT_MLP_LR,
        }))
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v > 0.0 && v <= 1.0;
        if !unit(self.selection_prob) {
            return Err(Error::config(
                "selection_prob",
                format!("must lie in (0, 1], got {}", self.selection_prob),
            ));
        }
        if !unit(self.batch_sample_prob) {
            return Err(Error::config(
                "batch_sample_prob",
                format!("must lie in (0, 1], got {}", self.batch_sample_prob),
            ));
        }
        if self.rounds < 1 {
            return Err(Error::config("rounds", "must be at least 1"));
        }
        if self.num_clients < 2 {
            return Err(Error::config("num_clients", "must be at least 2"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.cluster_count < 1 || self.cluster_count > self.num_clients {
            return Err(Error::config(
                "cluster_count",
                format!("must lie in [1, num_clients], got {}", self.cluster_count),
            ));
        }
        if !(self.softmax_temperature > 0.0 && self.softmax_temperature.is_finite()) {
            return Err(Error::config("softmax_temperature", "must be positive"));
        }
        if self.eval_cap < 1 {
            return Err(Error::config("eval_cap", "must be at least 1"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("noise_sigma", "must be finite and >= 0"));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::config("checkpoint_every", "must be at least 1"));
        }
        if self.model.kind == ModelKind::Mlp && self.model.hidden_dim < 1 {
            return Err(Error::config("model.hidden_dim", "must be at least 1"));
        }
        if let Some(lr) = &self.lr {
            lr.validate()?;
        }
        let d = &self.diagnostics;
        if !(d.gamma > 0.0) {
            return Err(Error::config("diagnostics.gamma", "must be positive"));
        }
        if d.lipschitz_probes < 1 {
            return Err(Error::config("diagnostics.lipschitz_probes", "must be at least 1"));
        }
        if !(d.lipschitz_radius > 0.0) {
            return Err(Error::config("diagnostics.lipschitz_radius", "must be positive"));
        }
        match self.partition.kind {
            PartitionKind::LabelShard if self.partition.shards_per_client < 1 => {
                return Err(Error::config("partition.shards_per_client", "must be at least 1"));
            }
            PartitionKind::Dirichlet if !(self.partition.alpha > 0.0 && self.partition.alpha.is_finite()) => {
                return Err(Error::config("partition.alpha", "must be positive"));
            }
            _ => {}
        }
        if let DatasetConfig::Synthetic {
            num_classes,
            input_dim,
            samples_per_class,
            test_samples_per_class,
            spread,
            ..
        } = &self.dataset
        {
            if *num_classes < 2 {
                return Err(Error::config("dataset.num_classes", "must be at least 2"));
            }
            if *input_dim < 1 {
                return Err(Error::config("dataset.input_dim", "must be at least 1"));
            }
            if *samples_per_class < 1 || *test_samples_per_class < 1 {
                return Err(Error::config("dataset.samples_per_class", "must be at least 1"));
            }
            if !(*spread >= 0.0 && spread.is_finite()) {
                return Err(Error::config("dataset.spread", "must be finite and >= 0"));
            }
        }
        self.attack.validate()?;
        self.aggregator.validate()?;
        Ok(())
    }
}
