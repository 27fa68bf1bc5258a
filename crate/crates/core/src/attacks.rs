//! Byzantine client behaviors: label flipping and Gaussian update poisoning.

use std::collections::BTreeSet;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::ParamVector;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    None,
    LabelFlip,
    GaussianUpdate,
}

impl AttackKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            AttackKind::None => "none",
            AttackKind::LabelFlip => "label-flip",
            AttackKind::GaussianUpdate => "gaussian-update",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(AttackKind::None),
            "label-flip" => Some(AttackKind::LabelFlip),
            "gaussian-update" | "gaussian" => Some(AttackKind::GaussianUpdate),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlipMode {
    /// `y -> (y + 1) mod C` for every sample.
    NextClass,
    /// Only `y == src` is relabelled to `dst`.
    FixedPair { src: usize, dst: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GaussianMode {
    /// The submitted parameters are pure noise.
    Replace,
    /// Noise is added to the honestly trained parameters.
    Add,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub malicious_fraction: f64,
    pub flip_mode: FlipMode,
    pub gaussian_sigma: f64,
    pub gaussian_mode: GaussianMode,
    /// Seed for choosing the malicious set; derived from the master seed when absent.
    pub seed: Option<u64>,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            kind: AttackKind::None,
            malicious_fraction: 0.2,
            flip_mode: FlipMode::NextClass,
            gaussian_sigma: 1.0,
            gaussian_mode: GaussianMode::Replace,
            seed: None,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.malicious_fraction) {
            return Err(Error::config(
                "attack.malicious_fraction",
                format!("must lie in [0, 1], got {}", self.malicious_fraction),
            ));
        }
        if self.kind == AttackKind::GaussianUpdate && !(self.gaussian_sigma > 0.0 && self.gaussian_sigma.is_finite()) {
            return Err(Error::config(
                "attack.gaussian_sigma",
                format!("must be positive, got {}", self.gaussian_sigma),
            ));
        }
        if let FlipMode::FixedPair { src, dst } = self.flip_mode {
            if src == dst {
                return Err(Error::config("attack.flip_mode", "fixed-pair needs src != dst"));
            }
        }
        Ok(())
    }

    /// `floor(fraction * K)`, robust to representation error such as `0.29 * 100`.
    pub fn malicious_count(&self, num_clients: usize) -> usize {
        if self.kind == AttackKind::None {
            return 0;
        }
        ((self.malicious_fraction * num_clients as f64 + 1e-9).floor() as usize).min(num_clients)
    }
}

/// Chooses the malicious client indices uniformly without replacement.
pub fn select_malicious(num_clients: usize, config: &AttackConfig, seed: u64) -> BTreeSet<usize> {
    let count = config.malicious_count(num_clients);
    let mut rng = rng::seeded(config.seed.unwrap_or(seed));
    rand::seq::index::sample(&mut rng, num_clients, count)
        .into_iter()
        .collect()
}

/// Relabels a dataset; features are left untouched.
pub fn flip_labels(dataset: &Dataset, mode: FlipMode, num_classes: usize) -> Result<Dataset> {
    if let Some(&bad) = dataset.labels.iter().find(|&&y| y >= num_classes) {
        return Err(Error::Argument(format!("label {bad} >= num_classes {num_classes}")));
    }
    let labels = match mode {
        FlipMode::NextClass => dataset.labels.iter().map(|&y| (y + 1) % num_classes).collect(),
        FlipMode::FixedPair { src, dst } => {
            if src == dst {
                return Err(Error::Argument("fixed-pair flip needs src != dst".into()));
            }
            if src >= num_classes || dst >= num_classes {
                return Err(Error::Argument(format!(
                    "fixed-pair ({src}, {dst}) out of range for {num_classes} classes"
                )));
            }
            dataset.labels.iter().map(|&y| if y == src { dst } else { y }).collect()
        }
    };
    Ok(Dataset {
        features: dataset.features.clone(),
        labels,
        num_classes: dataset.num_classes,
    })
}

/// Gaussian model poisoning of a submitted parameter vector.
pub fn poison_update<R: Rng + ?Sized>(update: &ParamVector, config: &AttackConfig, rng: &mut R) -> Result<ParamVector> {
    if config.kind != AttackKind::GaussianUpdate {
        return Err(Error::Argument(format!(
            "poison_update needs a gaussian-update attack, got {}",
            config.kind.as_str()
        )));
    }
    let normal =
        Normal::new(0.0, config.gaussian_sigma).map_err(|e| Error::Argument(format!("invalid gaussian sigma: {e}")))?;
    let values = match config.gaussian_mode {
        GaussianMode::Replace => (0..update.len()).map(|_| normal.sample(rng)).collect(),
        GaussianMode::Add => update.as_slice().iter().map(|v| v + normal.sample(rng)).collect(),
    };
    Ok(ParamVector::new(values))
}
