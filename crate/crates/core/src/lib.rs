//! Simulator for Byzantine-robust federated learning with dissimilarity-scored,
//! cluster-weighted aggregation and a set of classic robust baselines.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod aggregation;
pub mod attacks;
pub mod clustering;
pub mod confidence;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod dissimilarity;
pub mod error;
pub mod model;
pub mod orchestrator;
pub mod rng;
pub mod vecops;
pub mod verify;

pub use aggregation::AggregatorKind;
pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use model::{ModelSpec, ParamVector};
pub use orchestrator::{run_experiment, ExperimentOutcome, RunOptions};
