//! The federated training loop and its output artifacts.
//!
//! A round selects clients, trains each from the broadcast global model,
//! applies the configured attack, scores and clusters submissions when the
//! aggregator needs it, aggregates, and evaluates on the held-out set.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::Serialize;

use crate::aggregation::{clusterguard_aggregate, AggregatorKind, ClientUpdate};
use crate::attacks::{self, AttackKind};
use crate::clustering::{kmeans, standardize, FeaturePoint};
use crate::confidence::{confidence_scores, softmax_weights};
use crate::config::{DatasetConfig, ExperimentConfig};
use crate::data::{self, Dataset, PartitionPlan};
use crate::diagnostics::{self, DiagnosticsReport, NoiseTerms};
use crate::dissimilarity::score_with_mode;
use crate::error::{Error, Result};
use crate::model::{self, Batch, ModelKind, ModelSpec, ParamVector};
use crate::rng::{derive_seed, stream_rng, Stream};

const KMEANS_MAX_ITER: usize = 100;
const KMEANS_TOL: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    /// Local data as the client trains on it (already relabelled for label-flip attackers).
    pub data: Dataset,
    pub malicious: bool,
}

/// Per-client entry of a round's metrics. Score fields are only filled for
/// selected clients in clusterguard rounds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClientRoundRecord {
    pub client_id: usize,
    pub selected: bool,
    pub malicious: bool,
    pub dissimilarity: Option<f64>,
    pub cluster: Option<usize>,
    pub raw_score: Option<f64>,
    pub weight: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundMetrics {
    /// 1-based.
    pub round: usize,
    pub selected: Vec<usize>,
    pub clients: Vec<ClientRoundRecord>,
    pub test_acc: f64,
    pub test_loss: f64,
    pub elapsed_ms: Option<f64>,
}

impl RoundMetrics {
    /// Whether the clusters split malicious from honest selected clients.
    /// `None` unless clusters were computed and both groups were selected.
    pub fn clusters_separate_malicious(&self) -> Option<bool> {
        let chosen: Vec<&ClientRoundRecord> = self.clients.iter().filter(|c| c.selected).collect();
        let mut bad = BTreeSet::new();
        let mut good = BTreeSet::new();
        for c in &chosen {
            let cluster = c.cluster?;
            if c.malicious {
                bad.insert(cluster);
            } else {
                good.insert(cluster);
            }
        }
        if bad.is_empty() || good.is_empty() {
            return None;
        }
        Some(bad.is_disjoint(&good))
    }

    /// Mean weight of selected malicious clients times the number selected;
    /// 1.0 means they got exactly a uniform share.
    pub fn malicious_weight_ratio(&self) -> Option<f64> {
        let weights: Vec<f64> = self
            .clients
            .iter()
            .filter(|c| c.selected && c.malicious)
            .map(|c| c.weight)
            .collect::<Option<Vec<f64>>>()?;
        if weights.is_empty() {
            return None;
        }
        let mean = weights.iter().sum::<f64>() / weights.len() as f64;
        Some(mean * self.selected.len() as f64)
    }
}

/// Loads train and test sets as described by the config.
pub fn load_datasets(config: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    match &config.dataset {
        DatasetConfig::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            train_limit,
            test_limit,
            num_classes,
        } => {
            let mut train = data::load_idx(train_images, train_labels)?;
            let mut test = data::load_idx(test_images, test_labels)?;
            if train.input_dim() != test.input_dim() {
                return Err(Error::config(
                    "dataset",
                    format!(
                        "train images have {} pixels, test images {}",
                        train.input_dim(),
                        test.input_dim()
                    ),
                ));
            }
            if let Some(n) = train_limit {
                train = train.head(*n);
            }
            if let Some(n) = test_limit {
                test = test.head(*n);
            }
            let inferred = train.num_classes.max(test.num_classes);
            let classes = match num_classes {
                Some(c) if *c < inferred => {
                    return Err(Error::config(
                        "dataset.num_classes",
                        format!("labels need at least {inferred} classes, got {c}"),
                    ))
                }
                Some(c) => *c,
                None => inferred,
            };
            train.num_classes = classes;
            test.num_classes = classes;
            Ok((train, test))
        }
        DatasetConfig::Synthetic {
            num_classes,
            input_dim,
            samples_per_class,
            test_samples_per_class,
            spread,
            seed,
        } => {
            let seed = seed.unwrap_or_else(|| derive_seed(config.master_seed, Stream::Synthetic, 0, 0));
            let train = data::generate_synthetic(*num_classes, *input_dim, *samples_per_class, *spread, seed)?;
            let test_seed = derive_seed(seed, Stream::Synthetic, 1, 0);
            let test = data::generate_synthetic(*num_classes, *input_dim, *test_samples_per_class, *spread, test_seed)?;
            Ok((train, test))
        }
    }
}

/// Each client joins with probability `q_c`; an empty draw forces in one
/// uniformly chosen client.
pub fn select_clients<R: Rng + ?Sized>(num_clients: usize, q_c: f64, rng: &mut R) -> Result<Vec<usize>> {
    if !(q_c > 0.0 && q_c <= 1.0) {
        return Err(Error::Argument(format!(
            "selection probability must lie in (0, 1], got {q_c}"
        )));
    }
    if num_clients == 0 {
        return Err(Error::Argument("no clients to select from".into()));
    }
    let mut chosen: Vec<usize> = (0..num_clients).filter(|_| rng.random_bool(q_c)).collect();
    if chosen.is_empty() {
        chosen.push(rng.random_range(0..num_clients));
    }
    Ok(chosen)
}

/// Local training: `local_passes` passes, each over a Bernoulli(q) sample of
/// the local data, shuffled and cut into steps of at most `batch_size`.
pub fn client_training<R: Rng + ?Sized>(
    spec: &ModelSpec,
    global: &ParamVector,
    local: &Dataset,
    config: &ExperimentConfig,
    lr: f64,
    rng: &mut R,
) -> Result<ParamVector> {
    if local.is_empty() {
        return Err(Error::config("partition", "a client has no local data"));
    }
    let mut params = global.clone();
    for _ in 0..config.local_passes {
        let mut drawn: Vec<usize> = (0..local.len())
            .filter(|_| rng.random_bool(config.batch_sample_prob))
            .collect();
        if drawn.is_empty() {
            continue;
        }
        drawn.shuffle(rng);
        for chunk in drawn.chunks(config.batch_size) {
            let features = local.features.select(Axis(0), chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| local.labels[i]).collect();
            let batch = Batch::new(features.view(), &labels)?;
            let grad = model::gradient(spec, &params, &batch)?;
            params = model::sgd_step(&params, &grad, lr)?;
        }
    }
    Ok(params)
}

struct ClientOutcome {
    update: ClientUpdate,
    dissimilarity: Option<f64>,
}

/// Everything needed to run rounds: data, clients and the current global model.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub spec: ModelSpec,
    pub clients: Vec<ClientState>,
    pub test: Dataset,
    pub malicious: BTreeSet<usize>,
    pub global: ParamVector,
    pub initial: ParamVector,
    /// Rounds completed so far.
    pub round: usize,
    loss_trace: Vec<f64>,
    grad_norm_trace: Vec<f64>,
}

/// Output of one round.
#[derive(Debug, Clone)]
pub struct RoundOutput {
    pub metrics: RoundMetrics,
    pub diagnostics: Option<DiagnosticsReport>,
}

impl Experiment {
    pub fn setup(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let (train, test) = load_datasets(config)?;
        Self::from_datasets(config, train, test)
    }

    pub fn from_datasets(config: &ExperimentConfig, train: Dataset, test: Dataset) -> Result<Self> {
        config.validate()?;
        if test.is_empty() {
            return Err(Error::config("dataset", "test set is empty"));
        }
        let classes = train.num_classes.max(test.num_classes);
        let spec = match config.model.kind {
            ModelKind::SoftmaxRegression => ModelSpec::softmax_regression(train.input_dim(), classes)?,
            ModelKind::Mlp => ModelSpec::mlp(train.input_dim(), config.model.hidden_dim, classes)?,
        };
        let p = &config.partition;
        let plan = PartitionPlan {
            kind: p.kind,
            num_clients: config.num_clients,
            shards_per_client: p.shards_per_client,
            alpha: p.alpha,
            seed: p
                .seed
                .unwrap_or_else(|| derive_seed(config.master_seed, Stream::Partition, 0, 0)),
        };
        let parts = data::partition(&train, &plan).map_err(|e| Error::config("partition", e.to_string()))?;
        let malicious = attacks::select_malicious(
            config.num_clients,
            &config.attack,
            derive_seed(config.master_seed, Stream::Attack, 0, 0),
        );
        let clients = parts
            .into_iter()
            .enumerate()
            .map(|(id, part)| {
                let bad = malicious.contains(&id);
                let data = if bad && config.attack.kind == AttackKind::LabelFlip {
                    attacks::flip_labels(&part, config.attack.flip_mode, classes)?
                } else {
                    part
                };
                Ok(ClientState {
                    id,
                    data,
                    malicious: bad,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let global = model::init_params(&spec, &mut stream_rng(config.master_seed, Stream::Init, 0, 0));
        Ok(Experiment {
            config: config.clone(),
            spec,
            clients,
            test,
            malicious,
            initial: global.clone(),
            global,
            round: 0,
            loss_trace: Vec::new(),
            grad_norm_trace: Vec::new(),
        })
    }

    fn scores_needed(&self) -> bool {
        self.config.aggregator == AggregatorKind::ClusterGuard
    }

    fn process_client(&self, client: &ClientState, round: usize, lr: f64) -> Result<ClientOutcome> {
        let cfg = &self.config;
        let seed = cfg.master_seed;
        let (id, r) = (client.id as u64, round as u64);
        let mut params = client_training(
            &self.spec,
            &self.global,
            &client.data,
            cfg,
            lr,
            &mut stream_rng(seed, Stream::Training, id, r),
        )?;
        if client.malicious && cfg.attack.kind == AttackKind::GaussianUpdate {
            params = attacks::poison_update(&params, &cfg.attack, &mut stream_rng(seed, Stream::Poison, id, r))?;
        }
        let dissimilarity = if self.scores_needed() {
            let n = client.data.len();
            let eval = if n > cfg.eval_cap {
                let mut idx =
                    rand::seq::index::sample(&mut stream_rng(seed, Stream::Evaluation, id, r), n, cfg.eval_cap)
                        .into_vec();
                idx.sort_unstable();
                client.data.subset(&idx)
            } else {
                client.data.clone()
            };
            Some(score_with_mode(
                &self.spec,
                &self.global,
                &params,
                &eval.batch(),
                cfg.dissimilarity_mode,
            )?)
        } else {
            None
        };
        Ok(ClientOutcome {
            update: ClientUpdate {
                client_id: client.id,
                params,
                local_size: client.data.len(),
            },
            dissimilarity,
        })
    }

    /// Size weights and per-client loss and gradient at the current global model.
    fn training_objective(&self) -> Result<(Vec<f64>, Vec<f64>, Vec<ParamVector>)> {
        let total: usize = self.clients.iter().map(|c| c.data.len()).sum();
        let weights: Vec<f64> = self
            .clients
            .iter()
            .map(|c| c.data.len() as f64 / total as f64)
            .collect();
        let (losses, grads): (Vec<f64>, Vec<ParamVector>) = self
            .clients
            .par_iter()
            .map(|c| model::loss_and_gradient(&self.spec, &self.global, &c.data.batch()))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip();
        Ok((weights, losses, grads))
    }

    fn weighted_train_loss(&self, params: &ParamVector, weights: &[f64]) -> Result<f64> {
        let losses = self
            .clients
            .par_iter()
            .map(|c| model::loss(&self.spec, params, &c.data.batch()))
            .collect::<Result<Vec<f64>>>()?;
        Ok(losses.iter().zip(weights).map(|(l, w)| l * w).sum())
    }

    /// Runs the next round and advances the global model.
    pub fn run_round(&mut self) -> Result<RoundOutput> {
        let round = self.round + 1;
        self.run_round_inner(round).map_err(|e| Error::Round {
            round,
            source: Box::new(e),
        })
    }

    fn run_round_inner(&mut self, round: usize) -> Result<RoundOutput> {
        let started = Instant::now();
        let cfg = &self.config;
        let seed = cfg.master_seed;
        let lr = cfg.learning_rate().at(round);
        let selected = select_clients(
            cfg.num_clients,
            cfg.selection_prob,
            &mut stream_rng(seed, Stream::Selection, round as u64, 0),
        )?;

        let before = if cfg.diagnostics.enabled {
            Some(self.training_objective()?)
        } else {
            None
        };

        let outcomes = selected
            .par_iter()
            .map(|&k| self.process_client(&self.clients[k], round, lr))
            .collect::<Result<Vec<_>>>()?;
        let updates: Vec<ClientUpdate> = outcomes.iter().map(|o| o.update.clone()).collect();

        let mut records: Vec<ClientRoundRecord> = self
            .clients
            .iter()
            .map(|c| ClientRoundRecord {
                client_id: c.id,
                selected: false,
                malicious: c.malicious,
                dissimilarity: None,
                cluster: None,
                raw_score: None,
                weight: None,
            })
            .collect();
        for o in &outcomes {
            let rec = &mut records[o.update.client_id];
            rec.selected = true;
            rec.dissimilarity = o.dissimilarity;
        }

        let cluster_seed = derive_seed(seed, Stream::Clustering, round as u64, 0);
        let mut next = match &cfg.aggregator {
            AggregatorKind::ClusterGuard => {
                let points: Vec<FeaturePoint> = outcomes
                    .iter()
                    .map(|o| FeaturePoint {
                        client_id: o.update.client_id,
                        coords: vec![
                            o.dissimilarity.expect("scores computed for clusterguard"),
                            o.update.local_size as f64,
                        ],
                    })
                    .collect();
                let standardized = standardize(&points)?;
                let k = cfg.cluster_count.min(standardized.len());
                let clusters = kmeans(&standardized, k, cluster_seed, KMEANS_MAX_ITER, KMEANS_TOL)?;
                let raw = confidence_scores(&clusters, &standardized)?;
                let weights = softmax_weights(&raw, cfg.softmax_temperature)?;
                for p in &standardized {
                    let rec = &mut records[p.client_id];
                    rec.cluster = clusters.cluster_of(p.client_id);
                    rec.raw_score = Some(weights.raw_scores[&p.client_id]);
                    rec.weight = Some(weights.weights[&p.client_id]);
                }
                clusterguard_aggregate(&self.global, &updates, &weights)?
            }
            baseline => baseline.apply(&updates, cluster_seed)?,
        };

        let mut noise_terms = NoiseTerms::default();
        if cfg.noise_sigma > 0.0 {
            let normal = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Argument(e.to_string()))?;
            let mut rng = stream_rng(seed, Stream::Noise, round as u64, 0);
            let noise = ParamVector::new((0..next.len()).map(|_| normal.sample(&mut rng)).collect());
            if let Some((_, _, grads)) = &before {
                let weights = self.size_weights();
                let d = diagnostics::dissimilarity_from_gradients(grads, &weights)?;
                noise_terms = NoiseTerms {
                    inner_abs: d.global_gradient.dot(&noise).abs(),
                    norm_sq: noise.norm_sq(),
                };
            }
            next.add_scaled(1.0, &noise);
        }
        if !next.is_finite() {
            return Err(Error::Internal("aggregated model has non-finite entries".into()));
        }

        let report = match before {
            Some((weights, losses, grads)) => {
                Some(self.diagnose(round, lr, &next, &weights, &losses, &grads, noise_terms)?)
            }
            None => None,
        };

        let (test_acc, test_loss) = model::evaluate(&self.spec, &next, &self.test.batch())?;
        self.global = next;
        self.round = round;
        let elapsed_ms = self.config.record_timing.then(|| started.elapsed().as_secs_f64() * 1e3);
        Ok(RoundOutput {
            metrics: RoundMetrics {
                round,
                selected,
                clients: records,
                test_acc,
                test_loss,
                elapsed_ms,
            },
            diagnostics: report,
        })
    }

    fn size_weights(&self) -> Vec<f64> {
        let total: usize = self.clients.iter().map(|c| c.data.len()).sum();
        self.clients
            .iter()
            .map(|c| c.data.len() as f64 / total as f64)
            .collect()
    }

    #[allow(clippy::too_many_arguments)]
    fn diagnose(
        &mut self,
        round: usize,
        lr: f64,
        next: &ParamVector,
        weights: &[f64],
        losses: &[f64],
        grads: &[ParamVector],
        noise: NoiseTerms,
    ) -> Result<DiagnosticsReport> {
        let d_cfg = self.config.diagnostics.clone();
        let gd = diagnostics::dissimilarity_from_gradients(grads, weights)?;
        let u = diagnostics::compute_u(gd.b_squared, gd.grad_norm_sq).ok();
        let seed = self.config.master_seed;
        let m_estimate = self
            .clients
            .par_iter()
            .map(|c| {
                diagnostics::estimate_lipschitz(
                    &self.spec,
                    &self.global,
                    &c.data.batch(),
                    d_cfg.lipschitz_probes,
                    d_cfg.lipschitz_radius,
                    &mut stream_rng(seed, Stream::Diagnostics, c.id as u64, round as u64),
                )
            })
            .collect::<Result<Vec<f64>>>()?
            .into_iter()
            .fold(0.0, f64::max);
        let loss_before: f64 = losses.iter().zip(weights).map(|(l, w)| l * w).sum();
        let loss_after = self.weighted_train_loss(next, weights)?;
        self.loss_trace.push(loss_before);
        self.grad_norm_trace.push(gd.grad_norm_sq);
        let constants = match u {
            Some(u) => Some(diagnostics::lemma2_bound(
                u,
                m_estimate,
                d_cfg.gamma,
                lr,
                self.config.selection_prob,
                gd.grad_norm_sq,
                noise,
            )?),
            None => None,
        };
        let pick = |f: fn(&diagnostics::BoundConstants) -> f64| constants.as_ref().map_or(f64::NAN, f);
        Ok(DiagnosticsReport {
            round,
            b_squared: gd.b_squared,
            grad_norm_sq: gd.grad_norm_sq,
            u,
            m_estimate,
            mu_estimate: None,
            gamma: d_cfg.gamma,
            a1: pick(|c| c.a1),
            a2: pick(|c| c.a2),
            a3: pick(|c| c.a3),
            lhs_loss_delta: loss_after - loss_before,
            rhs_bound: pick(|c| c.rhs),
        })
    }

    /// PL estimate from the recorded loss trace against a centrally trained reference.
    pub fn pl_estimate(&self) -> Result<Option<f64>> {
        let steps = self.config.diagnostics.pl_reference_steps;
        if steps == 0 || self.loss_trace.is_empty() {
            return Ok(None);
        }
        let parts: Vec<Dataset> = self.clients.iter().map(|c| c.data.clone()).collect();
        let pooled = Dataset::concat(&parts)?;
        let reference = diagnostics::reference_loss(
            &self.spec,
            &self.initial,
            &pooled.batch(),
            steps,
            self.config.learning_rate().at(1),
        )?;
        let floor = self.loss_trace.iter().copied().fold(reference, f64::min);
        diagnostics::estimate_pl_constant(&self.loss_trace, &self.grad_norm_trace, floor).map(Some)
    }
}

/// Process-level knobs that do not change results.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Worker threads for client training; defaults to the rayon default.
    pub threads: Option<usize>,
    /// Where to write metrics, summary, diagnostics and checkpoints.
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub config: ExperimentConfig,
    pub malicious: BTreeSet<usize>,
    pub rounds: Vec<RoundMetrics>,
    pub diagnostics: Vec<DiagnosticsReport>,
    pub final_params: ParamVector,
    pub mu_estimate: Option<f64>,
}

/// Runs every round of an experiment, writing artifacts when `out_dir` is set.
pub fn run_experiment(config: &ExperimentConfig, options: &RunOptions) -> Result<ExperimentOutcome> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = options.threads {
        if n == 0 {
            return Err(Error::config("threads", "must be at least 1"));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Internal(format!("cannot start worker pool: {e}")))?;
    pool.install(|| run_in_pool(config, options))
}

fn run_in_pool(config: &ExperimentConfig, options: &RunOptions) -> Result<ExperimentOutcome> {
    let mut experiment = Experiment::setup(config)?;
    if let Some(dir) = &options.out_dir {
        fs::create_dir_all(dir)?;
    }
    let mut rounds = Vec::with_capacity(config.rounds);
    let mut reports = Vec::new();
    for _ in 0..config.rounds {
        let out = experiment.run_round()?;
        if let (Some(dir), Some(every)) = (&options.out_dir, config.checkpoint_every) {
            if out.metrics.round % every == 0 {
                let ckpt = dir.join("checkpoints");
                fs::create_dir_all(&ckpt)?;
                let file = fs::File::create(ckpt.join(format!("round_{:04}.bin", out.metrics.round)))?;
                experiment.global.write_to(std::io::BufWriter::new(file))?;
            }
        }
        rounds.push(out.metrics);
        reports.extend(out.diagnostics);
    }
    let mu_estimate = experiment.pl_estimate()?;
    let outcome = ExperimentOutcome {
        config: config.clone(),
        malicious: experiment.malicious.clone(),
        rounds,
        diagnostics: reports,
        final_params: experiment.global.clone(),
        mu_estimate,
    };
    if let Some(dir) = &options.out_dir {
        outcome.write_outputs(dir)?;
    }
    Ok(outcome)
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn finite_or_empty(v: f64) -> String {
    if v.is_finite() {
        v.to_string()
    } else {
        String::new()
    }
}

impl ExperimentOutcome {
    pub fn final_accuracy(&self) -> f64 {
        self.rounds.last().map_or(f64::NAN, |r| r.test_acc)
    }

    pub fn final_loss(&self) -> f64 {
        self.rounds.last().map_or(f64::NAN, |r| r.test_loss)
    }

    /// Mean of [`RoundMetrics::malicious_weight_ratio`] over rounds `>= from_round`.
    pub fn mean_malicious_weight_ratio(&self, from_round: usize) -> Option<f64> {
        let ratios: Vec<f64> = self
            .rounds
            .iter()
            .filter(|r| r.round >= from_round)
            .filter_map(RoundMetrics::malicious_weight_ratio)
            .collect();
        (!ratios.is_empty()).then(|| ratios.iter().sum::<f64>() / ratios.len() as f64)
    }

    /// Fraction of rounds in which clusters split malicious from honest clients.
    pub fn separation_rate(&self) -> Option<f64> {
        let flags: Vec<bool> = self
            .rounds
            .iter()
            .filter_map(RoundMetrics::clusters_separate_malicious)
            .collect();
        (!flags.is_empty()).then(|| flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64)
    }

    pub fn metrics_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "round",
            "client_id",
            "selected",
            "dissimilarity",
            "cluster",
            "raw_score",
            "weight",
            "test_acc",
            "test_loss",
            "ms",
        ])
        .map_err(csv_error)?;
        for r in &self.rounds {
            for c in &r.clients {
                w.write_record([
                    r.round.to_string(),
                    c.client_id.to_string(),
                    u8::from(c.selected).to_string(),
                    opt(c.dissimilarity),
                    opt(c.cluster),
                    opt(c.raw_score),
                    opt(c.weight),
                    String::new(),
                    String::new(),
                    String::new(),
                ])
                .map_err(csv_error)?;
            }
            w.write_record([
                r.round.to_string(),
                "-1".to_string(),
                r.selected.len().to_string(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                r.test_acc.to_string(),
                r.test_loss.to_string(),
                opt(r.elapsed_ms),
            ])
            .map_err(csv_error)?;
        }
        w.into_inner().map_err(|e| Error::Internal(e.to_string()))
    }

    pub fn diagnostics_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "round",
            "B_squared",
            "grad_norm_sq",
            "U",
            "M_estimate",
            "A1",
            "A2",
            "A3",
            "lhs_loss_delta",
            "rhs_bound",
            "bound_holds",
        ])
        .map_err(csv_error)?;
        for d in &self.diagnostics {
            w.write_record([
                d.round.to_string(),
                d.b_squared.to_string(),
                d.grad_norm_sq.to_string(),
                opt(d.u),
                d.m_estimate.to_string(),
                finite_or_empty(d.a1),
                finite_or_empty(d.a2),
                finite_or_empty(d.a3),
                d.lhs_loss_delta.to_string(),
                finite_or_empty(d.rhs_bound),
                diagnostics::check_round_bound(d).to_string(),
            ])
            .map_err(csv_error)?;
        }
        w.into_inner().map_err(|e| Error::Internal(e.to_string()))
    }

    pub fn summary(&self) -> serde_json::Value {
        let best = self.rounds.iter().map(|r| r.test_acc).fold(f64::NEG_INFINITY, f64::max);
        serde_json::json!({
            "config": self.config,
            "aggregator": self.config.aggregator.to_string(),
            "aggregator_name": self.config.aggregator.display_name(),
            "attack": self.config.attack.kind.as_str(),
            "malicious_clients": self.malicious,
            "rounds": self.rounds.len(),
            "final_test_acc": self.final_accuracy(),
            "final_test_loss": self.final_loss(),
            "best_test_acc": best,
            "malicious_weight_ratio": self.mean_malicious_weight_ratio(5),
            "cluster_separation_rate": self.separation_rate(),
            "bound_holds_all_rounds": (!self.diagnostics.is_empty())
                .then(|| self.diagnostics.iter().all(diagnostics::check_round_bound)),
            "mu_estimate": self.mu_estimate,
        })
    }

    pub fn write_outputs(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("metrics.csv"), self.metrics_csv()?)?;
        fs::write(dir.join("summary.json"), serde_json::to_vec_pretty(&self.summary())?)?;
        if !self.diagnostics.is_empty() {
            fs::write(dir.join("diagnostics.csv"), self.diagnostics_csv()?)?;
        }
        let file = fs::File::create(dir.join("final_model.bin"))?;
        self.final_params.write_to(std::io::BufWriter::new(file))
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::Internal(format!("csv write failed: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::AttackConfig;
    use crate::rng::seeded;
    use ndarray::Array2;

    fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            dataset: DatasetConfig::Synthetic {
                num_classes: 3,
                input_dim: 4,
                samples_per_class: 20,
                test_samples_per_class: 10,
                spread: 0.1,
                seed: Some(1),
            },
            num_clients: 4,
            rounds: 3,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn test_select_clients() {
        assert_eq!(
            select_clients(7, 1.0, &mut seeded(1)).unwrap(),
            (0..7).collect::<Vec<_>>()
        );
        let big = select_clients(10_000, 0.5, &mut seeded(2)).unwrap();
        assert!((big.len() as f64 - 5000.0).abs() < 150.0);
        for s in 0..50 {
            assert!(!select_clients(3, 1e-9, &mut seeded(s)).unwrap().is_empty());
        }
        assert!(select_clients(3, 0.0, &mut seeded(1)).is_err());
    }

    #[test]
    fn test_client_training_reductions() {
        let spec = ModelSpec::softmax_regression(2, 2).unwrap();
        let data = Dataset::new(
            Array2::from_shape_vec((3, 2), vec![0.1, 0.9, 0.8, 0.2, 0.5, 0.5]).unwrap(),
            vec![0, 1, 1],
            2,
        )
        .unwrap();
        let global = model::init_params(&spec, &mut seeded(4));
        let zero = ExperimentConfig {
            local_passes: 0,
            ..ExperimentConfig::default()
        };
        assert_eq!(
            client_training(&spec, &global, &data, &zero, 0.1, &mut seeded(1)).unwrap(),
            global
        );

        let one = ExperimentConfig {
            local_passes: 1,
            batch_size: 10,
            ..ExperimentConfig::default()
        };
        let out = client_training(&spec, &global, &data, &one, 0.1, &mut seeded(1)).unwrap();
        // Shuffling only permutes rows; the mean gradient is order-independent.
        let grad = model::gradient(&spec, &global, &data.batch()).unwrap();
        let expected = model::sgd_step(&global, &grad, 0.1).unwrap();
        for (a, b) in out.as_slice().iter().zip(expected.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
        let again = client_training(&spec, &global, &data, &one, 0.1, &mut seeded(1)).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn test_fedavg_round_is_mean_of_clients() {
        let cfg = ExperimentConfig {
            aggregator: AggregatorKind::FedAvg,
            num_clients: 2,
            ..tiny_config()
        };
        let mut exp = Experiment::setup(&cfg).unwrap();
        assert_eq!(exp.clients[0].data.len(), exp.clients[1].data.len());
        let trained: Vec<ParamVector> = exp
            .clients
            .iter()
            .map(|c| {
                client_training(
                    &exp.spec,
                    &exp.global,
                    &c.data,
                    &cfg,
                    cfg.learning_rate().at(1),
                    &mut stream_rng(cfg.master_seed, Stream::Training, c.id as u64, 1),
                )
                .unwrap()
            })
            .collect();
        exp.run_round().unwrap();
        for (j, v) in exp.global.as_slice().iter().enumerate() {
            let mean = 0.5 * (trained[0].as_slice()[j] + trained[1].as_slice()[j]);
            assert!((v - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn test_identical_clients_get_uniform_weights() {
        let base = data::generate_synthetic(3, 4, 10, 0.1, 2).unwrap();
        let train = Dataset::concat(&[base.clone(), base.clone(), base.clone()]).unwrap();
        let cfg = ExperimentConfig {
            num_clients: 3,
            rounds: 1,
            batch_sample_prob: 1.0,
            batch_size: 1000,
            ..tiny_config()
        };
        let mut exp = Experiment::from_datasets(&cfg, train, base.clone()).unwrap();
        for c in &mut exp.clients {
            c.data = base.clone();
        }
        let out = exp.run_round().unwrap();
        let scores: Vec<f64> = out.metrics.clients.iter().map(|c| c.dissimilarity.unwrap()).collect();
        assert!(scores.iter().all(|s| (s - scores[0]).abs() < 1e-12));
        for c in &out.metrics.clients {
            assert_eq!(c.cluster, Some(0));
            assert!((c.weight.unwrap() - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn test_rerun_is_byte_identical() {
        let cfg = ExperimentConfig {
            attack: AttackConfig {
                kind: AttackKind::GaussianUpdate,
                malicious_fraction: 0.25,
                ..AttackConfig::default()
            },
            ..tiny_config()
        };
        let a = run_experiment(
            &cfg,
            &RunOptions {
                threads: Some(1),
                out_dir: None,
            },
        )
        .unwrap();
        let b = run_experiment(
            &cfg,
            &RunOptions {
                threads: Some(3),
                out_dir: None,
            },
        )
        .unwrap();
        assert_eq!(a.metrics_csv().unwrap(), b.metrics_csv().unwrap());
        assert_eq!(a.final_params, b.final_params);
    }

    #[test]
    fn test_round_errors_name_the_round() {
        let cfg = ExperimentConfig {
            aggregator: AggregatorKind::Krum { f: Some(3) },
            ..tiny_config()
        };
        let err = run_experiment(&cfg, &RunOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Round { round: 1, .. }), "{err}");
    }

    #[test]
    fn test_diagnostics_do_not_change_the_model() {
        let off = tiny_config();
        let mut on = tiny_config();
        on.diagnostics.enabled = true;
        on.diagnostics.pl_reference_steps = 50;
        let a = run_experiment(&off, &RunOptions::default()).unwrap();
        let b = run_experiment(&on, &RunOptions::default()).unwrap();
        assert_eq!(a.final_params, b.final_params);
        assert_eq!(b.diagnostics.len(), 3);
        assert!(b.mu_estimate.unwrap() >= 0.0);
        assert!(b.diagnostics.iter().all(|d| d.u.unwrap() >= 1.0));
    }

    #[test]
    fn test_outputs_written() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config();
        cfg.checkpoint_every = Some(2);
        cfg.diagnostics.enabled = true;
        let outcome = run_experiment(
            &cfg,
            &RunOptions {
                threads: Some(2),
                out_dir: Some(dir.path().to_path_buf()),
            },
        )
        .unwrap();
        let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(metrics.lines().count(), 1 + 3 * (4 + 1));
        assert!(metrics
            .starts_with("round,client_id,selected,dissimilarity,cluster,raw_score,weight,test_acc,test_loss,ms"));
        let summary: serde_json::Value =
            serde_json::from_slice(&fs::read(dir.path().join("summary.json")).unwrap()).unwrap();
        assert_eq!(summary["final_test_acc"].as_f64().unwrap(), outcome.final_accuracy());
        assert!(dir.path().join("diagnostics.csv").exists());
        let ckpt = fs::read(dir.path().join("checkpoints/round_0002.bin")).unwrap();
        assert_eq!(
            ParamVector::from_bytes(&ckpt).unwrap().len(),
            outcome.final_params.len()
        );
        assert!(!dir.path().join("checkpoints/round_0003.bin").exists());
    }

    #[test]
    fn test_label_flip_applied_at_setup() {
        let cfg = ExperimentConfig {
            attack: AttackConfig {
                kind: AttackKind::LabelFlip,
                malicious_fraction: 0.5,
                ..AttackConfig::default()
            },
            ..tiny_config()
        };
        let exp = Experiment::setup(&cfg).unwrap();
        assert_eq!(exp.malicious.len(), 2);
        let clean = Experiment::setup(&tiny_config()).unwrap();
        for (a, b) in exp.clients.iter().zip(&clean.clients) {
            assert_eq!(a.data.features, b.data.features);
            assert_eq!(a.data.labels != b.data.labels, a.malicious);
        }
    }
}
