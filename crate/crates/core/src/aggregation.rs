//! Server-side aggregation rules.
//!
//! Every rule sorts its input by `client_id` before doing arithmetic, so the
//! result does not depend on the order in which updates arrive. Ties are
//! always broken towards the lowest client id.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::clustering::kmeans_raw;
use crate::confidence::ConfidenceWeights;
use crate::error::{Error, Result};
use crate::model::ParamVector;
use crate::vecops::{distance, distance_sq, median_in_place, weighted_mean};

/// Distance below which a Weiszfeld iterate counts as sitting on a data point.
const COINCIDENCE_EPS: f64 = 1e-12;
const COINCIDENCE_NUDGE: f64 = 1e-9;

/// A post-training local model submitted by one client.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub params: ParamVector,
    pub local_size: usize,
}

/// Aggregation rule with its parameters.
///
/// Parsed from `name[:param[:param]]`, for example `trimmed-mean:0.2`,
/// `krum:2` or `autogm:1e-6:100:3.0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum AggregatorKind {
    FedAvg,
    CoordMedian,
    TrimmedMean {
        beta: f64,
    },
    /// `None` selects `f = ceil(0.2 n)` at call time.
    Krum {
        f: Option<usize>,
    },
    GeoMed {
        tol: f64,
        max_iter: usize,
    },
    AutoGm {
        tol: f64,
        max_iter: usize,
        z: f64,
    },
    ClusteredAvg,
    ClusterGuard,
}

pub const DEFAULT_TRIM_BETA: f64 = 0.2;
pub const DEFAULT_GEOMED_TOL: f64 = 1e-6;
pub const DEFAULT_GEOMED_MAX_ITER: usize = 100;
pub const DEFAULT_AUTOGM_Z: f64 = 3.0;

impl AggregatorKind {
    pub fn parse(text: &str) -> Result<Self> {
        let mut parts = text.trim().split(':');
        let name = parts.next().unwrap_or_default();
        let params: Vec<&str> = parts.collect();
        let bad = |msg: String| Error::config("aggregator", msg);
        let max_params = |n: usize| {
            if params.len() > n {
                Err(bad(format!("`{name}` takes at most {n} parameter(s), got `{text}`")))
            } else {
                Ok(())
            }
        };
        let float = |i: usize, default: f64| -> Result<f64> {
            params.get(i).map_or(Ok(default), |p| {
                p.parse::<f64>()
                    .map_err(|_| bad(format!("cannot parse `{p}` as a number in `{text}`")))
            })
        };
        let int = |i: usize, default: usize| -> Result<usize> {
            params.get(i).map_or(Ok(default), |p| {
                p.parse::<usize>()
                    .map_err(|_| bad(format!("cannot parse `{p}` as a count in `{text}`")))
            })
        };
        let kind = match name {
            "fedavg" => {
                max_params(0)?;
                AggregatorKind::FedAvg
            }
            "coord-median" | "median" => {
                max_params(0)?;
                AggregatorKind::CoordMedian
            }
            "trimmed-mean" => {
                max_params(1)?;
                AggregatorKind::TrimmedMean {
                    beta: float(0, DEFAULT_TRIM_BETA)?,
                }
            }
            "krum" => {
                max_params(1)?;
                AggregatorKind::Krum {
                    f: params.first().map(|_| int(0, 0)).transpose()?,
                }
            }
            "geomed" => {
                max_params(2)?;
                AggregatorKind::GeoMed {
                    tol: float(0, DEFAULT_GEOMED_TOL)?,
                    max_iter: int(1, DEFAULT_GEOMED_MAX_ITER)?,
                }
            }
            "autogm" => {
                max_params(3)?;
                AggregatorKind::AutoGm {
                    tol: float(0, DEFAULT_GEOMED_TOL)?,
                    max_iter: int(1, DEFAULT_GEOMED_MAX_ITER)?,
                    z: float(2, DEFAULT_AUTOGM_Z)?,
                }
            }
            "clustered-avg" | "clustering" => {
                max_params(0)?;
                AggregatorKind::ClusteredAvg
            }
            "clusterguard" => {
                max_params(0)?;
                AggregatorKind::ClusterGuard
            }
            other => return Err(bad(format!("unknown aggregator `{other}`"))),
        };
        kind.validate()?;
        Ok(kind)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::config("aggregator", msg));
        match *self {
            AggregatorKind::TrimmedMean { beta } if !(0.0..0.5).contains(&beta) => {
                bad(format!("trimmed-mean beta must lie in [0, 0.5), got {beta}"))
            }
            AggregatorKind::GeoMed { tol, max_iter } | AggregatorKind::AutoGm { tol, max_iter, .. }
                if !(tol >= 0.0) || max_iter < 1 =>
            {
                bad("geometric median needs tol >= 0 and max_iter >= 1".into())
            }
            AggregatorKind::AutoGm { z, .. } if !(z > 0.0) => bad(format!("autogm z must be positive, got {z}")),
            _ => Ok(()),
        }
    }

    /// Row label used in comparison tables.
    pub fn display_name(&self) -> &'static str {
        match self {
            AggregatorKind::FedAvg => "FedAvg",
            AggregatorKind::CoordMedian => "Median",
            AggregatorKind::TrimmedMean { .. } => "Trimmed Mean",
            AggregatorKind::Krum { .. } => "Krum",
            AggregatorKind::GeoMed { .. } => "GeoMed",
            AggregatorKind::AutoGm { .. } => "AutoGM",
            AggregatorKind::ClusteredAvg => "Clustering",
            AggregatorKind::ClusterGuard => "ClusterGuardFL",
        }
    }

    /// Applies a baseline rule. ClusterGuard needs confidence weights and
    /// goes through [`clusterguard_aggregate`] instead.
    pub fn apply(&self, updates: &[ClientUpdate], seed: u64) -> Result<ParamVector> {
        match *self {
            AggregatorKind::FedAvg => fedavg(updates),
            AggregatorKind::CoordMedian => coord_median(updates),
            AggregatorKind::TrimmedMean { beta } => trimmed_mean(updates, beta),
            AggregatorKind::Krum { f } => krum(updates, f.unwrap_or_else(|| default_krum_f(updates.len()))),
            AggregatorKind::GeoMed { tol, max_iter } => geometric_median(updates, tol, max_iter),
            AggregatorKind::AutoGm { tol, max_iter, z } => auto_gm(updates, tol, max_iter, z),
            AggregatorKind::ClusteredAvg => clustered_avg(updates, seed),
            AggregatorKind::ClusterGuard => Err(Error::Argument(
                "clusterguard aggregation needs confidence weights".into(),
            )),
        }
    }
}

impl fmt::Display for AggregatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AggregatorKind::FedAvg => write!(f, "fedavg"),
            AggregatorKind::CoordMedian => write!(f, "coord-median"),
            AggregatorKind::TrimmedMean { beta } => write!(f, "trimmed-mean:{beta}"),
            AggregatorKind::Krum { f: None } => write!(f, "krum"),
            AggregatorKind::Krum { f: Some(n) } => write!(f, "krum:{n}"),
            AggregatorKind::GeoMed { tol, max_iter } => write!(f, "geomed:{tol:e}:{max_iter}"),
            AggregatorKind::AutoGm { tol, max_iter, z } => write!(f, "autogm:{tol:e}:{max_iter}:{z}"),
            AggregatorKind::ClusteredAvg => write!(f, "clustered-avg"),
            AggregatorKind::ClusterGuard => write!(f, "clusterguard"),
        }
    }
}

impl TryFrom<String> for AggregatorKind {
    type Error = Error;

    fn try_from(value: String) -> Result<Self> {
        AggregatorKind::parse(&value)
    }
}

impl From<AggregatorKind> for String {
    fn from(kind: AggregatorKind) -> String {
        kind.to_string()
    }
}

/// `ceil(0.2 n)`, the Byzantine count matching a 20% threat level.
pub fn default_krum_f(n: usize) -> usize {
    (n as f64 * 0.2 - 1e-9).ceil().max(0.0) as usize
}

/// Sorted-by-id view after shape checks.
fn canonical(updates: &[ClientUpdate]) -> Result<Vec<&ClientUpdate>> {
    let first = updates
        .first()
        .ok_or_else(|| Error::Argument("no client updates to aggregate".into()))?;
    let dim = first.params.len();
    if let Some(u) = updates.iter().find(|u| u.params.len() != dim) {
        return Err(Error::Shape(format!(
            "client {} sent {} parameters, expected {dim}",
            u.client_id,
            u.params.len()
        )));
    }
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    Ok(sorted)
}

fn slices<'a>(updates: &'a [&'a ClientUpdate]) -> impl Iterator<Item = &'a [f64]> + 'a {
    updates.iter().map(|u| u.params.as_slice())
}

/// Size-weighted mean of the client models.
pub fn fedavg(updates: &[ClientUpdate]) -> Result<ParamVector> {
    let sorted = canonical(updates)?;
    let weights: Vec<f64> = sorted.iter().map(|u| u.local_size as f64).collect();
    if weights.iter().sum::<f64>() <= 0.0 {
        return Err(Error::Argument("total local size is zero".into()));
    }
    let dim = sorted[0].params.len();
    Ok(weighted_mean(slices(&sorted), &weights, dim).into())
}

fn per_coordinate(updates: &[&ClientUpdate], mut reduce: impl FnMut(&mut [f64]) -> f64) -> ParamVector {
    let dim = updates[0].params.len();
    let mut column = vec![0.0; updates.len()];
    let out = (0..dim)
        .map(|j| {
            for (c, u) in column.iter_mut().zip(updates) {
                *c = u.params.as_slice()[j];
            }
            reduce(&mut column)
        })
        .collect::<Vec<f64>>();
    out.into()
}

/// Per-coordinate median.
pub fn coord_median(updates: &[ClientUpdate]) -> Result<ParamVector> {
    let sorted = canonical(updates)?;
    Ok(per_coordinate(&sorted, median_in_place))
}

/// Per-coordinate mean after dropping the `floor(beta n)` smallest and largest values.
pub fn trimmed_mean(updates: &[ClientUpdate], beta: f64) -> Result<ParamVector> {
    let sorted = canonical(updates)?;
    if !(0.0..0.5).contains(&beta) {
        return Err(Error::Argument(format!("beta must lie in [0, 0.5), got {beta}")));
    }
    let n = sorted.len();
    let m = (beta * n as f64 + 1e-9).floor() as usize;
    if 2 * m >= n {
        return Err(Error::Argument(format!(
            "trimming {m} from each end leaves nothing of {n}"
        )));
    }
    Ok(per_coordinate(&sorted, |col| {
        col.sort_by(f64::total_cmp);
        let kept = &col[m..n - m];
        kept.iter().sum::<f64>() / kept.len() as f64
    }))
}

/// Krum score of every update (in client-id order): the sum of squared
/// distances to its `n - f - 2` nearest peers. Only needs `n >= f + 3`;
/// [`krum`] additionally enforces `n >= 2f + 3`.
pub fn krum_scores(updates: &[ClientUpdate], f: usize) -> Result<Vec<(usize, f64)>> {
    let sorted = canonical(updates)?;
    let n = sorted.len();
    if n < f + 3 {
        return Err(Error::Argument(format!(
            "krum scoring needs n >= f + 3, got n = {n}, f = {f}"
        )));
    }
    let neighbours = n - f - 2;
    let mut dist = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = distance_sq(sorted[i].params.as_slice(), sorted[j].params.as_slice());
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    Ok((0..n)
        .map(|i| {
            let mut others: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| dist[i][j]).collect();
            others.sort_by(f64::total_cmp);
            (sorted[i].client_id, others[..neighbours].iter().sum())
        })
        .collect())
}

/// Lowest score wins; scores arrive in id order so the first minimum is the lowest id.
pub fn krum_winner(scores: &[(usize, f64)]) -> Option<usize> {
    scores
        .iter()
        .fold(None, |best: Option<(usize, f64)>, &(id, s)| match best {
            Some((_, b)) if s >= b => best,
            _ => Some((id, s)),
        })
        .map(|(id, _)| id)
}

/// The update whose `n - f - 2` nearest neighbours are closest in squared distance.
pub fn krum(updates: &[ClientUpdate], f: usize) -> Result<ParamVector> {
    let n = updates.len();
    if n < 2 * f + 3 {
        return Err(Error::Argument(format!("krum needs n >= 2f + 3, got n = {n}, f = {f}")));
    }
    let scores = krum_scores(updates, f)?;
    let winner = krum_winner(&scores).ok_or_else(|| Error::Internal("krum produced no scores".into()))?;
    let chosen = updates
        .iter()
        .find(|u| u.client_id == winner)
        .ok_or_else(|| Error::Internal("krum winner missing".into()))?;
    Ok(chosen.params.clone())
}

/// Outcome of a Weiszfeld run.
#[derive(Debug, Clone)]
pub struct WeiszfeldResult {
    pub point: Vec<f64>,
    /// Sum of distances at the start and after every iteration.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
}

pub fn sum_of_distances(points: &[&[f64]], x: &[f64]) -> f64 {
    points.iter().map(|p| distance(p, x)).sum()
}

/// Weiszfeld iteration from the coordinate-wise mean.
pub fn weiszfeld(points: &[&[f64]], tol: f64, max_iter: usize) -> Result<WeiszfeldResult> {
    let first = points
        .first()
        .ok_or_else(|| Error::Argument("geometric median of nothing".into()))?;
    let dim = first.len();
    let mut x = weighted_mean(points.iter().copied(), &vec![1.0; points.len()], dim);
    let mut trace = vec![sum_of_distances(points, &x)];
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let mut dists: Vec<f64> = points.iter().map(|p| distance(p, &x)).collect();
        if dists.iter().any(|&d| d < COINCIDENCE_EPS) {
            if dim > 0 {
                x[0] += COINCIDENCE_NUDGE;
            }
            dists = points.iter().map(|p| distance(p, &x)).collect();
        }
        let inv: Vec<f64> = dists.iter().map(|d| 1.0 / d.max(COINCIDENCE_EPS)).collect();
        let next = weighted_mean(points.iter().copied(), &inv, dim);
        let step = distance(&next, &x);
        x = next;
        trace.push(sum_of_distances(points, &x));
        if step < tol {
            break;
        }
    }
    Ok(WeiszfeldResult {
        point: x,
        objective_trace: trace,
        iterations,
    })
}

pub fn geometric_median(updates: &[ClientUpdate], tol: f64, max_iter: usize) -> Result<ParamVector> {
    let sorted = canonical(updates)?;
    let points: Vec<&[f64]> = slices(&sorted).collect();
    Ok(weiszfeld(&points, tol, max_iter)?.point.into())
}

/// Geometric median with one outlier-pruning pass: updates farther than
/// `z` times the median distance from the first estimate are dropped and the
/// median is recomputed on the rest.
pub fn auto_gm(updates: &[ClientUpdate], tol: f64, max_iter: usize, z: f64) -> Result<ParamVector> {
    if !(z > 0.0) {
        return Err(Error::Argument(format!("z must be positive, got {z}")));
    }
    let sorted = canonical(updates)?;
    let points: Vec<&[f64]> = slices(&sorted).collect();
    let center = weiszfeld(&points, tol, max_iter)?.point;
    let radii: Vec<f64> = points.iter().map(|p| distance(p, &center)).collect();
    let cutoff = z * median_in_place(&mut radii.clone());
    let survivors: Vec<&[f64]> = points
        .iter()
        .zip(&radii)
        .filter(|(_, &r)| r <= cutoff)
        .map(|(p, _)| *p)
        .collect();
    if survivors.is_empty() || survivors.len() == points.len() {
        return Ok(center.into());
    }
    Ok(weiszfeld(&survivors, tol, max_iter)?.point.into())
}

/// Two-means over the update vectors; FedAvg over the larger cluster.
pub fn clustered_avg(updates: &[ClientUpdate], seed: u64) -> Result<ParamVector> {
    let sorted = canonical(updates)?;
    if sorted.len() < 2 {
        return Ok(sorted[0].params.clone());
    }
    let points: Vec<&[f64]> = slices(&sorted).collect();
    let ids: Vec<usize> = sorted.iter().map(|u| u.client_id).collect();
    let model = kmeans_raw(&points, &ids, 2, seed, 100, 1e-6)?;
    let sizes = model.cluster_sizes();
    // Sorted input: the first point holds the lowest client id.
    let lowest_cluster = model.assignments[0];
    let winner = (0..sizes.len())
        .max_by(|&a, &b| {
            sizes[a]
                .cmp(&sizes[b])
                .then((b == lowest_cluster).cmp(&(a == lowest_cluster)))
        })
        .expect("at least one cluster");
    let winner = if sizes[winner] == sizes[lowest_cluster] {
        lowest_cluster
    } else {
        winner
    };
    let members: Vec<ClientUpdate> = sorted
        .iter()
        .zip(&model.assignments)
        .filter(|(_, &a)| a == winner)
        .map(|(u, _)| (*u).clone())
        .collect();
    fedavg(&members)
}

/// `w_t + sum_k weight_k (w_k - w_t)`, the confidence-weighted global step.
pub fn clusterguard_aggregate(
    global: &ParamVector,
    updates: &[ClientUpdate],
    weights: &ConfidenceWeights,
) -> Result<ParamVector> {
    let sorted = canonical(updates)?;
    if sorted[0].params.len() != global.len() {
        return Err(Error::Shape(format!(
            "global model has {} parameters, updates {}",
            global.len(),
            sorted[0].params.len()
        )));
    }
    if weights.weights.len() != sorted.len() || sorted.iter().any(|u| !weights.weights.contains_key(&u.client_id)) {
        return Err(Error::Argument(
            "confidence weights do not cover exactly the update set".into(),
        ));
    }
    let total: f64 = weights.weights.values().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Argument(format!(
            "confidence weights sum to {total}, expected 1"
        )));
    }
    let mut out = global.clone();
    for u in &sorted {
        let w = weights.weights[&u.client_id];
        for ((o, &x), &g) in out
            .as_mut_slice()
            .iter_mut()
            .zip(u.params.as_slice())
            .zip(global.as_slice())
        {
            *o += w * (x - g);
        }
    }
    Ok(out)
}
