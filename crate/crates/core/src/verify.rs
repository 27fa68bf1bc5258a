//! Self-check suites comparing the fast implementations with slow,
//! independent oracles. Used by the `verify` command and by the test suites.

use rand::Rng;
use serde::Serialize;

use crate::aggregation::{krum, sum_of_distances, weiszfeld, ClientUpdate};
use crate::diagnostics::{compute_u, gradient_dissimilarity};
use crate::dissimilarity::emd_1d;
use crate::model::{self, Batch, ModelKind, ModelSpec, ParamVector};
use crate::rng::{derive_seed, seeded, Stream};
use crate::vecops::distance_sq;

/// Deliberate defects for checking that the suites catch regressions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Faults {
    pub emd_1d: bool,
}

impl Faults {
    /// Parses a fault name as accepted by `--inject-fault`.
    pub fn inject(&mut self, name: &str) -> bool {
        match name {
            "emd_1d" | "emd" => {
                self.emd_1d = true;
                true
            }
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteResult {
    pub name: &'static str,
    pub instances: usize,
    /// Largest observed error, in the suite's own units.
    pub worst_error: f64,
    pub tolerance: f64,
    /// First violating instance, with its inputs.
    pub failure: Option<String>,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.failure.is_none()
    }
}

struct Tracker {
    name: &'static str,
    tolerance: f64,
    instances: usize,
    worst: f64,
    failure: Option<String>,
}

impl Tracker {
    fn new(name: &'static str, tolerance: f64) -> Self {
        Tracker {
            name,
            tolerance,
            instances: 0,
            worst: 0.0,
            failure: None,
        }
    }

    fn record(&mut self, error: f64, describe: impl FnOnce() -> String) {
        self.instances += 1;
        if !(error <= self.worst) {
            self.worst = error;
        }
        if !(error <= self.tolerance) && self.failure.is_none() {
            self.failure = Some(format!("error {error:e} > {:e}: {}", self.tolerance, describe()));
        }
    }

    fn fail(&mut self, message: String) {
        self.instances += 1;
        if self.failure.is_none() {
            self.failure = Some(message);
        }
    }

    fn finish(self) -> SuiteResult {
        SuiteResult {
            name: self.name,
            instances: self.instances,
            worst_error: self.worst,
            tolerance: self.tolerance,
            failure: self.failure,
        }
    }
}

fn random_distribution<R: Rng + ?Sized>(rng: &mut R, bins: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..bins)
        .map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random::<f64>() })
        .collect();
    let s: f64 = raw.iter().sum();
    if s == 0.0 {
        let mut p = vec![0.0; bins];
        p[rng.random_range(0..bins)] = 1.0;
        return p;
    }
    raw.iter().map(|v| v / s).collect()
}

/// Minimum-cost transport between ordered bins by the north-west corner rule,
/// which is optimal for a convex ground cost on the line.
pub fn transport_emd(p: &[f64], q: &[f64]) -> f64 {
    let (mut supply, mut demand) = (p.to_vec(), q.to_vec());
    let (mut i, mut j, mut cost) = (0, 0, 0.0);
    while i < supply.len() && j < demand.len() {
        let moved = supply[i].min(demand[j]);
        cost += moved * (i as f64 - j as f64).abs();
        supply[i] -= moved;
        demand[j] -= moved;
        if supply[i] <= 1e-15 {
            i += 1;
        } else {
            j += 1;
        }
    }
    cost
}

pub fn emd_suite(instances: usize, seed: u64, faults: Faults) -> SuiteResult {
    let mut t = Tracker::new("emd_1d", 1e-9);
    let mut rng = seeded(derive_seed(seed, Stream::Diagnostics, 1, 0));
    for _ in 0..instances {
        let bins = rng.random_range(1..=5);
        let p = random_distribution(&mut rng, bins);
        let q = random_distribution(&mut rng, bins);
        match emd_1d(&p, &q) {
            Ok(mut fast) => {
                if faults.emd_1d {
                    fast += 1e-3;
                }
                let slow = transport_emd(&p, &q);
                t.record((fast - slow).abs(), || {
                    format!("p={p:?} q={q:?} emd_1d={fast} oracle={slow}")
                });
            }
            Err(e) => t.fail(format!("emd_1d rejected p={p:?} q={q:?}: {e}")),
        }
    }
    t.finish()
}

/// Krum by brute force: for every candidate, minimise over all neighbour subsets.
pub fn krum_oracle(values: &[Vec<f64>], f: usize) -> usize {
    let n = values.len();
    let m = n - f - 2;
    let mut best = (usize::MAX, f64::INFINITY);
    for i in 0..n {
        let others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        let mut score = f64::INFINITY;
        for mask in 0u32..(1 << others.len()) {
            if mask.count_ones() as usize != m {
                continue;
            }
            let s: f64 = others
                .iter()
                .enumerate()
                .filter(|(b, _)| (mask >> b) & 1 == 1)
                .map(|(_, &j)| distance_sq(&values[i], &values[j]))
                .sum();
            score = score.min(s);
        }
        if score < best.1 {
            best = (i, score);
        }
    }
    best.0
}

pub fn krum_suite(instances: usize, seed: u64) -> SuiteResult {
    let mut t = Tracker::new("krum", 0.0);
    let mut rng = seeded(derive_seed(seed, Stream::Diagnostics, 2, 0));
    for _ in 0..instances {
        let n = rng.random_range(3..=6);
        let f = rng.random_range(0..=(n - 3) / 2);
        let dim = rng.random_range(1..=3);
        let values: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(-5.0..5.0)).collect())
            .collect();
        let updates: Vec<ClientUpdate> = values
            .iter()
            .enumerate()
            .map(|(i, v)| ClientUpdate {
                client_id: i,
                params: ParamVector::new(v.clone()),
                local_size: 1,
            })
            .collect();
        let expected = krum_oracle(&values, f);
        match krum(&updates, f) {
            Ok(out) => {
                let err = if out.as_slice() == values[expected].as_slice() {
                    0.0
                } else {
                    1.0
                };
                t.record(err, || {
                    format!(
                        "n={n} f={f} points={values:?} krum={:?} oracle={expected}",
                        out.as_slice()
                    )
                });
            }
            Err(e) => t.fail(format!("krum failed on n={n} f={f}: {e}")),
        }
    }
    t.finish()
}

/// Weiszfeld against a 1e-3-pitch grid over the bounding box of 5 random 2-D points.
pub fn weiszfeld_suite(instances: usize, seed: u64) -> SuiteResult {
    const PITCH: f64 = 1e-3;
    let mut t = Tracker::new("weiszfeld", 1e-3);
    let mut rng = seeded(derive_seed(seed, Stream::Diagnostics, 3, 0));
    for _ in 0..instances {
        let pts: Vec<[f64; 2]> = (0..5).map(|_| [rng.random::<f64>(), rng.random::<f64>()]).collect();
        let refs: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
        let result = match weiszfeld(&refs, 1e-10, 1000) {
            Ok(r) => r,
            Err(e) => {
                t.fail(format!("weiszfeld failed on {pts:?}: {e}"));
                continue;
            }
        };
        if let Some(w) = result.objective_trace.windows(2).find(|w| w[1] > w[0] + 1e-9) {
            t.fail(format!("objective increased {} -> {} on {pts:?}", w[0], w[1]));
            continue;
        }
        let (lo_x, hi_x) = bounds(pts.iter().map(|p| p[0]));
        let (lo_y, hi_y) = bounds(pts.iter().map(|p| p[1]));
        let nx = ((hi_x - lo_x) / PITCH).ceil() as usize;
        let ny = ((hi_y - lo_y) / PITCH).ceil() as usize;
        let mut grid_best = f64::INFINITY;
        for a in 0..=nx {
            let x = (lo_x + a as f64 * PITCH).min(hi_x);
            for b in 0..=ny {
                let y = (lo_y + b as f64 * PITCH).min(hi_y);
                grid_best = grid_best.min(sum_of_distances(&refs, &[x, y]));
            }
        }
        let got = *result.objective_trace.last().expect("trace has the start point");
        t.record(got - grid_best, || {
            format!("points={pts:?} weiszfeld={got} grid={grid_best}")
        });
    }
    t.finish()
}

fn bounds(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let lo = values.clone().fold(f64::INFINITY, f64::min);
    let hi = values.fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

fn random_problem<R: Rng + ?Sized>(rng: &mut R) -> (ModelSpec, ParamVector, ndarray::Array2<f64>, Vec<usize>) {
    let d = rng.random_range(1..=5);
    let c = rng.random_range(2..=5);
    let spec = if rng.random_bool(0.5) {
        ModelSpec::softmax_regression(d, c).expect("valid spec")
    } else {
        ModelSpec::mlp(d, rng.random_range(1..=5), c).expect("valid spec")
    };
    let n = rng.random_range(1..=6);
    let x = ndarray::Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
    let y = (0..n).map(|_| rng.random_range(0..c)).collect();
    let params = ParamVector::new(
        (0..spec.parameter_count())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    );
    (spec, params, x, y)
}

/// Smallest |pre-activation| of the hidden layer, computed from the raw layout.
fn min_hidden_margin(spec: &ModelSpec, params: &ParamVector, x: &ndarray::Array2<f64>) -> f64 {
    if spec.kind != ModelKind::Mlp {
        return f64::INFINITY;
    }
    let (d, h) = (spec.input_dim, spec.hidden_dim);
    let p = params.as_slice();
    let mut margin = f64::INFINITY;
    for row in x.rows() {
        for u in 0..h {
            let z: f64 = (0..d).map(|i| p[u * d + i] * row[i]).sum::<f64>() + p[h * d + u];
            margin = margin.min(z.abs());
        }
    }
    margin
}

/// Analytic gradients against central finite differences, relative error in norm.
pub fn gradient_suite(instances: usize, seed: u64) -> SuiteResult {
    const STEP: f64 = 1e-5;
    let mut t = Tracker::new("gradient", 1e-4);
    let mut rng = seeded(derive_seed(seed, Stream::Diagnostics, 4, 0));
    let mut done = 0;
    while done < instances {
        let (spec, params, x, y) = random_problem(&mut rng);
        if min_hidden_margin(&spec, &params, &x) < 1e-3 {
            continue;
        }
        done += 1;
        let batch = Batch::new(x.view(), &y).expect("consistent batch");
        let analytic = match model::gradient(&spec, &params, &batch) {
            Ok(g) => g,
            Err(e) => {
                t.fail(format!("gradient failed for {spec:?}: {e}"));
                continue;
            }
        };
        let numeric: Vec<f64> = (0..params.len())
            .map(|i| {
                let mut up = params.clone();
                let mut down = params.clone();
                up.as_mut_slice()[i] += STEP;
                down.as_mut_slice()[i] -= STEP;
                let lu = model::loss(&spec, &up, &batch).expect("valid batch");
                let ld = model::loss(&spec, &down, &batch).expect("valid batch");
                (lu - ld) / (2.0 * STEP)
            })
            .collect();
        let diff = distance_sq(analytic.as_slice(), &numeric).sqrt();
        let scale = analytic
            .norm()
            .max(numeric.iter().map(|v| v * v).sum::<f64>().sqrt())
            .max(1e-8);
        t.record(diff / scale, || {
            format!("spec={spec:?} params={:?} x={x:?} y={y:?}", params.as_slice())
        });
    }
    t.finish()
}

/// `sum p_k ||g_k||^2 = ||g||^2 + B^2` on random models and client batches.
pub fn variance_suite(instances: usize, seed: u64) -> SuiteResult {
    let mut t = Tracker::new("variance_decomposition", 1e-8);
    let mut rng = seeded(derive_seed(seed, Stream::Diagnostics, 5, 0));
    for _ in 0..instances {
        let (spec, params, _, _) = random_problem(&mut rng);
        let k = rng.random_range(1..=6);
        let clients: Vec<(ndarray::Array2<f64>, Vec<usize>)> = (0..k)
            .map(|_| {
                let n = rng.random_range(1..=5);
                let x = ndarray::Array2::from_shape_fn((n, spec.input_dim), |_| rng.random_range(-1.0..1.0));
                let y = (0..n).map(|_| rng.random_range(0..spec.num_classes)).collect();
                (x, y)
            })
            .collect();
        let batches: Vec<Batch> = clients
            .iter()
            .map(|(x, y)| Batch::new(x.view(), y).expect("consistent batch"))
            .collect();
        let total: usize = batches.iter().map(Batch::len).sum();
        let weights: Vec<f64> = batches.iter().map(|b| b.len() as f64 / total as f64).collect();
        let d = match gradient_dissimilarity(&spec, &params, &batches, &weights) {
            Ok(d) => d,
            Err(e) => {
                t.fail(format!("gradient_dissimilarity failed: {e}"));
                continue;
            }
        };
        let grads: Vec<ParamVector> = batches
            .iter()
            .map(|b| model::gradient(&spec, &params, b).expect("valid batch"))
            .collect();
        let lhs: f64 = grads.iter().zip(&weights).map(|(g, p)| p * g.norm_sq()).sum();
        let mut mean = vec![0.0; params.len()];
        for (g, p) in grads.iter().zip(&weights) {
            for (m, v) in mean.iter_mut().zip(g.as_slice()) {
                *m += p * v;
            }
        }
        let mean_sq: f64 = mean.iter().map(|v| v * v).sum();
        let err = (lhs - (mean_sq + d.b_squared)).abs();
        if d.grad_norm_sq > 0.0 {
            match compute_u(d.b_squared, d.grad_norm_sq) {
                Ok(u) if u >= 1.0 => {}
                other => {
                    t.fail(format!(
                        "U check failed for B^2={} g^2={}: {other:?}",
                        d.b_squared, d.grad_norm_sq
                    ));
                    continue;
                }
            }
        }
        t.record(err, || {
            format!("spec={spec:?} k={k} B^2={} lhs={lhs} |g|^2={mean_sq}", d.b_squared)
        });
    }
    t.finish()
}

/// Every suite at its standard size.
pub fn run_all(seed: u64, faults: Faults) -> Vec<SuiteResult> {
    vec![
        emd_suite(1000, seed, faults),
        krum_suite(500, seed),
        weiszfeld_suite(100, seed),
        gradient_suite(200, seed),
        variance_suite(50, seed),
    ]
}
