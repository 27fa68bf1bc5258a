//! Convergence instrumentation: gradient dissimilarity, the bound constant
//! `U`, a probe-based Lipschitz estimate, the per-round bound constants and
//! a Polyak-Lojasiewicz estimate.
//!
//! Everything here is read-only with respect to training state.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, Batch, ModelSpec, ParamVector};

/// Slack allowed when comparing the measured loss change with its bound.
pub const BOUND_SLACK: f64 = 1e-9;
const PL_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct GradientDissimilarity {
    pub b_squared: f64,
    pub grad_norm_sq: f64,
    pub global_gradient: ParamVector,
    /// `sum_k p_k ||grad L_k||^2`, kept for the decomposition check.
    pub mean_local_norm_sq: f64,
}

/// `B^2 = sum_k p_k ||grad L_k - grad L||^2` with `grad L = sum_k p_k grad L_k`.
pub fn gradient_dissimilarity(
    spec: &ModelSpec,
    params: &ParamVector,
    client_batches: &[Batch],
    client_weights: &[f64],
) -> Result<GradientDissimilarity> {
    let grads = client_batches
        .iter()
        .map(|b| {
            if b.is_empty() {
                return Err(Error::Argument("client batch is empty".into()));
            }
            model::gradient(spec, params, b)
        })
        .collect::<Result<Vec<_>>>()?;
    dissimilarity_from_gradients(&grads, client_weights)
}

pub fn dissimilarity_from_gradients(grads: &[ParamVector], weights: &[f64]) -> Result<GradientDissimilarity> {
    if grads.is_empty() || grads.len() != weights.len() {
        return Err(Error::Argument(format!(
            "{} gradients but {} weights",
            grads.len(),
            weights.len()
        )));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 || weights.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::Argument(format!(
            "client weights must be a distribution, sum is {total}"
        )));
    }
    let dim = grads[0].len();
    if grads.iter().any(|g| g.len() != dim) {
        return Err(Error::Shape("gradients differ in length".into()));
    }
    let mut global = ParamVector::zeros(dim);
    for (g, &p) in grads.iter().zip(weights) {
        global.add_scaled(p, g);
    }
    let b_squared = grads
        .iter()
        .zip(weights)
        .map(|(g, &p)| p * g.distance_sq(&global))
        .sum();
    let mean_local_norm_sq = grads.iter().zip(weights).map(|(g, &p)| p * g.norm_sq()).sum();
    Ok(GradientDissimilarity {
        b_squared,
        grad_norm_sq: global.norm_sq(),
        global_gradient: global,
        mean_local_norm_sq,
    })
}

/// `U = sqrt(1 + B^2 / ||grad L||^2)`.
pub fn compute_u(b_squared: f64, grad_norm_sq: f64) -> Result<f64> {
    if !(grad_norm_sq > 0.0) {
        return Err(Error::UndefinedU);
    }
    if b_squared < 0.0 {
        return Err(Error::Argument(format!("B^2 must be nonnegative, got {b_squared}")));
    }
    Ok((1.0 + b_squared / grad_norm_sq).sqrt())
}

/// Largest gradient-difference ratio over random probes around `params`.
/// The result is a lower bound on the Lipschitz constant of `grad`.
pub fn estimate_lipschitz_with<F, R>(
    grad: F,
    params: &ParamVector,
    num_probes: usize,
    radius: f64,
    rng: &mut R,
) -> Result<f64>
where
    F: Fn(&ParamVector) -> Result<ParamVector>,
    R: Rng + ?Sized,
{
    if num_probes == 0 {
        return Err(Error::Argument("need at least one Lipschitz probe".into()));
    }
    if !(radius > 0.0) {
        return Err(Error::Argument(format!("probe radius must be positive, got {radius}")));
    }
    let base = grad(params)?;
    let mut best: f64 = 0.0;
    for _ in 0..num_probes {
        let mut direction: Vec<f64> = (0..params.len()).map(|_| StandardNormal.sample(rng)).collect();
        let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        direction.iter_mut().for_each(|v| *v *= radius / norm);
        let direction = ParamVector::new(direction);
        let mut probe = params.clone();
        probe.add_scaled(1.0, &direction);
        let step = probe.distance_sq(params).sqrt();
        if step == 0.0 {
            continue;
        }
        best = best.max(grad(&probe)?.distance_sq(&base).sqrt() / step);
    }
    Ok(best)
}

pub fn estimate_lipschitz<R: Rng + ?Sized>(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &Batch,
    num_probes: usize,
    radius: f64,
    rng: &mut R,
) -> Result<f64> {
    estimate_lipschitz_with(|p| model::gradient(spec, p, batch), params, num_probes, radius, rng)
}

/// Realized aggregation noise entering the bound. Zero when no noise is injected.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct NoiseTerms {
    /// `|<grad L, N>|`
    pub inner_abs: f64,
    /// `||N||^2`
    pub norm_sq: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundConstants {
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub rhs: f64,
}

/// Constants of the per-round loss-change bound.
///
/// `A1 = U g/2 + U eta^2/(2 g q^2) + M eta^2/(2 q^2)`,
/// `A2 = (eta^2/q)(U/g + M)`, `A3 = (eta^2/2)(U/g + M)`, with `g = gamma`
/// and `q = q_c`.
pub fn lemma2_bound(
    u: f64,
    m_estimate: f64,
    gamma: f64,
    eta: f64,
    q_c: f64,
    grad_norm_sq: f64,
    noise: NoiseTerms,
) -> Result<BoundConstants> {
    if !(gamma > 0.0) {
        return Err(Error::Argument(format!("gamma must be positive, got {gamma}")));
    }
    if !(q_c > 0.0 && q_c <= 1.0) {
        return Err(Error::Argument(format!("q_c must lie in (0, 1], got {q_c}")));
    }
    if !(eta > 0.0) {
        return Err(Error::Argument(format!("learning rate must be positive, got {eta}")));
    }
    let eta2 = eta * eta;
    let a1 = u * gamma / 2.0 + u * eta2 / (2.0 * gamma * q_c * q_c) + m_estimate * eta2 / (2.0 * q_c * q_c);
    let a2 = eta2 / q_c * (u / gamma + m_estimate);
    let a3 = eta2 / 2.0 * (u / gamma + m_estimate);
    let rhs = a1 * grad_norm_sq + a2 * noise.inner_abs + a3 * noise.norm_sq;
    Ok(BoundConstants { a1, a2, a3, rhs })
}

/// One row of the per-round diagnostics series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub round: usize,
    pub b_squared: f64,
    pub grad_norm_sq: f64,
    /// Absent when the gradient vanishes.
    pub u: Option<f64>,
    pub m_estimate: f64,
    pub mu_estimate: Option<f64>,
    pub gamma: f64,
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub lhs_loss_delta: f64,
    pub rhs_bound: f64,
}

pub fn check_round_bound(report: &DiagnosticsReport) -> bool {
    report.lhs_loss_delta <= report.rhs_bound + BOUND_SLACK
}

/// `min_t 0.5 ||grad L_t||^2 / (L_t - L* + 1e-12)`.
pub fn estimate_pl_constant(loss_trace: &[f64], grad_norm_sq_trace: &[f64], loss_star: f64) -> Result<f64> {
    if loss_trace.len() != grad_norm_sq_trace.len() || loss_trace.is_empty() {
        return Err(Error::Argument(format!(
            "traces must be nonempty and aligned, got {} and {}",
            loss_trace.len(),
            grad_norm_sq_trace.len()
        )));
    }
    let mu = loss_trace
        .iter()
        .zip(grad_norm_sq_trace)
        .map(|(&l, &g)| 0.5 * g / ((l - loss_star).max(0.0) + PL_GUARD))
        .fold(f64::INFINITY, f64::min);
    Ok(mu.max(0.0))
}

/// Reference optimum loss from full-batch gradient descent on pooled data.
pub fn reference_loss(spec: &ModelSpec, start: &ParamVector, batch: &Batch, steps: usize, lr: f64) -> Result<f64> {
    let mut params = start.clone();
    let mut best = f64::INFINITY;
    for _ in 0..steps {
        let (loss, grad) = model::loss_and_gradient(spec, &params, batch)?;
        best = best.min(loss);
        params = model::sgd_step(&params, &grad, lr)?;
    }
    Ok(best.min(model::loss(spec, &params, batch)?))
}
