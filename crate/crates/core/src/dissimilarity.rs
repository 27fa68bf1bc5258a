//! Earth Mover's Distance between global-model and client-model predictions.
//!
//! Classes are treated as ordered bins with ground distance `|i - j|`, so the
//! distance has the closed form `sum_c |CDF_p(c) - CDF_q(c)|`.

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, Batch, ModelSpec, ParamVector};

/// Tolerated deviation from unit mass before inputs are rejected.
const MASS_TOLERANCE: f64 = 1e-6;

/// A client's submitted score together with its local dataset size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DissimilarityRecord {
    pub client_id: usize,
    pub score: f64,
    pub local_size: usize,
}

/// How predictions over the evaluation batch are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DissimilarityMode {
    /// Mean of per-sample distances.
    #[default]
    PerSample,
    /// Distance between the batch-averaged prediction histograms.
    Pooled,
}

fn check_distribution(p: &[f64], name: &str) -> Result<f64> {
    if let Some(v) = p.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::Argument(format!("{name} has invalid entry {v}")));
    }
    let mass: f64 = p.iter().sum();
    if (mass - 1.0).abs() > MASS_TOLERANCE {
        return Err(Error::Argument(format!("{name} sums to {mass}, expected 1")));
    }
    Ok(mass)
}

/// Wasserstein-1 distance between two distributions over ordered classes.
pub fn emd_1d(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Argument(format!(
            "distributions have {} and {} bins",
            p.len(),
            q.len()
        )));
    }
    let mass_p = check_distribution(p, "p")?;
    let mass_q = check_distribution(q, "q")?;
    Ok(cdf_distance(p, q, mass_p, mass_q))
}

fn cdf_distance(p: &[f64], q: &[f64], mass_p: f64, mass_q: f64) -> f64 {
    let mut cdf_p = 0.0;
    let mut cdf_q = 0.0;
    let mut total = 0.0;
    for (a, b) in p.iter().zip(q) {
        cdf_p += a / mass_p;
        cdf_q += b / mass_q;
        total += (cdf_p - cdf_q).abs();
    }
    total
}

/// Mean per-sample EMD between the two models' predictions on `eval_batch`.
pub fn dissimilarity_score(
    spec: &ModelSpec,
    global_params: &ParamVector,
    client_params: &ParamVector,
    eval_batch: &Batch,
) -> Result<f64> {
    score_with_mode(
        spec,
        global_params,
        client_params,
        eval_batch,
        DissimilarityMode::PerSample,
    )
}

pub fn score_with_mode(
    spec: &ModelSpec,
    global_params: &ParamVector,
    client_params: &ParamVector,
    eval_batch: &Batch,
    mode: DissimilarityMode,
) -> Result<f64> {
    if eval_batch.is_empty() {
        return Err(Error::Argument("evaluation batch is empty".into()));
    }
    let global = model::forward(spec, global_params, eval_batch.features)?;
    let client = model::forward(spec, client_params, eval_batch.features)?;
    let score = match mode {
        DissimilarityMode::PerSample => {
            let total: f64 = global
                .rows()
                .into_iter()
                .zip(client.rows())
                .map(|(g, c)| {
                    let (g, c) = (g.to_vec(), c.to_vec());
                    let (mg, mc) = (g.iter().sum(), c.iter().sum());
                    cdf_distance(&g, &c, mg, mc)
                })
                .sum();
            total / eval_batch.len() as f64
        }
        DissimilarityMode::Pooled => {
            let g = global.mean_axis(Axis(0)).expect("non-empty").to_vec();
            let c = client.mean_axis(Axis(0)).expect("non-empty").to_vec();
            let (mg, mc) = (g.iter().sum(), c.iter().sum());
            cdf_distance(&g, &c, mg, mc)
        }
    };
    Ok(score)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::verify::transport_emd;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn test_emd_examples() {
        assert_eq!(emd_1d(&[0.2, 0.3, 0.5], &[0.2, 0.3, 0.5]).unwrap(), 0.0);
        assert_eq!(emd_1d(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 1.0);
        let a = [0.5, 0.5, 0.0];
        let b = [0.0, 0.5, 0.5];
        assert!((transport_emd(&a, &b) - 1.0).abs() < 1e-15);
        assert!((emd_1d(&a, &b).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn test_emd_rejects_bad_input() {
        assert!(emd_1d(&[1.0], &[0.5, 0.5]).is_err());
        assert!(emd_1d(&[1.5, -0.5], &[0.5, 0.5]).is_err());
        assert!(emd_1d(&[0.6, 0.6], &[0.5, 0.5]).is_err());
    }

    fn random_distribution(rng: &mut impl Rng, bins: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..bins).map(|_| rng.random::<f64>()).collect();
        let s: f64 = raw.iter().sum();
        raw.iter().map(|v| v / s).collect()
    }

    #[test]
    fn test_emd_matches_transport_emd() {
        let mut rng = seeded(17);
        for _ in 0..1000 {
            let bins = rng.random_range(1..=5);
            let p = random_distribution(&mut rng, bins);
            let q = random_distribution(&mut rng, bins);
            let fast = emd_1d(&p, &q).unwrap();
            assert!((fast - transport_emd(&p, &q)).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn prop_emd_is_a_metric(seed in any::<u64>()) {
            let mut rng = seeded(seed);
            let p = random_distribution(&mut rng, 5);
            let q = random_distribution(&mut rng, 5);
            let r = random_distribution(&mut rng, 5);
            let pq = emd_1d(&p, &q).unwrap();
            prop_assert!(pq >= 0.0);
            prop_assert!((pq - emd_1d(&q, &p).unwrap()).abs() < 1e-12);
            prop_assert!(emd_1d(&p, &p).unwrap() < 1e-9);
            prop_assert!(pq <= emd_1d(&p, &r).unwrap() + emd_1d(&r, &q).unwrap() + 1e-12);
        }
    }

    #[test]
    fn test_score_identical_models_is_zero() {
        let spec = ModelSpec::softmax_regression(2, 3).unwrap();
        let params = model::init_params(&spec, &mut seeded(1));
        let x = array![[0.1, 0.9], [0.4, 0.2]];
        let batch = Batch::new(x.view(), &[0, 1]).unwrap();
        assert_eq!(dissimilarity_score(&spec, &params, &params, &batch).unwrap(), 0.0);
    }

    #[test]
    fn test_score_saturated_predictions() {
        // Bias-only models that put all mass on class 0 and class 1 respectively.
        let spec = ModelSpec::softmax_regression(1, 2).unwrap();
        let global = ParamVector::new(vec![0.0, 0.0, 50.0, -50.0]);
        let client = ParamVector::new(vec![0.0, 0.0, -50.0, 50.0]);
        let x = array![[0.3]];
        let batch = Batch::new(x.view(), &[0]).unwrap();
        let s = dissimilarity_score(&spec, &global, &client, &batch).unwrap();
        assert!((s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn test_score_bounded_and_permutation_invariant() {
        let spec = ModelSpec::mlp(3, 4, 5).unwrap();
        let mut rng = seeded(4);
        let a = model::init_params(&spec, &mut rng);
        let b = ParamVector::new(a.as_slice().iter().map(|v| v * 30.0).collect());
        let x = array![[0.1, 0.9, 0.3], [0.4, 0.2, 0.8], [1.0, 0.0, 0.5]];
        let labels = [0, 1, 2];
        let s = dissimilarity_score(&spec, &a, &b, &Batch::new(x.view(), &labels).unwrap()).unwrap();
        assert!((0.0..=4.0).contains(&s));
        let xp = array![[1.0, 0.0, 0.5], [0.1, 0.9, 0.3], [0.4, 0.2, 0.8]];
        let sp = dissimilarity_score(&spec, &a, &b, &Batch::new(xp.view(), &labels).unwrap()).unwrap();
        assert!((s - sp).abs() < 1e-12);
        let pooled = score_with_mode(
            &spec,
            &a,
            &b,
            &Batch::new(x.view(), &labels).unwrap(),
            DissimilarityMode::Pooled,
        )
        .unwrap();
        assert!(pooled <= s + 1e-12);
    }
}
