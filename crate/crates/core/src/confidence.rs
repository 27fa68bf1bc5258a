//! Reconciliation confidence scores and their softmax aggregation weights.
//!
//! A client in cluster `j` at distance `d` from the centroid scores
//! `|A_j| / (1 + d)`: large clusters and central members earn more weight.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::clustering::{ClusterModel, FeaturePoint};
use crate::error::{Error, Result};
use crate::vecops::distance;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceWeights {
    pub raw_scores: BTreeMap<usize, f64>,
    pub weights: BTreeMap<usize, f64>,
    pub temperature: f64,
}

/// Raw score per client id.
pub fn confidence_scores(model: &ClusterModel, points: &[FeaturePoint]) -> Result<BTreeMap<usize, f64>> {
    let sizes = model.cluster_sizes();
    points
        .iter()
        .map(|p| {
            let cluster = model
                .cluster_of(p.client_id)
                .ok_or_else(|| Error::Internal(format!("client {} has no cluster assignment", p.client_id)))?;
            let d = distance(&p.coords, &model.centroids[cluster]);
            Ok((p.client_id, sizes[cluster] as f64 / (1.0 + d)))
        })
        .collect()
}

/// `exp(S_k / tau) / sum_j exp(S_j / tau)`, computed with max subtraction.
pub fn softmax_weights(raw_scores: &BTreeMap<usize, f64>, temperature: f64) -> Result<ConfidenceWeights> {
    if raw_scores.is_empty() {
        return Err(Error::Argument("no scores to normalize".into()));
    }
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Argument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if let Some((id, s)) = raw_scores.iter().find(|(_, s)| !s.is_finite()) {
        return Err(Error::Argument(format!("score for client {id} is {s}")));
    }
    let max = raw_scores.values().fold(f64::NEG_INFINITY, |m, &s| m.max(s));
    let exps: BTreeMap<usize, f64> = raw_scores
        .iter()
        .map(|(&id, &s)| (id, ((s - max) / temperature).exp()))
        .collect();
    let total: f64 = exps.values().sum();
    let weights = exps.into_iter().map(|(id, e)| (id, e / total)).collect();
    Ok(ConfidenceWeights {
        raw_scores: raw_scores.clone(),
        weights,
        temperature,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::kmeans;
    use proptest::prelude::*;

    fn single_cluster(points: &[FeaturePoint], centroid: Vec<f64>) -> ClusterModel {
        ClusterModel {
            centroids: vec![centroid],
            assignments: vec![0; points.len()],
            client_ids: points.iter().map(|p| p.client_id).collect(),
            inertia: 0.0,
            inertia_trace: vec![],
        }
    }

    fn pt(client_id: usize, coords: &[f64]) -> FeaturePoint {
        FeaturePoint {
            client_id,
            coords: coords.to_vec(),
        }
    }

    #[test]
    fn test_formula_examples() {
        let points = vec![pt(0, &[0.0, 0.0]), pt(1, &[1.0, 0.0]), pt(2, &[-1.0, 0.0])];
        let s = confidence_scores(&single_cluster(&points, vec![0.0, 0.0]), &points).unwrap();
        assert_eq!(s[&0], 3.0);
        assert_eq!(s[&1], 1.5);

        let points: Vec<_> = (0..6).map(|i| pt(i, &[if i == 0 { 2.0 } else { 0.0 }])).collect();
        let s = confidence_scores(&single_cluster(&points, vec![0.0]), &points).unwrap();
        assert_eq!(s[&0], 2.0);
        assert!(s[&1] > s[&0]);
    }

    #[test]
    fn test_unassigned_client() {
        let points = vec![pt(0, &[0.0])];
        let model = single_cluster(&points, vec![0.0]);
        assert!(matches!(
            confidence_scores(&model, &[pt(7, &[0.0])]),
            Err(Error::Internal(_))
        ));
    }

    #[test]
    fn test_softmax_examples() {
        let eq: BTreeMap<usize, f64> = (0..4).map(|i| (i, 2.5)).collect();
        let w = softmax_weights(&eq, 0.3).unwrap();
        assert!(w.weights.values().all(|&v| (v - 0.25).abs() < 1e-15));

        let two = BTreeMap::from([(0, 0.0), (1, 2f64.ln())]);
        let w = softmax_weights(&two, 1.0).unwrap();
        assert!((w.weights[&0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((w.weights[&1] - 2.0 / 3.0).abs() < 1e-15);

        assert!(softmax_weights(&BTreeMap::new(), 1.0).is_err());
        assert!(softmax_weights(&two, 0.0).is_err());
    }

    #[test]
    fn test_high_temperature_is_uniform() {
        let s = BTreeMap::from([(0, 1.0), (1, 7.0), (2, 3.0)]);
        let w = softmax_weights(&s, 1e9).unwrap();
        assert!(w.weights.values().all(|&v| (v - 1.0 / 3.0).abs() < 1e-6));
    }

    #[test]
    fn test_larger_cluster_wins_at_equal_distance() {
        // Members of both clusters sit at distance 1 from their centroid.
        let points = vec![
            pt(0, &[-1.0]),
            pt(1, &[1.0]),
            pt(2, &[-1.0]),
            pt(3, &[9.0]),
            pt(4, &[11.0]),
        ];
        let model = ClusterModel {
            centroids: vec![vec![0.0], vec![10.0]],
            assignments: vec![0, 0, 0, 1, 1],
            client_ids: (0..5).collect(),
            inertia: 5.0,
            inertia_trace: vec![],
        };
        let raw = confidence_scores(&model, &points).unwrap();
        assert_eq!(raw[&0], 1.5);
        assert_eq!(raw[&3], 1.0);
        let w = softmax_weights(&raw, 1.0).unwrap();
        assert!(w.weights[&0] >= w.weights[&3]);
    }

    proptest! {
        #[test]
        fn prop_softmax_invariants(scores in prop::collection::vec(-20.0f64..20.0, 1..12), shift in -50.0f64..50.0, tau in 0.1f64..10.0) {
            let raw: BTreeMap<usize, f64> = scores.iter().copied().enumerate().collect();
            let w = softmax_weights(&raw, tau).unwrap();
            let total: f64 = w.weights.values().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            prop_assert!(w.weights.values().all(|&v| v > 0.0));
            for (i, si) in &raw {
                for (j, sj) in &raw {
                    if si > sj {
                        prop_assert!(w.weights[i] > w.weights[j]);
                    }
                }
            }
            let shifted: BTreeMap<usize, f64> = raw.iter().map(|(&k, &v)| (k, v + shift)).collect();
            let ws = softmax_weights(&shifted, tau).unwrap();
            for (k, v) in &w.weights {
                prop_assert!((v - ws.weights[k]).abs() < 1e-12);
            }
        }

        #[test]
        fn prop_nearer_member_never_lighter(values in prop::collection::vec(-5.0f64..5.0, 3..10), seed in any::<u64>()) {
            let points: Vec<_> = values.iter().enumerate().map(|(i, &v)| pt(i, &[v])).collect();
            let model = kmeans(&points, 2.min(points.len()), seed, 100, 1e-9).unwrap();
            let w = softmax_weights(&confidence_scores(&model, &points).unwrap(), 1.0).unwrap();
            for a in &points {
                for b in &points {
                    let (ca, cb) = (model.cluster_of(a.client_id).unwrap(), model.cluster_of(b.client_id).unwrap());
                    if ca == cb {
                        let da = distance(&a.coords, &model.centroids[ca]);
                        let db = distance(&b.coords, &model.centroids[cb]);
                        if da < db {
                            prop_assert!(w.weights[&a.client_id] >= w.weights[&b.client_id]);
                        }
                    }
                }
            }
        }
    }
}
