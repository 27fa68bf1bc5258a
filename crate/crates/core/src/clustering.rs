//! k-means (k-means++ seeding, Lloyd iterations) over client feature points.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::vecops::{distance_sq, weighted_mean};

/// Per-client clustering input, typically `[score, size]` after standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeaturePoint {
    pub client_id: usize,
    pub coords: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub centroids: Vec<Vec<f64>>,
    /// Cluster index per input point, in input order.
    pub assignments: Vec<usize>,
    /// Client id per input point, in input order.
    pub client_ids: Vec<usize>,
    pub inertia: f64,
    /// Inertia after every Lloyd iteration.
    pub inertia_trace: Vec<f64>,
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k()];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }

    pub fn cluster_of(&self, client_id: usize) -> Option<usize> {
        self.client_ids
            .iter()
            .position(|&c| c == client_id)
            .map(|i| self.assignments[i])
    }
}

/// Shifts and scales each coordinate to zero mean and unit (population)
/// variance. A coordinate without spread maps to zeros.
pub fn standardize(points: &[FeaturePoint]) -> Result<Vec<FeaturePoint>> {
    if points.len() < 2 {
        return Err(Error::Argument(format!(
            "standardize needs at least 2 points, got {}",
            points.len()
        )));
    }
    let dim = points[0].coords.len();
    if points.iter().any(|p| p.coords.len() != dim) {
        return Err(Error::Shape("feature points differ in dimension".into()));
    }
    let n = points.len() as f64;
    let mut out: Vec<FeaturePoint> = points.to_vec();
    for j in 0..dim {
        let mean = points.iter().map(|p| p.coords[j]).sum::<f64>() / n;
        let var = points.iter().map(|p| (p.coords[j] - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        // Spread at the level of rounding noise in the mean counts as none.
        let degenerate = std <= 1e-12 * mean.abs().max(1.0);
        for p in &mut out {
            p.coords[j] = if degenerate { 0.0 } else { (p.coords[j] - mean) / std };
        }
    }
    Ok(out)
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = distance_sq(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn plus_plus_init<R: Rng>(points: &[&[f64]], k: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.random_range(0..points.len())].to_vec()];
    while centroids.len() < k {
        let weights: Vec<f64> = points.iter().map(|p| nearest(p, &centroids).1).collect();
        let total: f64 = weights.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = weights.len() - 1;
            for (i, w) in weights.iter().enumerate() {
                if *w > 0.0 && target < *w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            // Never re-pick a point already used as a centroid.
            if weights[chosen] == 0.0 {
                weights.iter().rposition(|&w| w > 0.0).unwrap_or(chosen)
            } else {
                chosen
            }
        } else {
            rng.random_range(0..points.len())
        };
        centroids.push(points[pick].to_vec());
    }
    centroids
}

fn count_distinct(points: &[&[f64]]) -> usize {
    let mut distinct: Vec<&[f64]> = Vec::new();
    for p in points {
        if !distinct.iter().any(|d| d == p) {
            distinct.push(p);
        }
    }
    distinct.len()
}

fn inertia(points: &[&[f64]], centroids: &[Vec<f64>], assignments: &[usize]) -> f64 {
    points
        .iter()
        .zip(assignments)
        .map(|(p, &a)| distance_sq(p, &centroids[a]))
        .sum()
}

/// Runs k-means on raw coordinate vectors.
///
/// `k` is lowered to the number of distinct points when there are fewer, so
/// duplicated inputs collapse into a single cluster instead of leaving empty
/// ones behind.
pub fn kmeans_raw(
    points: &[&[f64]],
    client_ids: &[usize],
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<ClusterModel> {
    let n = points.len();
    if k < 1 || k > n {
        return Err(Error::Argument(format!("k = {k} must lie in 1..={n}")));
    }
    if max_iter < 1 {
        return Err(Error::Argument("max_iter must be at least 1".into()));
    }
    if !(tol >= 0.0) {
        return Err(Error::Argument(format!("tol must be >= 0, got {tol}")));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Shape("points differ in dimension".into()));
    }
    let k = k.min(count_distinct(points));
    let mut rng = rng::seeded(seed);
    let mut centroids = plus_plus_init(points, k, &mut rng);
    let mut assignments = vec![0; n];
    let mut trace = Vec::new();

    for _ in 0..max_iter {
        for (a, p) in assignments.iter_mut().zip(points) {
            *a = nearest(p, &centroids).0;
        }
        reseed_empty(points, &mut centroids, &mut assignments);

        let mut moved: f64 = 0.0;
        for (j, centroid) in centroids.iter_mut().enumerate() {
            let members: Vec<&[f64]> = points
                .iter()
                .zip(&assignments)
                .filter(|(_, &a)| a == j)
                .map(|(p, _)| *p)
                .collect();
            let updated = weighted_mean(members.iter().copied(), &vec![1.0; members.len()], dim);
            moved = moved.max(distance_sq(&updated, centroid).sqrt());
            *centroid = updated;
        }
        trace.push(inertia(points, &centroids, &assignments));
        if moved < tol {
            break;
        }
    }

    // Final assignment against the returned centroids.
    for (a, p) in assignments.iter_mut().zip(points) {
        *a = nearest(p, &centroids).0;
    }
    drop_empty(&mut centroids, &mut assignments);
    let inertia = inertia(points, &centroids, &assignments);
    Ok(ClusterModel {
        centroids,
        assignments,
        client_ids: client_ids.to_vec(),
        inertia,
        inertia_trace: trace,
    })
}

/// Moves the point farthest from its centroid into each empty cluster.
fn reseed_empty(points: &[&[f64]], centroids: &mut [Vec<f64>], assignments: &mut [usize]) {
    for j in 0..centroids.len() {
        let mut sizes = vec![0usize; centroids.len()];
        for &a in assignments.iter() {
            sizes[a] += 1;
        }
        if sizes[j] > 0 {
            continue;
        }
        let farthest = (0..points.len())
            .filter(|&i| sizes[assignments[i]] > 1)
            .max_by(|&a, &b| {
                let da = distance_sq(points[a], &centroids[assignments[a]]);
                let db = distance_sq(points[b], &centroids[assignments[b]]);
                da.total_cmp(&db).then(b.cmp(&a))
            });
        if let Some(i) = farthest {
            centroids[j] = points[i].to_vec();
            assignments[i] = j;
        }
    }
}

fn drop_empty(centroids: &mut Vec<Vec<f64>>, assignments: &mut [usize]) {
    let mut sizes = vec![0usize; centroids.len()];
    for &a in assignments.iter() {
        sizes[a] += 1;
    }
    if sizes.iter().all(|&s| s > 0) {
        return;
    }
    let mut remap = vec![usize::MAX; centroids.len()];
    let mut kept = Vec::new();
    for (j, c) in centroids.iter().enumerate() {
        if sizes[j] > 0 {
            remap[j] = kept.len();
            kept.push(c.clone());
        }
    }
    for a in assignments.iter_mut() {
        *a = remap[*a];
    }
    *centroids = kept;
}

/// k-means over feature points.
pub fn kmeans(points: &[FeaturePoint], k: usize, seed: u64, max_iter: usize, tol: f64) -> Result<ClusterModel> {
    let coords: Vec<&[f64]> = points.iter().map(|p| p.coords.as_slice()).collect();
    let ids: Vec<usize> = points.iter().map(|p| p.client_id).collect();
    kmeans_raw(&coords, &ids, k, seed, max_iter, tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn line(values: &[f64]) -> Vec<FeaturePoint> {
        values
            .iter()
            .enumerate()
            .map(|(i, &v)| FeaturePoint {
                client_id: i,
                coords: vec![v],
            })
            .collect()
    }

    #[test]
    fn test_standardize() {
        let out = standardize(&line(&[1.0, 3.0])).unwrap();
        assert_eq!(out[0].coords, vec![-1.0]);
        assert_eq!(out[1].coords, vec![1.0]);
        let flat = standardize(&line(&[0.1, 0.1, 0.1])).unwrap();
        assert!(flat.iter().all(|p| p.coords == vec![0.0]));
        let out = standardize(&line(&[0.3, 1.7, -2.0, 5.5])).unwrap();
        let mean: f64 = out.iter().map(|p| p.coords[0]).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!(standardize(&line(&[1.0])).is_err());
    }

    /// Best 2-partition of a 1-D point set by exhaustive enumeration.
    fn best_two_partition(values: &[f64]) -> (u32, f64) {
        let n = values.len();
        let mut best = (0, f64::INFINITY);
        for mask in 1..(1u32 << n) - 1 {
            let mut cost = 0.0;
            for side in [true, false] {
                let members: Vec<f64> = (0..n)
                    .filter(|&i| ((mask >> i) & 1 == 1) == side)
                    .map(|i| values[i])
                    .collect();
                let m = members.iter().sum::<f64>() / members.len() as f64;
                cost += members.iter().map(|v| (v - m).powi(2)).sum::<f64>();
            }
            if cost < best.1 {
                best = (mask, cost);
            }
        }
        best
    }

    #[test]
    fn test_two_clusters_on_a_line() {
        let values = [0.0, 0.1, 10.0, 10.1];
        let (mask, cost) = best_two_partition(&values);
        assert!(mask == 0b0011 || mask == 0b1100);
        let model = kmeans(&line(&values), 2, 3, 100, 1e-6).unwrap();
        assert!((model.inertia - cost).abs() < 1e-12);
        assert_eq!(model.assignments[0], model.assignments[1]);
        assert_eq!(model.assignments[2], model.assignments[3]);
        assert_ne!(model.assignments[0], model.assignments[2]);
        let mut c: Vec<f64> = model.centroids.iter().map(|c| c[0]).collect();
        c.sort_by(f64::total_cmp);
        assert!((c[0] - 0.05).abs() < 1e-12 && (c[1] - 10.05).abs() < 1e-12);
    }

    #[test]
    fn test_k_equals_n_and_k_one() {
        let values = [0.5, -1.0, 3.0, 2.0];
        let model = kmeans(&line(&values), 4, 1, 100, 1e-6).unwrap();
        assert_eq!(model.inertia, 0.0);
        assert_eq!(model.cluster_sizes(), vec![1, 1, 1, 1]);
        let model = kmeans(&line(&values), 1, 1, 100, 1e-6).unwrap();
        assert!((model.centroids[0][0] - 1.125).abs() < 1e-12);
    }

    #[test]
    fn test_duplicates_collapse() {
        let model = kmeans(&line(&[2.0, 2.0, 2.0]), 2, 5, 100, 1e-6).unwrap();
        assert_eq!(model.k(), 1);
        assert_eq!(model.cluster_sizes(), vec![3]);
    }

    #[test]
    fn test_argument_errors() {
        assert!(kmeans(&line(&[1.0, 2.0]), 3, 0, 10, 1e-6).is_err());
        assert!(kmeans(&line(&[1.0, 2.0]), 0, 0, 10, 1e-6).is_err());
        assert!(kmeans(&line(&[1.0, 2.0]), 1, 0, 0, 1e-6).is_err());
    }

    fn points_strategy() -> impl Strategy<Value = Vec<FeaturePoint>> {
        prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 2), 3..12).prop_map(|rows| {
            rows.into_iter()
                .enumerate()
                .map(|(i, coords)| FeaturePoint { client_id: i, coords })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn prop_kmeans_invariants(points in points_strategy(), k in 1usize..4, seed in any::<u64>()) {
            let k = k.min(points.len());
            let model = kmeans(&points, k, seed, 100, 1e-9).unwrap();
            for w in model.inertia_trace.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-9);
            }
            prop_assert!(model.cluster_sizes().iter().all(|&s| s > 0));
            for (p, &a) in points.iter().zip(&model.assignments) {
                let (best, _) = nearest(&p.coords, &model.centroids);
                prop_assert_eq!(best, a);
            }
            prop_assert_eq!(&model, &kmeans(&points, k, seed, 100, 1e-9).unwrap());
        }
    }
}
