//! Slice arithmetic shared by the clustering and aggregation code.

pub fn distance_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    distance_sq(a, b).sqrt()
}

pub fn norm(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Weighted mean of equal-length vectors; `weights` need not be normalized.
pub fn weighted_mean<'a, I>(vectors: I, weights: &[f64], dim: usize) -> Vec<f64>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let total: f64 = weights.iter().sum();
    let mut out = vec![0.0; dim];
    for (v, &w) in vectors.into_iter().zip(weights) {
        for (o, x) in out.iter_mut().zip(v) {
            *o += w * x;
        }
    }
    for o in &mut out {
        *o /= total;
    }
    out
}

/// Median of a non-empty slice; the mean of the two middle values for even
/// lengths. Reorders the slice.
pub fn median_in_place(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn test_median_in_place() {
        assert_eq!(median_in_place(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median_in_place(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median_in_place(&mut [7.0]), 7.0);
    }

    #[test]
    fn test_weighted_mean() {
        let a = [0.0, 2.0];
        let b = [4.0, 6.0];
        let m = weighted_mean([&a[..], &b[..]], &[1.0, 3.0], 2);
        assert_eq!(m, vec![3.0, 5.0]);
    }
}
