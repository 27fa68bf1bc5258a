//! Datasets, IDX ingestion, synthetic fixtures and client partitioning.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Batch;
use crate::rng::{self, Stream};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Labelled samples with features scaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Argument(format!("label {bad} >= num_classes {num_classes}")));
        }
        Ok(Dataset {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn batch(&self) -> Batch<'_> {
        Batch {
            features: self.features.view(),
            labels: &self.labels,
        }
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// The first `n` rows (or all of them when `n >= len`).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        class_histogram(&self.labels, self.num_classes)
    }

    /// Concatenates datasets with the same shape.
    pub fn concat(parts: &[Dataset]) -> Result<Dataset> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Argument("nothing to concatenate".into()))?;
        let views: Vec<_> = parts.iter().map(|d| d.features.view()).collect();
        let features = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::Shape(format!("cannot concatenate datasets: {e}")))?;
        let labels = parts.iter().flat_map(|d| d.labels.iter().copied()).collect();
        Dataset::new(features, labels, first.num_classes)
    }

    /// Writes `f0,..,f{d-1},label` CSV.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let header: Vec<String> = (0..self.input_dim())
            .map(|j| format!("f{j}"))
            .chain(std::iter::once("label".to_string()))
            .collect();
        writeln!(w, "{}", header.join(","))?;
        for (row, label) in self.features.rows().into_iter().zip(&self.labels) {
            let mut fields: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            fields.push(label.to_string());
            writeln!(w, "{}", fields.join(","))?;
        }
        Ok(())
    }
}

pub fn class_histogram(labels: &[usize], num_classes: usize) -> Vec<usize> {
    let mut h = vec![0; num_classes];
    for &y in labels {
        h[y] += 1;
    }
    h
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize, field: &'static str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Format {
            field,
            message: format!("file truncated before byte {}", offset + 4),
        })
}

/// Parses an IDX image/label pair from memory.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let magic = be_u32(images, 0, "images.magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            field: "images.magic",
            message: format!("expected {IDX_IMAGES_MAGIC:#010x}, found {magic:#010x}"),
        });
    }
    let count = be_u32(images, 4, "images.count")? as usize;
    let rows = be_u32(images, 8, "images.rows")? as usize;
    let cols = be_u32(images, 12, "images.cols")? as usize;
    let dim = rows * cols;
    let pixels = &images[16..];
    if pixels.len() < count * dim {
        return Err(Error::Format {
            field: "images.data",
            message: format!("expected {} pixel bytes, found {}", count * dim, pixels.len()),
        });
    }

    let magic = be_u32(labels, 0, "labels.magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            field: "labels.magic",
            message: format!("expected {IDX_LABELS_MAGIC:#010x}, found {magic:#010x}"),
        });
    }
    let label_count = be_u32(labels, 4, "labels.count")? as usize;
    if label_count != count {
        return Err(Error::Format {
            field: "labels.count",
            message: format!("{label_count} labels for {count} images"),
        });
    }
    let label_bytes = &labels[8..];
    if label_bytes.len() < count {
        return Err(Error::Format {
            field: "labels.data",
            message: format!("expected {count} label bytes, found {}", label_bytes.len()),
        });
    }

    let features = Array2::from_shape_fn((count, dim), |(i, j)| pixels[i * dim + j] as f64 / 255.0);
    let labels: Vec<usize> = label_bytes[..count].iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().max().map_or(2, |&m| (m + 1).max(2));
    Dataset::new(features, labels, num_classes)
}

/// Loads an IDX image/label file pair; gzip-compressed files are accepted.
/// `num_classes` is inferred as `max(label) + 1`.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images = read_maybe_gz(images_path.as_ref())?;
    let labels = read_maybe_gz(labels_path.as_ref())?;
    parse_idx(&images, &labels)
}

/// Fixed class centers, independent of the sampling seed.
fn synthetic_centers(num_classes: usize, input_dim: usize) -> Vec<Vec<f64>> {
    let mut rng = rng::seeded(0x00C0_FFEE_u64 ^ ((num_classes as u64) << 32) ^ input_dim as u64);
    (0..num_classes)
        .map(|_| (0..input_dim).map(|_| rng.random_range(0.2..0.8)).collect())
        .collect()
}

/// Gaussian blobs: class `c` is drawn around a fixed center with standard
/// deviation `spread` per coordinate, clipped to `[0, 1]`. Rows are ordered by
/// class.
pub fn generate_synthetic(
    num_classes: usize,
    input_dim: usize,
    samples_per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 2 || input_dim < 1 || samples_per_class < 1 {
        return Err(Error::Argument(
            "synthetic data needs >= 2 classes, >= 1 dimension and >= 1 sample per class".into(),
        ));
    }
    if !(spread >= 0.0) || !spread.is_finite() {
        return Err(Error::Argument(format!("spread must be finite and >= 0, got {spread}")));
    }
    let centers = synthetic_centers(num_classes, input_dim);
    let mut rng = rng::stream_rng(seed, Stream::Synthetic, 0, 0);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let n = num_classes * samples_per_class;
    let mut features = Array2::zeros((n, input_dim));
    let mut labels = Vec::with_capacity(n);
    for (c, center) in centers.iter().enumerate() {
        for s in 0..samples_per_class {
            let row = c * samples_per_class + s;
            for (j, &mu) in center.iter().enumerate() {
                let v = mu + spread * noise.sample(&mut rng);
                features[[row, j]] = v.clamp(0.0, 1.0);
            }
            labels.push(c);
        }
    }
    Dataset::new(features, labels, num_classes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PartitionKind {
    Iid,
    LabelShard,
    Dirichlet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub kind: PartitionKind,
    pub num_clients: usize,
    pub shards_per_client: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl PartitionPlan {
    pub fn iid(num_clients: usize, seed: u64) -> Self {
        PartitionPlan {
            kind: PartitionKind::Iid,
            num_clients,
            shards_per_client: 2,
            alpha: 1.0,
            seed,
        }
    }

    pub fn label_shard(num_clients: usize, shards_per_client: usize, seed: u64) -> Self {
        PartitionPlan {
            kind: PartitionKind::LabelShard,
            shards_per_client,
            ..Self::iid(num_clients, seed)
        }
    }

    pub fn dirichlet(num_clients: usize, alpha: f64, seed: u64) -> Self {
        PartitionPlan {
            kind: PartitionKind::Dirichlet,
            alpha,
            ..Self::iid(num_clients, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_clients < 2 {
            return Err(Error::Argument("partition needs at least 2 clients".into()));
        }
        if self.kind == PartitionKind::LabelShard && self.shards_per_client < 1 {
            return Err(Error::Argument("shards_per_client must be at least 1".into()));
        }
        if self.kind == PartitionKind::Dirichlet && !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Argument(format!("alpha must be positive, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Client index lists forming an exact cover of `0..labels.len()`.
pub fn partition_indices(labels: &[usize], num_classes: usize, plan: &PartitionPlan) -> Result<Vec<Vec<usize>>> {
    plan.validate()?;
    let n = labels.len();
    let k = plan.num_clients;
    if n < k {
        return Err(Error::Partition(format!("{n} samples cannot cover {k} clients")));
    }
    let mut rng = rng::stream_rng(plan.seed, Stream::Partition, 0, 0);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);

    let parts = match plan.kind {
        PartitionKind::Iid => {
            let base = n / k;
            let extra = n % k;
            let mut parts = Vec::with_capacity(k);
            let mut start = 0;
            for c in 0..k {
                let len = base + usize::from(c < extra);
                parts.push(order[start..start + len].to_vec());
                start += len;
            }
            parts
        }
        PartitionKind::LabelShard => {
            order.sort_by_key(|&i| labels[i]);
            let num_shards = k * plan.shards_per_client;
            if n < num_shards {
                return Err(Error::Partition(format!("{n} samples cannot form {num_shards} shards")));
            }
            let mut shard_ids: Vec<usize> = (0..num_shards).collect();
            shard_ids.shuffle(&mut rng);
            let shard = |s: usize| &order[s * n / num_shards..(s + 1) * n / num_shards];
            shard_ids
                .chunks(plan.shards_per_client)
                .map(|ids| ids.iter().flat_map(|&s| shard(s).iter().copied()).collect())
                .collect()
        }
        PartitionKind::Dirichlet => {
            let gamma =
                Gamma::new(plan.alpha, 1.0).map_err(|e| Error::Argument(format!("invalid dirichlet alpha: {e}")))?;
            let mut parts = vec![Vec::new(); k];
            for class in 0..num_classes {
                let members: Vec<usize> = order.iter().copied().filter(|&i| labels[i] == class).collect();
                if members.is_empty() {
                    continue;
                }
                let mut props: Vec<f64> = (0..k).map(|_| gamma.sample(&mut rng)).collect();
                let total: f64 = props.iter().sum();
                if total > 0.0 {
                    props.iter_mut().for_each(|p| *p /= total);
                } else {
                    props = vec![0.0; k];
                    props[rng.random_range(0..k)] = 1.0;
                }
                let m = members.len();
                let mut cumulative = 0.0;
                let mut start = 0;
                for (c, p) in props.iter().enumerate() {
                    cumulative += p;
                    let end = if c + 1 == k {
                        m
                    } else {
                        ((cumulative * m as f64).round() as usize).clamp(start, m)
                    };
                    parts[c].extend_from_slice(&members[start..end]);
                    start = end;
                }
            }
            parts
        }
    };

    if let Some(empty) = parts.iter().position(|p| p.is_empty()) {
        return Err(Error::Partition(format!(
            "client {empty} received no samples; lower num_clients or add data"
        )));
    }
    Ok(parts)
}

/// Splits `dataset` into `plan.num_clients` disjoint client datasets.
pub fn partition(dataset: &Dataset, plan: &PartitionPlan) -> Result<Vec<Dataset>> {
    let parts = partition_indices(&dataset.labels, dataset.num_classes, plan)?;
    Ok(parts.iter().map(|idx| dataset.subset(idx)).collect())
}

/// Mean total-variation distance between each part's label distribution and
/// the pooled label distribution.
pub fn label_skew(parts: &[Dataset]) -> f64 {
    let Some(first) = parts.first() else {
        return 0.0;
    };
    let c = first.num_classes;
    let mut global = vec![0usize; c];
    for p in parts {
        for (g, h) in global.iter_mut().zip(p.class_histogram()) {
            *g += h;
        }
    }
    let total: usize = global.iter().sum();
    let global: Vec<f64> = global.iter().map(|&g| g as f64 / total as f64).collect();
    let tv: f64 = parts
        .iter()
        .map(|p| {
            let h = p.class_histogram();
            let n = p.len().max(1) as f64;
            0.5 * h
                .iter()
                .zip(&global)
                .map(|(&a, g)| (a as f64 / n - g).abs())
                .sum::<f64>()
        })
        .sum();
    tv / parts.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(magic: u32, pixels: &[u8], count: u32, rows: u32, cols: u32) -> Vec<u8> {
        let mut out = Vec::new();
        for v in [magic, count, rows, cols] {
            out.extend_from_slice(&v.to_be_bytes());
        }
        out.extend_from_slice(pixels);
        out
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        out.extend_from_slice(labels);
        out
    }

    #[test]
    fn test_parse_two_image_fixture() {
        let images = idx_images(IDX_IMAGES_MAGIC, &[0, 255, 255, 0, 0, 0, 255, 255], 2, 2, 2);
        let ds = parse_idx(&images, &idx_labels(&[3, 1])).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.input_dim(), 4);
        assert_eq!(ds.features.row(0).to_vec(), vec![0.0, 1.0, 1.0, 0.0]);
        assert_eq!(ds.features.row(1).to_vec(), vec![0.0, 0.0, 1.0, 1.0]);
        assert_eq!(ds.labels, vec![3, 1]);
    }

    #[test]
    fn test_parse_rejects_bad_files() {
        let labels = idx_labels(&[0]);
        let wrong = idx_images(IDX_LABELS_MAGIC, &[0], 1, 1, 1);
        match parse_idx(&wrong, &labels) {
            Err(Error::Format { field, .. }) => assert_eq!(field, "images.magic"),
            other => panic!("unexpected {other:?}"),
        }
        let short = idx_images(IDX_IMAGES_MAGIC, &[0, 1], 1, 2, 2);
        match parse_idx(&short, &labels) {
            Err(Error::Format { field, .. }) => assert_eq!(field, "images.data"),
            other => panic!("unexpected {other:?}"),
        }
        let two = idx_images(IDX_IMAGES_MAGIC, &[0, 1], 2, 1, 1);
        match parse_idx(&two, &labels) {
            Err(Error::Format { field, .. }) => assert_eq!(field, "labels.count"),
            other => panic!("unexpected {other:?}"),
        }
        match parse_idx(&[0, 0], &labels) {
            Err(Error::Format { field, .. }) => assert_eq!(field, "images.magic"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn test_synthetic_is_deterministic_and_counted() {
        let a = generate_synthetic(2, 2, 50, 0.1, 7).unwrap();
        let b = generate_synthetic(2, 2, 50, 0.1, 7).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(3, 2, 10, 0.1, 1).unwrap();
        assert_eq!(c.len(), 30);
        assert_eq!(c.class_histogram(), vec![10, 10, 10]);
        assert!(c.features.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn test_synthetic_zero_spread_hits_centers() {
        let ds = generate_synthetic(3, 4, 5, 0.0, 9).unwrap();
        let centers = synthetic_centers(3, 4);
        for (row, &y) in ds.features.rows().into_iter().zip(&ds.labels) {
            assert_eq!(row.to_vec(), centers[y]);
        }
    }

    #[test]
    fn test_iid_equal_split() {
        let ds = generate_synthetic(4, 2, 25, 0.1, 3).unwrap();
        let parts = partition_indices(&ds.labels, 4, &PartitionPlan::iid(4, 11)).unwrap();
        assert!(parts.iter().all(|p| p.len() == 25));
        let mut all: Vec<usize> = parts.concat();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());

        let parts = partition_indices(&ds.labels[..10], 4, &PartitionPlan::iid(4, 11)).unwrap();
        let sizes: Vec<usize> = parts.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![3, 3, 2, 2]);
    }

    #[test]
    fn test_label_shard_one_class_per_client() {
        let ds = generate_synthetic(2, 2, 40, 0.1, 5).unwrap();
        let parts = partition(&ds, &PartitionPlan::label_shard(2, 1, 2)).unwrap();
        for p in &parts {
            let h = p.class_histogram();
            assert!(h.contains(&0) && h.contains(&40), "{h:?}");
        }
    }

    #[test]
    fn test_dirichlet_large_alpha_matches_global() {
        let ds = generate_synthetic(10, 2, 200, 0.1, 5).unwrap();
        let parts = partition(&ds, &PartitionPlan::dirichlet(4, 1e6, 8)).unwrap();
        for p in &parts {
            for h in p.class_histogram() {
                assert!((h as f64 / p.len() as f64 - 0.1).abs() < 0.05);
            }
        }
    }

    #[test]
    fn test_partition_errors() {
        let ds = generate_synthetic(2, 2, 2, 0.1, 5).unwrap();
        assert!(matches!(
            partition(&ds, &PartitionPlan::iid(5, 0)),
            Err(Error::Partition(_))
        ));
        assert!(partition(&ds, &PartitionPlan::iid(1, 0)).is_err());
        assert!(partition(&ds, &PartitionPlan::dirichlet(2, 0.0, 0)).is_err());
        // 4 samples, 4 clients with tiny alpha: some client almost surely gets nothing.
        let err = (0..20).any(|s| partition(&ds, &PartitionPlan::dirichlet(4, 1e-3, s)).is_err());
        assert!(err);
    }

    #[test]
    fn test_label_shard_skews_more_than_iid() {
        let ds = generate_synthetic(10, 2, 100, 0.1, 1).unwrap();
        let iid = label_skew(&partition(&ds, &PartitionPlan::iid(10, 4)).unwrap());
        let shard = label_skew(&partition(&ds, &PartitionPlan::label_shard(10, 1, 4)).unwrap());
        assert!(shard >= 3.0 * iid, "shard {shard} iid {iid}");
    }

    #[test]
    fn test_csv_header() {
        let ds = generate_synthetic(2, 3, 1, 0.0, 1).unwrap();
        let mut out = Vec::new();
        ds.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("f0,f1,f2,label"));
        assert_eq!(text.lines().count(), 3);
        assert!(lines.next().unwrap().ends_with(",0"));
    }
}
