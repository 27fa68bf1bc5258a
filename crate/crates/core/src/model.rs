//! Small differentiable classifiers over flat parameter vectors.
//!
//! Two architectures are supported: multinomial softmax regression and a
//! one-hidden-layer ReLU perceptron. Both expose the same flat-vector
//! interface so that aggregation rules never need to know which one is in use.
//!
//! Parameter layout is fixed: for every layer, the weight matrix in row-major
//! `(out, in)` order followed by the bias vector, layers in forward order.

use std::io::{Read, Write};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower clamp applied to probabilities before taking logarithms.
pub const PROB_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    SoftmaxRegression,
    Mlp,
}

/// Architecture description. Only ReLU is supported as hidden activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub num_classes: usize,
    /// Ignored for softmax regression.
    pub hidden_dim: usize,
}

impl ModelSpec {
    pub fn softmax_regression(input_dim: usize, num_classes: usize) -> Result<Self> {
        let spec = ModelSpec {
            kind: ModelKind::SoftmaxRegression,
            input_dim,
            num_classes,
            hidden_dim: 0,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn mlp(input_dim: usize, hidden_dim: usize, num_classes: usize) -> Result<Self> {
        let spec = ModelSpec {
            kind: ModelKind::Mlp,
            input_dim,
            num_classes,
            hidden_dim,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim < 1 {
            return Err(Error::Argument("input_dim must be at least 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Argument("num_classes must be at least 2".into()));
        }
        if self.kind == ModelKind::Mlp && self.hidden_dim < 1 {
            return Err(Error::Argument("hidden_dim must be at least 1 for mlp".into()));
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        let (d, c, h) = (self.input_dim, self.num_classes, self.hidden_dim);
        match self.kind {
            ModelKind::SoftmaxRegression => c * d + c,
            ModelKind::Mlp => h * d + h + c * h + c,
        }
    }

    /// `(fan_in, fan_out)` per layer in forward order.
    fn layers(&self) -> Vec<(usize, usize)> {
        match self.kind {
            ModelKind::SoftmaxRegression => vec![(self.input_dim, self.num_classes)],
            ModelKind::Mlp => vec![(self.input_dim, self.hidden_dim), (self.hidden_dim, self.num_classes)],
        }
    }
}

/// Flat model parameters (or a flat update of the same shape).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        ParamVector(values)
    }

    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn distance_sq(&self, other: &ParamVector) -> f64 {
        crate::vecops::distance_sq(&self.0, &other.0)
    }

    /// `self - other`, elementwise.
    pub fn sub(&self, other: &ParamVector) -> ParamVector {
        ParamVector(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, scale: f64, other: &ParamVector) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += scale * b;
        }
    }

    /// Little-endian `u64` length followed by little-endian `f64` values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 8 * self.0.len());
        out.extend_from_slice(&(self.0.len() as u64).to_le_bytes());
        for v in &self.0 {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Format {
                field: "length",
                message: format!("need 8 header bytes, got {}", bytes.len()),
            });
        }
        let (head, body) = bytes.split_at(8);
        let len = u64::from_le_bytes(head.try_into().expect("8 bytes")) as usize;
        if body.len() != len.saturating_mul(8) {
            return Err(Error::Format {
                field: "values",
                message: format!("header says {len} values but {} bytes follow", body.len()),
            });
        }
        let values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(ParamVector(values))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(values: Vec<f64>) -> Self {
        ParamVector(values)
    }
}

impl AsRef<[f64]> for ParamVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Borrowed labelled samples.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub features: ArrayView2<'a, f64>,
    pub labels: &'a [usize],
}

impl<'a> Batch<'a> {
    pub fn new(features: ArrayView2<'a, f64>, labels: &'a [usize]) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        Ok(Batch { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn check_params(spec: &ModelSpec, params: &ParamVector) -> Result<()> {
    let expected = spec.parameter_count();
    if params.len() != expected {
        return Err(Error::Shape(format!(
            "parameter vector has {} entries, model needs {expected}",
            params.len()
        )));
    }
    Ok(())
}

fn check_features(spec: &ModelSpec, features: &ArrayView2<f64>) -> Result<()> {
    if features.ncols() != spec.input_dim {
        return Err(Error::Shape(format!(
            "features have {} columns, model expects {}",
            features.ncols(),
            spec.input_dim
        )));
    }
    Ok(())
}

fn check_batch(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> Result<()> {
    check_params(spec, params)?;
    check_features(spec, &batch.features)?;
    if batch.is_empty() {
        return Err(Error::Argument("batch is empty".into()));
    }
    if let Some(&bad) = batch.labels.iter().find(|&&y| y >= spec.num_classes) {
        return Err(Error::Argument(format!(
            "label {bad} out of range for {} classes",
            spec.num_classes
        )));
    }
    Ok(())
}

struct Layer<'a> {
    weights: ArrayView2<'a, f64>,
    bias: ArrayView1<'a, f64>,
}

fn split_layers<'a>(spec: &ModelSpec, params: &'a [f64]) -> Vec<Layer<'a>> {
    let mut offset = 0;
    spec.layers()
        .into_iter()
        .map(|(fan_in, fan_out)| {
            let w = &params[offset..offset + fan_in * fan_out];
            offset += fan_in * fan_out;
            let b = &params[offset..offset + fan_out];
            offset += fan_out;
            Layer {
                weights: ArrayView2::from_shape((fan_out, fan_in), w).expect("layer shape"),
                bias: ArrayView1::from(b),
            }
        })
        .collect()
}

fn affine(input: &ArrayView2<f64>, layer: &Layer) -> Array2<f64> {
    let mut out = input.dot(&layer.weights.t());
    out += &layer.bias;
    out
}

/// Row-wise numerically stable softmax, in place.
fn softmax_rows(logits: &mut Array2<f64>) {
    for mut row in logits.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

struct ForwardPass {
    /// Hidden pre-activations (mlp only).
    hidden_pre: Option<Array2<f64>>,
    hidden_act: Option<Array2<f64>>,
    /// Unclamped softmax output.
    probs: Array2<f64>,
}

fn forward_pass(spec: &ModelSpec, params: &[f64], features: &ArrayView2<f64>) -> ForwardPass {
    let layers = split_layers(spec, params);
    match spec.kind {
        ModelKind::SoftmaxRegression => {
            let mut probs = affine(features, &layers[0]);
            softmax_rows(&mut probs);
            ForwardPass {
                hidden_pre: None,
                hidden_act: None,
                probs,
            }
        }
        ModelKind::Mlp => {
            let pre = affine(features, &layers[0]);
            let act = pre.mapv(|v| v.max(0.0));
            let mut probs = affine(&act.view(), &layers[1]);
            softmax_rows(&mut probs);
            ForwardPass {
                hidden_pre: Some(pre),
                hidden_act: Some(act),
                probs,
            }
        }
    }
}

/// Class-probability rows, entrywise clamped below by [`PROB_EPSILON`].
pub fn forward(spec: &ModelSpec, params: &ParamVector, features: ArrayView2<f64>) -> Result<Array2<f64>> {
    check_params(spec, params)?;
    check_features(spec, &features)?;
    let mut probs = forward_pass(spec, params.as_slice(), &features).probs;
    probs.mapv_inplace(|p| p.max(PROB_EPSILON));
    Ok(probs)
}

fn mean_cross_entropy(probs: &Array2<f64>, labels: &[usize]) -> f64 {
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -probs[[i, y]].max(PROB_EPSILON).ln())
        .sum();
    total / labels.len() as f64
}

/// Mean cross-entropy over the batch.
pub fn loss(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> Result<f64> {
    check_batch(spec, params, batch)?;
    let pass = forward_pass(spec, params.as_slice(), &batch.features);
    Ok(mean_cross_entropy(&pass.probs, batch.labels))
}

/// Loss and its analytic gradient in one forward/backward pass.
///
/// The gradient is that of the unclamped cross-entropy; the clamp only guards
/// the logarithm and is inactive unless a true-class probability drops below
/// [`PROB_EPSILON`].
pub fn loss_and_gradient(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> Result<(f64, ParamVector)> {
    check_batch(spec, params, batch)?;
    let pass = forward_pass(spec, params.as_slice(), &batch.features);
    let loss = mean_cross_entropy(&pass.probs, batch.labels);

    let n = batch.len() as f64;
    let mut delta = pass.probs;
    for (i, &y) in batch.labels.iter().enumerate() {
        delta[[i, y]] -= 1.0;
    }
    delta.mapv_inplace(|v| v / n);

    let mut grad = Vec::with_capacity(spec.parameter_count());
    match spec.kind {
        ModelKind::SoftmaxRegression => {
            let dw = delta.t().dot(&batch.features);
            grad.extend(dw.iter());
            grad.extend(delta.sum_axis(Axis(0)).iter());
        }
        ModelKind::Mlp => {
            let layers = split_layers(spec, params.as_slice());
            let pre = pass.hidden_pre.expect("mlp hidden layer");
            let act = pass.hidden_act.expect("mlp hidden layer");
            let dw2 = delta.t().dot(&act);
            let db2: Array1<f64> = delta.sum_axis(Axis(0));
            let mut dhidden = delta.dot(&layers[1].weights);
            dhidden.zip_mut_with(&pre, |g, &z| {
                if z <= 0.0 {
                    *g = 0.0;
                }
            });
            let dw1 = dhidden.t().dot(&batch.features);
            let db1 = dhidden.sum_axis(Axis(0));
            grad.extend(dw1.iter());
            grad.extend(db1.iter());
            grad.extend(dw2.iter());
            grad.extend(db2.iter());
        }
    }
    Ok((loss, ParamVector(grad)))
}

pub fn gradient(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> Result<ParamVector> {
    loss_and_gradient(spec, params, batch).map(|(_, g)| g)
}

/// `params - lr * grad`.
pub fn sgd_step(params: &ParamVector, grad: &ParamVector, lr: f64) -> Result<ParamVector> {
    if params.len() != grad.len() {
        return Err(Error::Shape(format!(
            "params have {} entries, gradient {}",
            params.len(),
            grad.len()
        )));
    }
    if !(lr > 0.0) {
        return Err(Error::Argument(format!("learning rate must be positive, got {lr}")));
    }
    let mut out = params.clone();
    out.add_scaled(-lr, grad);
    Ok(out)
}

/// Per-layer uniform initialization in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub fn init_params<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> ParamVector {
    let mut values = Vec::with_capacity(spec.parameter_count());
    for (fan_in, fan_out) in spec.layers() {
        let bound = 1.0 / (fan_in as f64).sqrt();
        for _ in 0..fan_in * fan_out + fan_out {
            values.push(rng.random_range(-bound..=bound));
        }
    }
    ParamVector(values)
}

/// Accuracy and mean cross-entropy on a labelled set.
pub fn evaluate(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> Result<(f64, f64)> {
    check_batch(spec, params, batch)?;
    let pass = forward_pass(spec, params.as_slice(), &batch.features);
    let correct = pass
        .probs
        .rows()
        .into_iter()
        .zip(batch.labels)
        .filter(|(row, &y)| argmax(row.iter().copied()) == y)
        .count();
    let loss = mean_cross_entropy(&pass.probs, batch.labels);
    Ok((correct as f64 / batch.len() as f64, loss))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.into_iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}
