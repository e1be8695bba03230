//! A one-hidden-layer split classifier.
//!
//! The first (ReLU) layer is the shared feature extractor that the server
//! averages across clients; the output layer is the personalized head that
//! never leaves the client. Training objectives are reweighted class-wise
//! cross-entropies over a labeled anchor set.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{argmax, softmax_unchecked, Mat, ProbVector};

/// Cross-entropy clamps probabilities from below at this value.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
}

/// Which parameter blocks a gradient or update touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateScope {
    /// Shared and personalized layers together.
    Joint,
    /// Personalized head only; shared layers frozen.
    HeadOnly,
}

/// Affine layer `weight · x + bias`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Mat,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(outputs: usize, inputs: usize) -> Self {
        Self { weight: Mat::zeros(outputs, inputs), bias: vec![0.0; outputs] }
    }

    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        let cols = self.weight.cols();
        for ((o, row), b) in out.iter_mut().zip(self.weight.as_slice().chunks(cols)).zip(&self.bias) {
            *o = b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
    }

    pub fn num_params(&self) -> usize {
        self.weight.as_slice().len() + self.bias.len()
    }

    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.weight.as_slice().iter().chain(self.bias.iter())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weight.as_mut_slice().iter_mut().chain(self.bias.iter_mut())
    }

    fn same_shape(&self, other: &Layer) -> bool {
        self.weight.rows() == other.weight.rows()
            && self.weight.cols() == other.weight.cols()
            && self.bias.len() == other.bias.len()
    }
}

/// Model parameters split into the shared part and the personalized head.
///
/// Gradients use the same structure.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitParams {
    /// Feature extractor, `hidden_dim × input_dim`.
    pub shared: Layer,
    /// Classifier head, `num_classes × hidden_dim`.
    pub head: Layer,
}

/// Output of a single forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub hidden: Vec<f64>,
    pub probs: ProbVector,
}

impl SplitParams {
    pub fn zeros(dims: ModelDims) -> Self {
        Self {
            shared: Layer::zeros(dims.hidden_dim, dims.input_dim),
            head: Layer::zeros(dims.num_classes, dims.hidden_dim),
        }
    }

    /// Weights uniform in `±1/√fan_in`, biases zero.
    pub fn init<R: Rng + ?Sized>(dims: ModelDims, rng: &mut R) -> Result<Self> {
        if dims.input_dim == 0 || dims.hidden_dim == 0 || dims.num_classes < 2 {
            return Err(Error::arg(format!("invalid model dimensions {dims:?}")));
        }
        let mut params = Self::zeros(dims);
        for layer in [&mut params.shared, &mut params.head] {
            let bound = 1.0 / (layer.weight.cols() as f64).sqrt();
            for w in layer.weight.as_mut_slice() {
                *w = rng.random_range(-bound..=bound);
            }
        }
        Ok(params)
    }

    pub fn from_layers(shared: Layer, head: Layer) -> Result<Self> {
        let params = Self { shared, head };
        params.validate()?;
        Ok(params)
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            input_dim: self.shared.weight.cols(),
            hidden_dim: self.shared.weight.rows(),
            num_classes: self.head.weight.rows(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dims();
        if d.hidden_dim == 0 || d.input_dim == 0 || d.num_classes == 0 {
            return Err(Error::arg("empty layer"));
        }
        if self.shared.bias.len() != d.hidden_dim
            || self.head.weight.cols() != d.hidden_dim
            || self.head.bias.len() != d.num_classes
        {
            return Err(Error::arg("inconsistent layer dimensions"));
        }
        if self.values().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite parameter".into()));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.shared.num_params() + self.head.num_params()
    }

    /// All parameters, shared blocks first.
    pub fn values(&self) -> impl Iterator<Item = &f64> {
        self.shared.values().chain(self.head.values())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.shared.values_mut().chain(self.head.values_mut())
    }

    pub fn same_shape(&self, other: &SplitParams) -> bool {
        self.shared.same_shape(&other.shared) && self.head.same_shape(&other.head)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Forward> {
        let dims = self.dims();
        if x.len() != dims.input_dim {
            return Err(Error::arg(format!(
                "input has {} features, model expects {}",
                x.len(),
                dims.input_dim
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg("input must be finite"));
        }
        let mut scratch = Scratch::new(dims);
        self.forward_into(x, &mut scratch);
        Ok(Forward {
            hidden: scratch.hidden,
            probs: ProbVector::new_unchecked(scratch.probs),
        })
    }

    /// Forward pass into preallocated buffers; `x` must have `input_dim` entries.
    pub(crate) fn forward_into(&self, x: &[f64], s: &mut Scratch) {
        self.shared.apply_into(x, &mut s.hidden);
        for h in &mut s.hidden {
            *h = h.max(0.0);
        }
        self.head.apply_into(&s.hidden, &mut s.logits);
        s.probs = softmax_unchecked(&s.logits);
    }

    /// `self − eta · grad` on the blocks selected by `scope`; other blocks
    /// are copied bit-for-bit.
    pub fn sgd_step(&self, grad: &SplitParams, eta: f64, scope: UpdateScope) -> Result<SplitParams> {
        let mut next = self.clone();
        next.apply_step(grad, eta, scope)?;
        Ok(next)
    }

    pub fn apply_step(&mut self, grad: &SplitParams, eta: f64, scope: UpdateScope) -> Result<()> {
        if !(eta >= 0.0 && eta.is_finite()) {
            return Err(Error::arg(format!("learning rate must be finite and nonnegative, got {eta}")));
        }
        if !self.same_shape(grad) {
            return Err(Error::arg("gradient shape does not match parameters"));
        }
        if eta == 0.0 {
            return Ok(());
        }
        if scope == UpdateScope::Joint {
            for (p, g) in self.shared.values_mut().zip(grad.shared.values()) {
                *p -= eta * g;
            }
        }
        for (p, g) in self.head.values_mut().zip(grad.head.values()) {
            *p -= eta * g;
        }
        Ok(())
    }
}

/// Reusable forward-pass buffers.
pub(crate) struct Scratch {
    pub hidden: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl Scratch {
    pub fn new(dims: ModelDims) -> Self {
        Self {
            hidden: vec![0.0; dims.hidden_dim],
            logits: vec![0.0; dims.num_classes],
            probs: vec![0.0; dims.num_classes],
        }
    }
}

/// Unlabeled inputs, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledBatch {
    features: Mat,
}

impl UnlabeledBatch {
    pub fn new(features: Mat) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::arg("empty batch"));
        }
        Ok(Self { features })
    }

    pub fn features(&self) -> &Mat {
        &self.features
    }

    pub fn features_mut(&mut self) -> &mut Mat {
        &mut self.features
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn samples(&self) -> impl Iterator<Item = &[f64]> {
        self.features.as_slice().chunks(self.features.cols())
    }
}

/// Inputs with their class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    inputs: UnlabeledBatch,
    labels: Vec<usize>,
}

impl LabeledBatch {
    pub fn new(features: Mat, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != features.rows() {
            return Err(Error::arg(format!(
                "{} labels for {} samples",
                labels.len(),
                features.rows()
            )));
        }
        Ok(Self { inputs: UnlabeledBatch::new(features)?, labels })
    }

    pub fn inputs(&self) -> &UnlabeledBatch {
        &self.inputs
    }

    pub fn inputs_mut(&mut self) -> &mut UnlabeledBatch {
        &mut self.inputs
    }

    pub fn features(&self) -> &Mat {
        self.inputs.features()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-class sample counts; errors if any label is out of range.
    pub fn class_counts(&self, num_classes: usize) -> Result<Vec<usize>> {
        let mut counts = vec![0usize; num_classes];
        for &y in &self.labels {
            if y >= num_classes {
                return Err(Error::arg(format!("label {y} out of range for {num_classes} classes")));
            }
            counts[y] += 1;
        }
        Ok(counts)
    }

    /// Errors with the lowest missing class if coverage is incomplete.
    pub fn check_coverage(&self, num_classes: usize) -> Result<Vec<usize>> {
        let counts = self.class_counts(num_classes)?;
        match counts.iter().position(|&c| c == 0) {
            Some(class) => Err(Error::Coverage { class }),
            None => Ok(counts),
        }
    }
}

fn check_batch(params: &SplitParams, features: &Mat) -> Result<()> {
    if features.cols() != params.dims().input_dim {
        return Err(Error::arg(format!(
            "batch has {} features, model expects {}",
            features.cols(),
            params.dims().input_dim
        )));
    }
    Ok(())
}

fn cross_entropy(probs: &[f64], label: usize) -> f64 {
    -probs[label].max(PROB_FLOOR).ln()
}

/// Mean cross-entropy over anchor samples of each class.
pub fn class_wise_risks(params: &SplitParams, anchor: &LabeledBatch) -> Result<Vec<f64>> {
    let k = params.dims().num_classes;
    check_batch(params, anchor.features())?;
    let counts = anchor.check_coverage(k)?;
    let mut sums = vec![0.0; k];
    let mut scratch = Scratch::new(params.dims());
    for (x, &y) in anchor.inputs().samples().zip(anchor.labels()) {
        params.forward_into(x, &mut scratch);
        sums[y] += cross_entropy(&scratch.probs, y);
    }
    Ok(sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect())
}

fn check_weights(params: &SplitParams, weights: &ProbVector) -> Result<()> {
    let k = params.dims().num_classes;
    if weights.len() != k {
        return Err(Error::arg(format!("{} class weights for {k} classes", weights.len())));
    }
    Ok(())
}

/// `Σ_i w_i · (class-i mean cross-entropy on the anchor)`.
pub fn weighted_risk(params: &SplitParams, anchor: &LabeledBatch, weights: &ProbVector) -> Result<f64> {
    check_weights(params, weights)?;
    let risks = class_wise_risks(params, anchor)?;
    Ok(risks.iter().zip(weights.as_slice()).map(|(r, w)| r * w).sum())
}

/// Analytic gradient of [`weighted_risk`]. `HeadOnly` leaves the shared
/// blocks exactly zero.
pub fn grad_weighted_risk(
    params: &SplitParams,
    anchor: &LabeledBatch,
    weights: &ProbVector,
    scope: UpdateScope,
) -> Result<SplitParams> {
    check_weights(params, weights)?;
    check_batch(params, anchor.features())?;
    let counts = anchor.check_coverage(params.dims().num_classes)?;
    let per_class: Vec<f64> = weights.as_slice().iter().zip(&counts).map(|(w, &c)| w / c as f64).collect();
    let sample_weights: Vec<f64> = anchor.labels().iter().map(|&y| per_class[y]).collect();
    Ok(grad_sample_weighted(params, anchor.features(), anchor.labels(), &sample_weights, scope))
}

/// Mean cross-entropy over a labeled batch.
pub fn mean_cross_entropy(params: &SplitParams, batch: &LabeledBatch) -> Result<f64> {
    check_batch(params, batch.features())?;
    batch.class_counts(params.dims().num_classes)?;
    let mut scratch = Scratch::new(params.dims());
    let total: f64 = batch
        .inputs()
        .samples()
        .zip(batch.labels())
        .map(|(x, &y)| {
            params.forward_into(x, &mut scratch);
            cross_entropy(&scratch.probs, y)
        })
        .sum();
    Ok(total / batch.len() as f64)
}

/// Gradient of the plain mean cross-entropy over a batch.
pub fn grad_mean_cross_entropy(params: &SplitParams, batch: &LabeledBatch) -> Result<SplitParams> {
    check_batch(params, batch.features())?;
    batch.class_counts(params.dims().num_classes)?;
    let w = vec![1.0 / batch.len() as f64; batch.len()];
    Ok(grad_sample_weighted(params, batch.features(), batch.labels(), &w, UpdateScope::Joint))
}

/// Backpropagation of `Σ_s a_s · CE_s`. Labels and dimensions are assumed
/// checked by the caller.
fn grad_sample_weighted(
    params: &SplitParams,
    features: &Mat,
    labels: &[usize],
    sample_weights: &[f64],
    scope: UpdateScope,
) -> SplitParams {
    let dims = params.dims();
    let mut grad = SplitParams::zeros(dims);
    let mut scratch = Scratch::new(dims);
    let mut d_logits = vec![0.0; dims.num_classes];
    let mut d_hidden = vec![0.0; dims.hidden_dim];

    for ((x, &y), &a) in features.as_slice().chunks(dims.input_dim).zip(labels).zip(sample_weights) {
        if a == 0.0 {
            continue;
        }
        params.forward_into(x, &mut scratch);
        if scratch.probs[y] < PROB_FLOOR {
            // The clamped loss is flat here.
            continue;
        }
        for (k, d) in d_logits.iter_mut().enumerate() {
            *d = a * (scratch.probs[k] - if k == y { 1.0 } else { 0.0 });
        }
        for (k, &d) in d_logits.iter().enumerate() {
            grad.head.bias[k] += d;
            for (g, h) in grad.head.weight.row_mut(k).iter_mut().zip(&scratch.hidden) {
                *g += d * h;
            }
        }
        if scope == UpdateScope::Joint {
            d_hidden.iter_mut().for_each(|v| *v = 0.0);
            for (k, &d) in d_logits.iter().enumerate() {
                for (dh, w) in d_hidden.iter_mut().zip(params.head.weight.row(k)) {
                    *dh += d * w;
                }
            }
            for (j, (&dh, &h)) in d_hidden.iter().zip(&scratch.hidden).enumerate() {
                // ReLU subgradient at 0 is 0.
                if h <= 0.0 {
                    continue;
                }
                grad.shared.bias[j] += dh;
                for (g, xi) in grad.shared.weight.row_mut(j).iter_mut().zip(x) {
                    *g += dh * xi;
                }
            }
        }
    }
    grad
}

/// Fraction of samples whose argmax prediction matches the label.
pub fn accuracy(params: &SplitParams, batch: &LabeledBatch) -> Result<f64> {
    check_batch(params, batch.features())?;
    let mut scratch = Scratch::new(params.dims());
    let correct = batch
        .inputs()
        .samples()
        .zip(batch.labels())
        .filter(|(x, &y)| {
            params.forward_into(x, &mut scratch);
            argmax(&scratch.probs) == y
        })
        .count();
    Ok(correct as f64 / batch.len() as f64)
}

/// Argmax predictions, ties to the lowest class index.
pub fn predict(params: &SplitParams, batch: &UnlabeledBatch) -> Result<Vec<usize>> {
    check_batch(params, batch.features())?;
    let mut scratch = Scratch::new(params.dims());
    Ok(batch
        .samples()
        .map(|x| {
            params.forward_into(x, &mut scratch);
            argmax(&scratch.probs)
        })
        .collect())
}

/// Flat JSON checkpoint form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsSnapshot {
    #[serde(rename = "shared_W")]
    pub shared_w: Vec<Vec<f64>>,
    pub shared_b: Vec<f64>,
    #[serde(rename = "head_W")]
    pub head_w: Vec<Vec<f64>>,
    pub head_b: Vec<f64>,
    pub dims: ModelDims,
}

impl From<&SplitParams> for ParamsSnapshot {
    fn from(p: &SplitParams) -> Self {
        Self {
            shared_w: p.shared.weight.to_rows(),
            shared_b: p.shared.bias.clone(),
            head_w: p.head.weight.to_rows(),
            head_b: p.head.bias.clone(),
            dims: p.dims(),
        }
    }
}

impl TryFrom<ParamsSnapshot> for SplitParams {
    type Error = Error;

    fn try_from(s: ParamsSnapshot) -> Result<Self> {
        let params = SplitParams::from_layers(
            Layer { weight: Mat::from_rows(&s.shared_w)?, bias: s.shared_b },
            Layer { weight: Mat::from_rows(&s.head_w)?, bias: s.head_b },
        )?;
        if params.dims() != s.dims {
            return Err(Error::arg("snapshot dims do not match its matrices"));
        }
        Ok(params)
    }
}

impl Serialize for SplitParams {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        ParamsSnapshot::from(self).serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for SplitParams {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let snapshot = ParamsSnapshot::deserialize(deserializer)?;
        SplitParams::try_from(snapshot).map_err(serde::de::Error::custom)
    }
}

/// Central finite differences of [`weighted_risk`], used as a reference for
/// the analytic gradient.
pub mod gradcheck {
    use super::*;

    pub fn finite_difference_gradient(
        params: &SplitParams,
        anchor: &LabeledBatch,
        weights: &ProbVector,
        step: f64,
    ) -> Result<SplitParams> {
        let mut probe = params.clone();
        let mut grad = SplitParams::zeros(params.dims());
        let n = params.num_params();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let original = *params.values().nth(i).expect("index in range");
            *probe.values_mut().nth(i).expect("index in range") = original + step;
            let up = weighted_risk(&probe, anchor, weights)?;
            *probe.values_mut().nth(i).expect("index in range") = original - step;
            let down = weighted_risk(&probe, anchor, weights)?;
            *probe.values_mut().nth(i).expect("index in range") = original;
            out.push((up - down) / (2.0 * step));
        }
        for (g, v) in grad.values_mut().zip(out) {
            *g = v;
        }
        Ok(grad)
    }

    /// `max_i |a_i − b_i| / max(|a_i| + |b_i|, floor)`.
    pub fn max_relative_error(a: &SplitParams, b: &SplitParams, floor: f64) -> f64 {
        a.values()
            .zip(b.values())
            .map(|(x, y)| (x - y).abs() / (x.abs() + y.abs()).max(floor))
            .fold(0.0, f64::max)
    }
}
