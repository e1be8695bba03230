//! Label-free shift estimation and the adaptive learning rate.
//!
//! The server builds a confusion matrix of the pretrained model once. Each
//! client then
//!
//! 1. corrects its predicted-label histogram into a label-prior estimate
//!    (black-box shift estimation, BBSE), which weights the anchor class risks;
//! 2. summarizes its current batch by the mean softmax `q` and the mean unit
//!    hidden vector `z`;
//! 3. turns the movement of `q` and `z` since its previous step into a drift
//!    signal `S ∈ [0, 1]` and maps it affinely into `[η_min, η_max]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{predict, Scratch, SplitParams, UnlabeledBatch};
use crate::numerics::{cosine, norm2, simplex_project, solve_regularized, Mat, ProbVector, ZERO_NORM};
use crate::model::LabeledBatch;

/// Default Tikhonov ridge for the BBSE solve.
pub const DEFAULT_BBSE_RIDGE: f64 = 1e-6;

/// `m[i][j] = P(predict i | true class j)`; every column sums to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    m: Mat,
    sample_count: usize,
}

impl ConfusionMatrix {
    /// Validates nonnegativity and unit column sums.
    pub fn new(m: Mat, sample_count: usize) -> Result<Self> {
        if m.rows() != m.cols() {
            return Err(Error::arg("confusion matrix must be square"));
        }
        if m.as_slice().iter().any(|&v| v < 0.0) {
            return Err(Error::arg("confusion matrix entries must be nonnegative"));
        }
        for j in 0..m.cols() {
            let col: f64 = (0..m.rows()).map(|i| m[(i, j)]).sum();
            if (col - 1.0).abs() > 1e-9 {
                return Err(Error::arg(format!("column {j} sums to {col}")));
            }
        }
        Ok(Self { m, sample_count })
    }

    pub fn matrix(&self) -> &Mat {
        &self.m
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    pub fn num_classes(&self) -> usize {
        self.m.rows()
    }
}

/// Tallies argmax predictions against true labels.
pub fn build_confusion(model: &SplitParams, data: &LabeledBatch) -> Result<ConfusionMatrix> {
    let k = model.dims().num_classes;
    let counts = data.check_coverage(k)?;
    let preds = predict(model, data.inputs())?;
    let mut m = Mat::zeros(k, k);
    for (&p, &y) in preds.iter().zip(data.labels()) {
        m[(p, y)] += 1.0;
    }
    for (j, &c) in counts.iter().enumerate() {
        for i in 0..k {
            m[(i, j)] /= c as f64;
        }
    }
    ConfusionMatrix::new(m, data.len())
}

/// A BBSE estimate with the raw (pre-projection) solve kept for diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct BbseEstimate {
    pub prior: ProbVector,
    pub raw: Vec<f64>,
}

impl BbseEstimate {
    /// The solve landed far outside the simplex, which points at a
    /// near-singular confusion matrix.
    pub fn poorly_conditioned(&self) -> bool {
        self.raw.iter().any(|&v| v < -0.5)
    }
}

/// Solves `M x ≈ q_hat` (ridge-regularized) and projects onto the simplex.
pub fn bbse_estimate(conf: &ConfusionMatrix, q_hat: &ProbVector, ridge: f64) -> Result<ProbVector> {
    bbse_estimate_detailed(conf, q_hat, ridge).map(|e| e.prior)
}

pub fn bbse_estimate_detailed(conf: &ConfusionMatrix, q_hat: &ProbVector, ridge: f64) -> Result<BbseEstimate> {
    if q_hat.len() != conf.num_classes() {
        return Err(Error::arg("histogram length does not match the confusion matrix"));
    }
    let raw = solve_regularized(conf.matrix(), q_hat.as_slice(), ridge)?;
    let prior = simplex_project(&raw)?;
    let estimate = BbseEstimate { prior, raw };
    if estimate.poorly_conditioned() {
        log::warn!("BBSE solve far outside the simplex (ridge {ridge:e}): {:?}", estimate.raw);
    }
    Ok(estimate)
}

/// Normalized histogram of argmax predictions.
pub fn prediction_histogram(model: &SplitParams, batch: &UnlabeledBatch) -> Result<ProbVector> {
    let k = model.dims().num_classes;
    let preds = predict(model, batch)?;
    let mut hist = vec![0.0; k];
    for p in preds {
        hist[p] += 1.0;
    }
    let n = batch.len() as f64;
    hist.iter_mut().for_each(|h| *h /= n);
    ProbVector::new(hist)
}

/// Batch summaries driving the dynamics signals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    /// Mean softmax output.
    pub q: ProbVector,
    /// Mean of the ℓ2-normalized hidden vectors; dead samples contribute zero.
    pub z: Vec<f64>,
}

pub fn batch_summary(model: &SplitParams, batch: &UnlabeledBatch) -> Result<BatchSummary> {
    let dims = model.dims();
    if batch.features().cols() != dims.input_dim {
        return Err(Error::arg("batch feature count does not match the model"));
    }
    let mut q = vec![0.0; dims.num_classes];
    let mut z = vec![0.0; dims.hidden_dim];
    let mut scratch = Scratch::new(dims);
    for x in batch.samples() {
        model.forward_into(x, &mut scratch);
        for (acc, p) in q.iter_mut().zip(&scratch.probs) {
            *acc += p;
        }
        let norm = norm2(&scratch.hidden);
        if norm >= ZERO_NORM {
            for (acc, h) in z.iter_mut().zip(&scratch.hidden) {
                *acc += h / norm;
            }
        }
    }
    let n = batch.len() as f64;
    q.iter_mut().for_each(|v| *v /= n);
    z.iter_mut().for_each(|v| *v /= n);
    Ok(BatchSummary { q: ProbVector::new_unchecked(q), z })
}

/// Uncertainty dynamics: `1 − cos(q_prev, q_cur)`.
pub fn s_unc(q_prev: &ProbVector, q_cur: &ProbVector) -> Result<f64> {
    Ok(1.0 - cosine(q_prev.as_slice(), q_cur.as_slice())?)
}

/// Representation dynamics: `(1 − cos(z_prev, z_cur)) / 2`.
pub fn s_rep(z_prev: &[f64], z_cur: &[f64]) -> Result<f64> {
    Ok(0.5 * (1.0 - cosine(z_prev, z_cur)?))
}

/// Mean of the two signals.
pub fn combine_signal(s_unc: f64, s_rep: f64) -> Result<f64> {
    for (name, v) in [("s_unc", s_unc), ("s_rep", s_rep)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::arg(format!("{name} = {v} outside [0, 1]")));
        }
    }
    Ok(0.5 * (s_unc + s_rep))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBounds", into = "RawBounds")]
pub struct RateBounds {
    eta_min: f64,
    eta_max: f64,
}

#[derive(Serialize, Deserialize)]
struct RawBounds {
    eta_min: f64,
    eta_max: f64,
}

impl TryFrom<RawBounds> for RateBounds {
    type Error = Error;

    fn try_from(r: RawBounds) -> Result<Self> {
        RateBounds::new(r.eta_min, r.eta_max)
    }
}

impl From<RateBounds> for RawBounds {
    fn from(b: RateBounds) -> Self {
        RawBounds { eta_min: b.eta_min, eta_max: b.eta_max }
    }
}

impl RateBounds {
    /// Learning-rate bounds used for the image benchmarks.
    pub const IMAGE_DEFAULT: RateBounds = RateBounds { eta_min: 5e-6, eta_max: 1e-4 };

    pub fn new(eta_min: f64, eta_max: f64) -> Result<Self> {
        if !(eta_min > 0.0 && eta_min.is_finite() && eta_max.is_finite() && eta_min <= eta_max) {
            return Err(Error::arg(format!(
                "RateBounds need 0 < eta_min <= eta_max (got eta_min={eta_min}, eta_max={eta_max})"
            )));
        }
        Ok(Self { eta_min, eta_max })
    }

    pub fn eta_min(&self) -> f64 {
        self.eta_min
    }

    pub fn eta_max(&self) -> f64 {
        self.eta_max
    }

    pub fn contains(&self, eta: f64) -> bool {
        (self.eta_min..=self.eta_max).contains(&eta)
    }
}

impl Default for RateBounds {
    fn default() -> Self {
        Self::IMAGE_DEFAULT
    }
}

/// `η_min + (η_max − η_min)·s`
pub fn adaptive_eta(s: f64, bounds: RateBounds) -> Result<f64> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::arg(format!("signal {s} outside [0, 1]")));
    }
    Ok((bounds.eta_min + (bounds.eta_max - bounds.eta_min) * s).clamp(bounds.eta_min, bounds.eta_max))
}

/// Reference rate `scale · T^{-1/3} · cum_shift^{1/3}`; reported only.
pub fn optimal_eta_reference(horizon: usize, cum_shift: f64, scale: f64) -> Result<f64> {
    if horizon == 0 || cum_shift.is_nan() || cum_shift < 0.0 || scale.is_nan() || scale <= 0.0 {
        return Err(Error::arg("optimal_eta_reference needs T >= 1, cum_shift >= 0, scale > 0"));
    }
    Ok(scale * (horizon as f64).powf(-1.0 / 3.0) * cum_shift.cbrt())
}

/// Distance used for the uncertainty signal. Cosine is the method; the
/// others exist for ablations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyMeasure {
    #[default]
    Cosine,
    /// `1 − exp(−KL(q_cur ‖ q_prev))` with a 1e-8 floor on both inputs.
    Kl,
    /// 1-D Wasserstein distance on class-index CDFs, divided by `K − 1`.
    Wasserstein,
}

pub fn uncertainty_signal(measure: UncertaintyMeasure, q_prev: &ProbVector, q_cur: &ProbVector) -> Result<f64> {
    if q_prev.len() != q_cur.len() {
        return Err(Error::arg("summaries have different lengths"));
    }
    match measure {
        UncertaintyMeasure::Cosine => s_unc(q_prev, q_cur),
        UncertaintyMeasure::Kl => {
            const FLOOR: f64 = 1e-8;
            let smooth = |p: &ProbVector| -> Vec<f64> {
                let total: f64 = p.as_slice().iter().map(|v| v + FLOOR).sum();
                p.as_slice().iter().map(|v| (v + FLOOR) / total).collect()
            };
            let (a, b) = (smooth(q_cur), smooth(q_prev));
            let kl: f64 = a.iter().zip(&b).map(|(p, q)| p * (p / q).ln()).sum();
            Ok((1.0 - (-kl.max(0.0)).exp()).clamp(0.0, 1.0))
        }
        UncertaintyMeasure::Wasserstein => {
            let k = q_cur.len();
            if k < 2 {
                return Ok(0.0);
            }
            let (mut ca, mut cb, mut dist) = (0.0, 0.0, 0.0);
            for (a, b) in q_prev.as_slice().iter().zip(q_cur.as_slice()).take(k - 1) {
                ca += a;
                cb += b;
                dist += (ca - cb).abs();
            }
            Ok((dist / (k - 1) as f64).clamp(0.0, 1.0))
        }
    }
}

/// Signals and rate for one client at one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Signals {
    pub s_unc: f64,
    pub s_rep: f64,
    pub s: f64,
    pub eta: f64,
}

/// Compares a fresh summary against the cached one. A degenerate `z` (every
/// hidden unit dead) counts as no representation drift.
pub fn dynamics(
    prev: &BatchSummary,
    cur: &BatchSummary,
    measure: UncertaintyMeasure,
) -> Result<(f64, f64, f64)> {
    let unc = uncertainty_signal(measure, &prev.q, &cur.q)?;
    let rep = match s_rep(&prev.z, &cur.z) {
        Ok(v) => v,
        Err(Error::DegenerateInput(_)) => 0.0,
        Err(e) => return Err(e),
    };
    Ok((unc, rep, combine_signal(unc, rep)?))
}
