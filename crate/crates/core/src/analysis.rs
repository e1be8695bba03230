//! Diagnostics against oracle quantities: cumulative shift surrogates versus
//! true prior path lengths, dynamic regret against a per-step optimal head,
//! and power-law fits of regret growth.
//!
//! The per-step comparator only optimizes the head with features frozen at
//! the pretrained shared layers. That keeps every oracle problem convex and
//! reproducible, at the price of comparing against a smaller model class than
//! unconstrained parameters.

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::estimation::{
    adaptive_eta, batch_summary, bbse_estimate, build_confusion, dynamics, prediction_histogram, BatchSummary,
    RateBounds, Signals, UncertaintyMeasure, DEFAULT_BBSE_RIDGE,
};
use crate::federation::{pretrain, PretrainConfig, RateMode, RunOutput};
use crate::model::{Layer, LabeledBatch, SplitParams};
use crate::numerics::{cosine, dot, l1_distance, norm2, softmax_unchecked, Mat, ProbVector};
use crate::rng::{self, StreamRng};
use crate::shift::{interpolate_prior, make_task, pretrain_prior, sample_dirichlet_priors, PretrainPriorKind, ShiftSchedule, ScheduleKind, SyntheticTask};

/// Header attached to every regret report.
pub const COMPARATOR_NOTE: &str =
    "per-step comparator: head-only optimum with features frozen at the pretrained shared layers";

/// Lipschitz constant used for the cosine bound checks.
pub const COSINE_LIPSCHITZ: f64 = 2.0;

/// One timestep of a single client's stream.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceStep {
    pub true_prior: ProbVector,
    pub summary: BatchSummary,
    pub signals: Signals,
    pub loss: f64,
    pub accuracy: f64,
}

/// A client's stream over `t = 1..T`, plus the state at `t = 0`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StreamTrace {
    pub initial_prior: ProbVector,
    pub initial_summary: BatchSummary,
    pub steps: Vec<TraceStep>,
}

impl StreamTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// True priors `Q⁰, Q¹, …, Q^T`.
    pub fn priors(&self) -> Vec<ProbVector> {
        std::iter::once(self.initial_prior.clone()).chain(self.steps.iter().map(|s| s.true_prior.clone())).collect()
    }

    /// Summaries `q⁰, q¹, …, q^T`.
    pub fn summaries(&self) -> Vec<&BatchSummary> {
        std::iter::once(&self.initial_summary).chain(self.steps.iter().map(|s| &s.summary)).collect()
    }
}

/// Builds one trace per client. Every client must have participated at every
/// timestep, so that each cached summary is the previous step's.
pub fn traces_from_run(output: &RunOutput) -> Result<Vec<StreamTrace>> {
    let num_clients = output.starts.len();
    let mut traces: Vec<StreamTrace> = output
        .starts
        .iter()
        .map(|s| StreamTrace {
            initial_prior: s.initial_prior.clone(),
            initial_summary: s.summary.clone(),
            steps: Vec::with_capacity(output.records.len()),
        })
        .collect();
    for record in &output.records {
        if record.participants.len() != num_clients {
            return Err(Error::arg(format!("timestep {} lacks full participation", record.t)));
        }
        for c in &record.clients {
            let (Some(signals), Some(summary)) = (c.signals, c.summary.clone()) else {
                return Err(Error::arg(format!("client {} has no signals at t = {}", c.client_id, record.t)));
            };
            traces[c.client_id].steps.push(TraceStep {
                true_prior: c.true_prior.clone(),
                summary,
                signals,
                loss: c.loss,
                accuracy: c.accuracy,
            });
        }
    }
    Ok(traces)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Surrogates {
    pub s_unc_sum: f64,
    pub s_rep_sum: f64,
    pub s_combined: f64,
}

pub fn cumulative_surrogates(trace: &StreamTrace) -> Result<Surrogates> {
    cumulative_surrogate_path(trace)?.pop().ok_or_else(|| Error::arg("empty trace"))
}

/// Prefix sums of the signals after every step.
pub fn cumulative_surrogate_path(trace: &StreamTrace) -> Result<Vec<Surrogates>> {
    if trace.is_empty() {
        return Err(Error::arg("empty trace"));
    }
    let (mut u, mut r) = (0.0, 0.0);
    Ok(trace
        .steps
        .iter()
        .map(|s| {
            u += s.signals.s_unc;
            r += s.signals.s_rep;
            Surrogates { s_unc_sum: u, s_rep_sum: r, s_combined: 0.5 * (u + r) }
        })
        .collect())
}

/// `Σ_t ‖p_t − p_{t−1}‖₁`
pub fn true_l1_path(priors: &[ProbVector]) -> Result<f64> {
    if priors.len() < 2 {
        return Err(Error::arg("a path needs at least two priors"));
    }
    priors.windows(2).map(|w| l1_distance(&w[1], &w[0])).sum()
}

/// Surrogate-versus-truth comparison for one trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GapReport {
    /// `Σ s_unc` from the recorded signals.
    pub surrogate_sum: f64,
    /// `Σ (1 − cos(Q_{t−1}, Q_t))` over the true priors.
    pub true_cosine_sum: f64,
    /// `|surrogate_sum − true_cosine_sum|`
    pub gap: f64,
    pub true_l1_path: f64,
    /// `ε_t = ‖q_t − Q_t‖₂` for `t = 0..T`.
    pub epsilons: Vec<f64>,
    /// `K · Σ (ε_t + ε_{t−1})`
    pub bound: f64,
    /// Steps where the per-step gap exceeds `K (ε_t + ε_{t−1})`.
    pub gap_violations: Vec<usize>,
    /// For each `t`, whether the prefix sum of `s_unc` stays below the prefix
    /// true path plus the prefix bound.
    pub prefix_holds: Vec<bool>,
}

impl GapReport {
    pub fn fraction_holding(&self) -> f64 {
        if self.prefix_holds.is_empty() {
            return 1.0;
        }
        self.prefix_holds.iter().filter(|h| **h).count() as f64 / self.prefix_holds.len() as f64
    }
}

pub fn surrogate_gap_report(trace: &StreamTrace) -> Result<GapReport> {
    if trace.is_empty() {
        return Err(Error::arg("empty trace"));
    }
    let priors = trace.priors();
    let summaries = trace.summaries();
    let mut epsilons = Vec::with_capacity(priors.len());
    for (p, s) in priors.iter().zip(&summaries) {
        if p.len() != s.q.len() {
            return Err(Error::arg("oracle prior and summary have different class counts"));
        }
        let diff: Vec<f64> = p.as_slice().iter().zip(s.q.as_slice()).map(|(a, b)| a - b).collect();
        epsilons.push(norm2(&diff));
    }

    let k = COSINE_LIPSCHITZ;
    let mut report = GapReport {
        surrogate_sum: 0.0,
        true_cosine_sum: 0.0,
        gap: 0.0,
        true_l1_path: 0.0,
        bound: 0.0,
        gap_violations: Vec::new(),
        prefix_holds: Vec::with_capacity(trace.len()),
        epsilons: Vec::new(),
    };
    for (i, step) in trace.steps.iter().enumerate() {
        let t = i + 1;
        let true_cos = 1.0 - cosine(priors[t - 1].as_slice(), priors[t].as_slice())?;
        let eps_pair = epsilons[t] + epsilons[t - 1];
        report.surrogate_sum += step.signals.s_unc;
        report.true_cosine_sum += true_cos;
        report.true_l1_path += l1_distance(&priors[t], &priors[t - 1])?;
        report.bound += k * eps_pair;
        if (step.signals.s_unc - true_cos).abs() > k * eps_pair + 1e-12 {
            report.gap_violations.push(t);
        }
        report.prefix_holds.push(report.surrogate_sum <= report.true_l1_path + report.bound + 1e-12);
    }
    report.gap = (report.surrogate_sum - report.true_cosine_sum).abs();
    report.epsilons = epsilons;
    if !report.gap_violations.is_empty() {
        log::debug!("cosine bound with K = {k} violated at {} steps", report.gap_violations.len());
    }
    Ok(report)
}

/// Tolerance within which an oracle loss may exceed the online loss.
pub const ORACLE_TOLERANCE: f64 = 1e-6;

/// `Σ (loss_t − oracle_t)`. Oracle values above the online loss by at most
/// [`ORACLE_TOLERANCE`] are clipped to it.
pub fn dynamic_regret(losses: &[f64], oracle_losses: &[f64]) -> Result<f64> {
    if losses.len() != oracle_losses.len() {
        return Err(Error::arg(format!(
            "{} losses but {} oracle losses",
            losses.len(),
            oracle_losses.len()
        )));
    }
    let mut total = 0.0;
    for (t, (&l, &o)) in losses.iter().zip(oracle_losses).enumerate() {
        if o > l + ORACLE_TOLERANCE {
            return Err(Error::arg(format!("oracle loss {o} exceeds online loss {l} at step {t}")));
        }
        total += (l - o).max(0.0);
    }
    Ok(total)
}

/// Hidden activations of a frozen shared layer with per-sample weights.
#[derive(Debug, Clone)]
pub struct FrozenFeatures {
    hidden: Mat,
    labels: Vec<usize>,
    num_classes: usize,
}

impl FrozenFeatures {
    pub fn new(shared: &Layer, batch: &LabeledBatch, num_classes: usize) -> Result<Self> {
        if batch.features().cols() != shared.weight.cols() {
            return Err(Error::arg("batch does not match the shared layer"));
        }
        if batch.labels().iter().any(|&y| y >= num_classes) {
            return Err(Error::arg("label out of range"));
        }
        let h = shared.weight.rows();
        let mut values = Vec::with_capacity(batch.len() * h);
        for x in batch.inputs().samples() {
            for (row, b) in (0..h).map(|j| shared.weight.row(j)).zip(&shared.bias) {
                values.push((dot(row, x) + b).max(0.0));
            }
        }
        Ok(Self { hidden: Mat::from_vec(batch.len(), h, values)?, labels: batch.labels().to_vec(), num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Sample weights `Q_y / n_y`, the class-reweighted empirical risk.
    pub fn prior_weights(&self, prior: &ProbVector) -> Result<Vec<f64>> {
        if prior.len() != self.num_classes {
            return Err(Error::arg("prior has the wrong number of classes"));
        }
        let mut counts = vec![0usize; self.num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        if let Some(class) = counts.iter().position(|&n| n == 0) {
            return Err(Error::Coverage { class });
        }
        Ok(self.labels.iter().map(|&y| prior[y] / counts[y] as f64).collect())
    }

    pub fn uniform_weights(&self) -> Vec<f64> {
        vec![1.0 / self.len() as f64; self.len()]
    }

    /// Weighted cross-entropy of a linear softmax head and its gradient.
    pub fn objective(&self, head: &Layer, weights: &[f64]) -> (f64, Layer) {
        let k = self.num_classes;
        let mut grad = Layer::zeros(k, self.hidden.cols());
        let mut loss = 0.0;
        let mut logits = vec![0.0; k];
        for (i, (&y, &w)) in self.labels.iter().zip(weights).enumerate() {
            if w == 0.0 {
                continue;
            }
            let h = self.hidden.row(i);
            for (c, l) in logits.iter_mut().enumerate() {
                *l = dot(head.weight.row(c), h) + head.bias[c];
            }
            let probs = softmax_unchecked(&logits);
            loss -= w * probs[y].max(1e-300).ln();
            for (c, p) in probs.iter().enumerate() {
                let delta = w * (p - if c == y { 1.0 } else { 0.0 });
                grad.bias[c] += delta;
                for (g, hv) in grad.weight.row_mut(c).iter_mut().zip(h) {
                    *g += delta * hv;
                }
            }
        }
        (loss, grad)
    }

    pub fn loss(&self, head: &Layer, weights: &[f64]) -> f64 {
        self.objective(head, weights).0
    }
}

/// Outcome of a head optimization.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadFit {
    pub head: Layer,
    pub loss: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

pub const ORACLE_GRAD_TOL: f64 = 1e-5;
pub const ORACLE_MAX_ITERS: usize = 5000;

/// Full-batch gradient descent with Armijo backtracking.
pub fn fit_head(features: &FrozenFeatures, weights: &[f64], init: Layer, tol: f64, max_iters: usize) -> HeadFit {
    let mut head = init;
    let (mut loss, mut grad) = features.objective(&head, weights);
    let mut step = 1.0;
    let mut iterations = 0;
    loop {
        let gnorm = grad.values().map(|g| g * g).sum::<f64>().sqrt();
        if gnorm <= tol || iterations >= max_iters {
            return HeadFit { head, loss, grad_norm: gnorm, iterations, converged: gnorm <= tol };
        }
        iterations += 1;
        step *= 2.0;
        loop {
            let mut trial = head.clone();
            for (p, g) in trial.values_mut().zip(grad.values()) {
                *p -= step * g;
            }
            let (trial_loss, trial_grad) = features.objective(&trial, weights);
            if trial_loss <= loss - 0.5 * step * gnorm * gnorm || step < 1e-12 {
                head = trial;
                loss = trial_loss;
                grad = trial_grad;
                break;
            }
            step *= 0.5;
        }
    }
}

/// Damped Newton iterations with Armijo backtracking. Converges in a few
/// dozen iterations where gradient descent crawls along near-flat directions
/// (classes whose prior weight is close to zero).
pub fn fit_head_newton(
    features: &FrozenFeatures,
    weights: &[f64],
    init: Layer,
    tol: f64,
    max_iters: usize,
) -> HeadFit {
    let k = features.num_classes;
    let h = features.hidden.cols();
    let stride = h + 1;
    let dim = k * stride;
    // Flat layout: for each class, its weight row followed by its bias.
    let flatten = |layer: &Layer| {
        let mut v = nalgebra::DVector::zeros(dim);
        for c in 0..k {
            for j in 0..h {
                v[c * stride + j] = layer.weight[(c, j)];
            }
            v[c * stride + h] = layer.bias[c];
        }
        v
    };
    let unflatten = |v: &nalgebra::DVector<f64>| {
        let mut layer = Layer::zeros(k, h);
        for c in 0..k {
            for j in 0..h {
                layer.weight[(c, j)] = v[c * stride + j];
            }
            layer.bias[c] = v[c * stride + h];
        }
        layer
    };

    let mut head = init;
    let (mut loss, mut grad) = features.objective(&head, weights);
    let mut iterations = 0;
    loop {
        let g = flatten(&grad);
        let gnorm = g.norm();
        if gnorm <= tol || iterations >= max_iters {
            return HeadFit { head, loss, grad_norm: gnorm, iterations, converged: gnorm <= tol };
        }
        iterations += 1;

        let mut hess = nalgebra::DMatrix::<f64>::zeros(dim, dim);
        let mut logits = vec![0.0; k];
        let mut x = vec![0.0; stride];
        for (i, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            x[..h].copy_from_slice(features.hidden.row(i));
            x[h] = 1.0;
            for (c, l) in logits.iter_mut().enumerate() {
                *l = dot(head.weight.row(c), &x[..h]) + head.bias[c];
            }
            let p = softmax_unchecked(&logits);
            for a in 0..k {
                for b in a..k {
                    let coef = w * (if a == b { p[a] } else { 0.0 } - p[a] * p[b]);
                    if coef == 0.0 {
                        continue;
                    }
                    for r in 0..stride {
                        for s in 0..stride {
                            hess[(a * stride + r, b * stride + s)] += coef * x[r] * x[s];
                        }
                    }
                }
            }
        }
        for a in 0..k {
            for b in a + 1..k {
                for r in 0..stride {
                    for s in 0..stride {
                        hess[(b * stride + s, a * stride + r)] = hess[(a * stride + r, b * stride + s)];
                    }
                }
            }
        }

        let mut damping = 1e-10 * (1.0 + hess.diagonal().max());
        let direction = loop {
            let mut damped = hess.clone();
            for d in 0..dim {
                damped[(d, d)] += damping;
            }
            if let Some(chol) = damped.cholesky() {
                break chol.solve(&g);
            }
            damping *= 10.0;
        };

        let slope = g.dot(&direction);
        let current = flatten(&head);
        let mut step = 1.0;
        loop {
            let trial = unflatten(&(&current - step * &direction));
            let (trial_loss, trial_grad) = features.objective(&trial, weights);
            if trial_loss <= loss - 1e-4 * step * slope || step < 1e-12 {
                head = trial;
                loss = trial_loss;
                grad = trial_grad;
                break;
            }
            step *= 0.5;
        }
    }
}

/// Oracle loss at one timestep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OracleLoss {
    pub loss: f64,
    pub converged: bool,
    pub iterations: usize,
}

pub const ORACLE_SAMPLES: usize = 2000;

/// Trains a zero-initialized head on [`ORACLE_SAMPLES`] labeled samples from
/// `prior_t`, with features frozen at `frozen_shared`, and returns its mean
/// cross-entropy.
pub fn per_step_oracle_loss<R: Rng + ?Sized>(
    task: &SyntheticTask,
    prior_t: &ProbVector,
    frozen_shared: &Layer,
    rng: &mut R,
) -> Result<OracleLoss> {
    let batch = task.sample_batch(prior_t, ORACLE_SAMPLES, rng)?;
    let features = FrozenFeatures::new(frozen_shared, &batch, task.num_classes)?;
    let init = Layer::zeros(task.num_classes, frozen_shared.weight.rows());
    let fit = fit_head(&features, &features.uniform_weights(), init, ORACLE_GRAD_TOL, ORACLE_MAX_ITERS);
    if !fit.converged {
        log::warn!("oracle head stopped at the iteration cap with gradient norm {:e}", fit.grad_norm);
    }
    Ok(OracleLoss { loss: fit.loss, converged: fit.converged, iterations: fit.iterations })
}

/// Power-law fit of regret growth.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateReport {
    pub horizons: Vec<usize>,
    pub regrets: Vec<f64>,
    pub regret_per_step: Vec<f64>,
    pub slope: f64,
    pub intercept: f64,
    pub per_step_decreasing: bool,
    /// Per-step regret strictly decreasing and slope at most [`MAX_REGRET_SLOPE`].
    pub passes: bool,
}

pub const MAX_REGRET_SLOPE: f64 = 0.9;

/// Least-squares fit of `log Reg_T` against `log T`.
pub fn regret_rate_check(results: &[(usize, f64)]) -> Result<RateReport> {
    if results.len() < 3 {
        return Err(Error::arg("a rate fit needs at least three horizons"));
    }
    let mut sorted = results.to_vec();
    sorted.sort_by_key(|(t, _)| *t);
    if sorted.windows(2).any(|w| w[0].0 == w[1].0) || sorted[0].0 == 0 {
        return Err(Error::arg("horizons must be distinct and positive"));
    }
    if sorted.iter().any(|(_, r)| !(*r > 0.0 && r.is_finite())) {
        return Err(Error::arg("regrets must be positive and finite for a log-log fit"));
    }
    let xs: Vec<f64> = sorted.iter().map(|(t, _)| (*t as f64).ln()).collect();
    let ys: Vec<f64> = sorted.iter().map(|(_, r)| r.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let regret_per_step: Vec<f64> = sorted.iter().map(|(t, r)| r / *t as f64).collect();
    let per_step_decreasing = regret_per_step.windows(2).all(|w| w[1] < w[0]);
    Ok(RateReport {
        horizons: sorted.iter().map(|(t, _)| *t).collect(),
        regrets: sorted.iter().map(|(_, r)| *r).collect(),
        regret_per_step,
        slope,
        intercept,
        per_step_decreasing,
        passes: per_step_decreasing && slope <= MAX_REGRET_SLOPE,
    })
}

/// A single client adapting a linear head on frozen pretrained features.
///
/// The anchor pool doubles as the evaluation set: the online loss at step `t`
/// is the `Q^t`-reweighted pool risk of the head after its update, and the
/// comparator minimizes that same convex objective.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegretFixture {
    pub num_classes: usize,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub mean_scale: f64,
    pub noise_std: f64,
    pub alpha: f64,
    pub schedule: ScheduleKind,
    pub horizon: usize,
    pub batch_size: usize,
    pub pool_size: usize,
    pub local_epochs: usize,
    pub rate_mode: RateMode,
    pub bounds: RateBounds,
    pub pretrain: PretrainConfig,
    /// Rebuild the confusion matrix for the current head on the labeled pool
    /// at every step instead of keeping the pretraining one.
    pub refresh_confusion: bool,
    pub seed: u64,
}

impl Default for RegretFixture {
    fn default() -> Self {
        Self {
            num_classes: 5,
            input_dim: 10,
            hidden_dim: 16,
            mean_scale: 1.0,
            noise_std: 1.0,
            alpha: 0.1,
            schedule: ScheduleKind::Linear,
            horizon: 100,
            batch_size: 500,
            pool_size: 2000,
            local_epochs: 4,
            rate_mode: RateMode::Adaptive,
            bounds: RateBounds::new(0.05, 1.0).expect("valid bounds"),
            pretrain: PretrainConfig { hidden_dim: 16, samples: 5000, epochs: 10, eta: 0.1, batch_size: 64 },
            refresh_confusion: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegretRun {
    pub losses: Vec<f64>,
    pub oracle_losses: Vec<f64>,
    pub regret: f64,
    pub signals: Vec<Signals>,
    pub oracle_unconverged: usize,
}

impl RegretFixture {
    pub fn run(&self) -> Result<RegretRun> {
        let k = self.num_classes;
        let task = make_task(k, self.input_dim, self.mean_scale, self.noise_std, &mut rng::stream(self.seed, rng::tag::TASK))?;
        let q0 = pretrain_prior(PretrainPriorKind::Uniform, k)?;
        let pretrained = pretrain(&task, &q0, &self.pretrain, &mut rng::stream(self.seed, rng::tag::PRETRAIN))?;
        let mut conf = build_confusion(&pretrained.params, &pretrained.data)?;

        let mut rng: StreamRng = rng::stream(self.seed, 0);
        let target = sample_dirichlet_priors(self.alpha, 1, k, &mut rng)?.pop().expect("one prior requested");
        let counts = SyntheticTask::stratified_counts(&q0, self.pool_size)?;
        let labels: Vec<usize> = counts.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c, n)).collect();
        let pool = task.features_for(labels, &mut rng)?;
        let features = FrozenFeatures::new(&pretrained.params.shared, &pool, k)?;

        let mut params: SplitParams = pretrained.params.clone();
        let mut prev = batch_summary(&params, pool.inputs())?;
        let mut schedule = ShiftSchedule::new(self.schedule, self.horizon)?;
        let mut oracle_head = params.head.clone();

        let mut run = RegretRun {
            losses: Vec::with_capacity(self.horizon),
            oracle_losses: Vec::with_capacity(self.horizon),
            regret: 0.0,
            signals: Vec::with_capacity(self.horizon),
            oracle_unconverged: 0,
        };
        for t in 1..=self.horizon {
            let omega = schedule.omega(t, &mut rng)?;
            let prior = interpolate_prior(&q0, &target, omega)?;
            let batch = task.sample_batch(&prior, self.batch_size, &mut rng)?;

            if self.refresh_confusion && t > 1 {
                conf = build_confusion(&params, &pool)?;
            }
            let hist = prediction_histogram(&params, batch.inputs())?;
            let estimate = bbse_estimate(&conf, &hist, DEFAULT_BBSE_RIDGE)?;
            let summary = batch_summary(&params, batch.inputs())?;
            let (s_unc, s_rep, s) = dynamics(&prev, &summary, UncertaintyMeasure::Cosine)?;
            let eta = match self.rate_mode {
                RateMode::Adaptive => adaptive_eta(s, self.bounds)?,
                RateMode::Fixed(eta) => eta,
            };
            let est_weights = features.prior_weights(&estimate)?;
            for _ in 0..self.local_epochs {
                let (_, grad) = features.objective(&params.head, &est_weights);
                for (p, g) in params.head.values_mut().zip(grad.values()) {
                    *p -= eta * g;
                }
            }
            prev = summary;

            let true_weights = features.prior_weights(&prior)?;
            let fit = fit_head_newton(&features, &true_weights, oracle_head, ORACLE_GRAD_TOL, ORACLE_MAX_ITERS);
            if !fit.converged {
                run.oracle_unconverged += 1;
            }
            run.losses.push(features.loss(&params.head, &true_weights));
            run.oracle_losses.push(fit.loss);
            run.signals.push(Signals { s_unc, s_rep, s, eta });
            oracle_head = fit.head;
        }
        run.regret = dynamic_regret(&run.losses, &run.oracle_losses)?;
        Ok(run)
    }
}

/// Analysis output for one run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisReport {
    pub comparator: &'static str,
    pub surrogate_sums: Vec<Surrogates>,
    pub true_paths: Vec<f64>,
    pub gaps: Vec<f64>,
    pub bounds: Vec<f64>,
    pub regret_by_t: Vec<(usize, f64)>,
    pub fitted_slope: Option<f64>,
}

impl AnalysisReport {
    pub fn from_traces(traces: &[StreamTrace]) -> Result<Self> {
        let mut report = Self {
            comparator: COMPARATOR_NOTE,
            surrogate_sums: Vec::new(),
            true_paths: Vec::new(),
            gaps: Vec::new(),
            bounds: Vec::new(),
            regret_by_t: Vec::new(),
            fitted_slope: None,
        };
        for trace in traces {
            let gap = surrogate_gap_report(trace)?;
            report.surrogate_sums.push(cumulative_surrogates(trace)?);
            report.true_paths.push(gap.true_l1_path);
            report.gaps.push(gap.gap);
            report.bounds.push(gap.bound);
        }
        Ok(report)
    }
}
