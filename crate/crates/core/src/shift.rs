//! Synthetic non-stationary data.
//!
//! A [`SyntheticTask`] is an isotropic Gaussian mixture with one mean per
//! class. Each client interpolates between an initial class prior and its own
//! target prior along a shift schedule `ω(t)` (label shift), or keeps its prior
//! and adds feature noise whose severity follows `ω(t)` (covariate shift).

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LabeledBatch;
use crate::numerics::{Mat, ProbVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Sine,
    Square,
    Bernoulli,
}

impl ScheduleKind {
    pub fn label(self) -> &'static str {
        match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::Sine => "sine",
            ScheduleKind::Square => "square",
            ScheduleKind::Bernoulli => "bernoulli",
        }
    }
}

/// How negative lobes of the sine schedule are mapped into `[0, 1]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SineMode {
    /// `clamp(sin(πt/√T), 0, 1)`
    #[default]
    Clamp,
    /// `(1 + sin(πt/√T)) / 2`
    Rescale,
}

/// Generator of the interpolation weight `ω(t)` over `t ∈ [0, T]`.
///
/// The Bernoulli schedule is stateful: query it with increasing `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftSchedule {
    kind: ScheduleKind,
    horizon: usize,
    sine_mode: SineMode,
    state: f64,
}

impl ShiftSchedule {
    pub fn new(kind: ScheduleKind, horizon: usize) -> Result<Self> {
        Self::with_sine_mode(kind, horizon, SineMode::default())
    }

    pub fn with_sine_mode(kind: ScheduleKind, horizon: usize, sine_mode: SineMode) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::arg("schedule horizon must be at least 1"));
        }
        Ok(Self { kind, horizon, sine_mode, state: 0.0 })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Length of the constant blocks of the square schedule, `⌈√T / 2⌉`.
    pub fn square_block(&self) -> usize {
        ((self.horizon as f64).sqrt() / 2.0).ceil().max(1.0) as usize
    }

    /// `ω(t)`. Only the Bernoulli schedule draws from `rng`; it flips its
    /// state with probability `1/√T` at every `t ≥ 1` and resets at `t = 0`.
    pub fn omega<R: Rng + ?Sized>(&mut self, t: usize, rng: &mut R) -> Result<f64> {
        if t > self.horizon {
            return Err(Error::arg(format!("t = {t} outside [0, {}]", self.horizon)));
        }
        let big_t = self.horizon as f64;
        let w = match self.kind {
            ScheduleKind::Linear => t as f64 / big_t,
            ScheduleKind::Sine => {
                let s = (std::f64::consts::PI * t as f64 / big_t.sqrt()).sin();
                match self.sine_mode {
                    SineMode::Clamp => s.clamp(0.0, 1.0),
                    SineMode::Rescale => ((1.0 + s) / 2.0).clamp(0.0, 1.0),
                }
            }
            ScheduleKind::Square => ((t / self.square_block()) % 2) as f64,
            ScheduleKind::Bernoulli => {
                if t == 0 {
                    self.state = 0.0;
                } else if rng.random::<f64>() < 1.0 / big_t.sqrt() {
                    self.state = 1.0 - self.state;
                }
                self.state
            }
        };
        Ok(w)
    }
}

/// `(1 − w)·q0 + w·qT`
pub fn interpolate_prior(q0: &ProbVector, q_target: &ProbVector, w: f64) -> Result<ProbVector> {
    if !(0.0..=1.0).contains(&w) {
        return Err(Error::arg(format!("interpolation weight {w} outside [0, 1]")));
    }
    if q0.len() != q_target.len() {
        return Err(Error::arg("priors have different lengths"));
    }
    if w == 0.0 {
        return Ok(q0.clone());
    }
    if w == 1.0 {
        return Ok(q_target.clone());
    }
    let mixed: Vec<f64> =
        q0.as_slice().iter().zip(q_target.as_slice()).map(|(a, b)| (1.0 - w) * a + w * b).collect();
    Ok(ProbVector::new_unchecked(mixed))
}

/// Draws `num_clients` priors from a symmetric Dirichlet via normalized Gamma
/// variates.
pub fn sample_dirichlet_priors<R: Rng + ?Sized>(
    alpha: f64,
    num_clients: usize,
    num_classes: usize,
    rng: &mut R,
) -> Result<Vec<ProbVector>> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::arg(format!("Dirichlet concentration must be positive, got {alpha}")));
    }
    if num_clients == 0 || num_classes == 0 {
        return Err(Error::arg("need at least one client and one class"));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::arg(e.to_string()))?;
    (0..num_clients)
        .map(|_| loop {
            let draws: Vec<f64> = (0..num_classes).map(|_| gamma.sample(rng)).collect();
            // All-underflow draws are possible for tiny alpha; redraw.
            if draws.iter().sum::<f64>() > 0.0 {
                break ProbVector::from_weights(draws);
            }
        })
        .collect()
}

/// Isotropic Gaussian mixture with one mean per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub num_classes: usize,
    pub input_dim: usize,
    pub class_means: Vec<Vec<f64>>,
    pub noise_std: f64,
}

pub fn make_task<R: Rng + ?Sized>(
    num_classes: usize,
    input_dim: usize,
    mean_scale: f64,
    noise_std: f64,
    rng: &mut R,
) -> Result<SyntheticTask> {
    if num_classes < 2 || input_dim == 0 {
        return Err(Error::arg("a task needs at least two classes and one feature"));
    }
    if !(mean_scale >= 0.0 && mean_scale.is_finite()) {
        return Err(Error::arg("mean_scale must be finite and nonnegative"));
    }
    if !(noise_std > 0.0 && noise_std.is_finite()) {
        return Err(Error::arg("noise_std must be positive"));
    }
    let class_means = (0..num_classes)
        .map(|_| {
            (0..input_dim)
                .map(|_| mean_scale * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    Ok(SyntheticTask { num_classes, input_dim, class_means, noise_std })
}

impl SyntheticTask {
    /// Labels i.i.d. from `prior` (inverse CDF); features are the class mean
    /// plus isotropic noise.
    pub fn sample_batch<R: Rng + ?Sized>(&self, prior: &ProbVector, n: usize, rng: &mut R) -> Result<LabeledBatch> {
        if prior.len() != self.num_classes {
            return Err(Error::arg("prior length does not match the task"));
        }
        if n == 0 {
            return Err(Error::arg("batch size must be at least 1"));
        }
        let cdf: Vec<f64> = prior
            .as_slice()
            .iter()
            .scan(0.0, |acc, p| {
                *acc += p;
                Some(*acc)
            })
            .collect();
        let labels: Vec<usize> = (0..n).map(|_| draw_from_cdf(&cdf, rng.random::<f64>())).collect();
        self.features_for(labels, rng)
    }

    /// Batch with the given labels.
    pub fn features_for<R: Rng + ?Sized>(&self, labels: Vec<usize>, rng: &mut R) -> Result<LabeledBatch> {
        let mut values = Vec::with_capacity(labels.len() * self.input_dim);
        for &y in &labels {
            let mean = self
                .class_means
                .get(y)
                .ok_or_else(|| Error::arg(format!("label {y} out of range")))?;
            values.extend(mean.iter().map(|m| m + self.noise_std * rng.sample::<f64, _>(StandardNormal)));
        }
        LabeledBatch::new(Mat::from_vec(labels.len(), self.input_dim, values)?, labels)
    }

    /// Per-class counts as close to `n · prior` as possible (largest
    /// remainder) while giving every class at least one sample.
    pub fn stratified_counts(prior: &ProbVector, n: usize) -> Result<Vec<usize>> {
        let k = prior.len();
        if n < k {
            return Err(Error::arg(format!("{n} samples cannot cover {k} classes")));
        }
        let spare = (n - k) as f64;
        let raw: Vec<f64> = prior.as_slice().iter().map(|p| p * spare).collect();
        let mut counts: Vec<usize> = raw.iter().map(|r| 1 + r.floor() as usize).collect();
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())));
        let mut missing = n - counts.iter().sum::<usize>();
        for &i in order.iter().cycle() {
            if missing == 0 {
                break;
            }
            counts[i] += 1;
            missing -= 1;
        }
        Ok(counts)
    }
}

fn draw_from_cdf(cdf: &[f64], u: f64) -> usize {
    cdf.iter().position(|&c| u < c).unwrap_or_else(|| {
        // Rounding left the last cumulative value below 1; take the last
        // class with positive mass.
        let last = cdf.len() - 1;
        (0..=last).rev().find(|&i| i == 0 || cdf[i] > cdf[i - 1]).unwrap_or(last)
    })
}

/// Adds `severity · N(0, 1)` to every feature. Severity 0 leaves the batch
/// bit-identical and draws nothing.
pub fn corrupt<R: Rng + ?Sized>(batch: &LabeledBatch, severity: f64, rng: &mut R) -> Result<LabeledBatch> {
    if !(severity >= 0.0 && severity.is_finite()) {
        return Err(Error::arg(format!("severity must be finite and nonnegative, got {severity}")));
    }
    let mut out = batch.clone();
    if severity > 0.0 {
        for v in out.inputs_mut().features_mut().as_mut_slice() {
            *v += severity * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(out)
}

/// Class prior of the pre-training data.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainPriorKind {
    #[default]
    Uniform,
    Gaussian,
    ExpDecay,
}

pub fn pretrain_prior(kind: PretrainPriorKind, num_classes: usize) -> Result<ProbVector> {
    if num_classes < 2 {
        return Err(Error::arg("need at least two classes"));
    }
    let k = num_classes as f64;
    let weights: Vec<f64> = (0..num_classes)
        .map(|i| {
            let i = i as f64;
            match kind {
                PretrainPriorKind::Uniform => 1.0,
                PretrainPriorKind::Gaussian => {
                    let spread = k / 4.0;
                    (-(i - (k - 1.0) / 2.0).powi(2) / (2.0 * spread * spread)).exp()
                }
                PretrainPriorKind::ExpDecay => (-i / (k / 4.0)).exp(),
            }
        })
        .collect();
    ProbVector::from_weights(weights)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    /// Class priors drift toward per-client Dirichlet targets.
    #[default]
    LabelShift,
    /// Priors stay put; feature corruption grows with `ω(t)`.
    CovariateShift,
    /// Neither priors nor features move.
    Stationary,
}

impl ScenarioKind {
    pub fn label(self) -> &'static str {
        match self {
            ScenarioKind::LabelShift => "label",
            ScenarioKind::CovariateShift => "covariate",
            ScenarioKind::Stationary => "stationary",
        }
    }
}

/// How one client's data moves over time.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientShiftProfile {
    initial_prior: ProbVector,
    target_prior: ProbVector,
    schedule: ShiftSchedule,
    scenario: ScenarioKind,
    max_severity: f64,
}

impl ClientShiftProfile {
    pub fn label_shift(initial: ProbVector, target: ProbVector, schedule: ShiftSchedule) -> Result<Self> {
        if initial.len() != target.len() {
            return Err(Error::arg("priors have different lengths"));
        }
        Ok(Self {
            initial_prior: initial,
            target_prior: target,
            schedule,
            scenario: ScenarioKind::LabelShift,
            max_severity: 0.0,
        })
    }

    pub fn covariate_shift(prior: ProbVector, schedule: ShiftSchedule, max_severity: f64) -> Result<Self> {
        if !(max_severity >= 0.0 && max_severity.is_finite()) {
            return Err(Error::arg("corruption severity must be finite and nonnegative"));
        }
        Ok(Self {
            target_prior: prior.clone(),
            initial_prior: prior,
            schedule,
            scenario: ScenarioKind::CovariateShift,
            max_severity,
        })
    }

    pub fn stationary(prior: ProbVector, schedule: ShiftSchedule) -> Self {
        Self {
            target_prior: prior.clone(),
            initial_prior: prior,
            schedule,
            scenario: ScenarioKind::Stationary,
            max_severity: 0.0,
        }
    }

    pub fn initial_prior(&self) -> &ProbVector {
        &self.initial_prior
    }

    pub fn target_prior(&self) -> &ProbVector {
        &self.target_prior
    }

    pub fn scenario(&self) -> ScenarioKind {
        self.scenario
    }

    pub fn max_severity(&self) -> f64 {
        self.max_severity
    }

    pub fn schedule(&self) -> &ShiftSchedule {
        &self.schedule
    }

    /// Advances the schedule to `t` and returns the data distribution there.
    pub fn state_at<R: Rng + ?Sized>(&mut self, t: usize, rng: &mut R) -> Result<ShiftState> {
        let omega = self.schedule.omega(t, rng)?;
        Ok(match self.scenario {
            ScenarioKind::LabelShift => ShiftState {
                omega,
                prior: interpolate_prior(&self.initial_prior, &self.target_prior, omega)?,
                severity: 0.0,
            },
            ScenarioKind::CovariateShift => ShiftState {
                omega,
                prior: self.initial_prior.clone(),
                severity: omega * self.max_severity,
            },
            ScenarioKind::Stationary => ShiftState { omega, prior: self.initial_prior.clone(), severity: 0.0 },
        })
    }

    /// Draws a labeled batch from the distribution at `state`.
    pub fn sample<R: Rng + ?Sized>(
        &self,
        task: &SyntheticTask,
        state: &ShiftState,
        n: usize,
        rng: &mut R,
    ) -> Result<LabeledBatch> {
        let clean = task.sample_batch(&state.prior, n, rng)?;
        corrupt(&clean, state.severity, rng)
    }
}

/// The data distribution of one client at one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftState {
    pub omega: f64,
    pub prior: ProbVector,
    pub severity: f64,
}

/// Serializable description of a synthetic scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioDescriptor {
    pub scenario: ScenarioKind,
    pub schedule: ScheduleKind,
    pub sine_mode: SineMode,
    /// Dirichlet concentration of the per-client target priors.
    pub alpha: f64,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub num_classes: usize,
    pub input_dim: usize,
    pub mean_scale: f64,
    pub noise_std: f64,
    pub corruption_max_severity: f64,
    pub pretrain_prior_kind: PretrainPriorKind,
}

impl Default for ScenarioDescriptor {
    fn default() -> Self {
        Self {
            scenario: ScenarioKind::LabelShift,
            schedule: ScheduleKind::Linear,
            sine_mode: SineMode::Clamp,
            alpha: 0.1,
            horizon: 100,
            num_classes: 5,
            input_dim: 10,
            mean_scale: 1.0,
            noise_std: 1.0,
            corruption_max_severity: 2.0,
            pretrain_prior_kind: PretrainPriorKind::Uniform,
        }
    }
}

impl ScenarioDescriptor {
    /// Short identifier such as `label-linear`.
    pub fn label(&self) -> String {
        format!("{}-{}", self.scenario.label(), self.schedule.label())
    }

    /// Every violated constraint, empty when valid.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            v.push(format!("scenario.alpha must be positive (got {})", self.alpha));
        }
        if self.horizon == 0 {
            v.push("scenario.T must be at least 1".to_string());
        }
        if self.num_classes < 2 {
            v.push(format!("scenario.num_classes must be at least 2 (got {})", self.num_classes));
        }
        if self.input_dim == 0 {
            v.push("scenario.input_dim must be at least 1".to_string());
        }
        if !(self.mean_scale >= 0.0 && self.mean_scale.is_finite()) {
            v.push("scenario.mean_scale must be finite and nonnegative".to_string());
        }
        if !(self.noise_std > 0.0 && self.noise_std.is_finite()) {
            v.push("scenario.noise_std must be positive".to_string());
        }
        if !(self.corruption_max_severity >= 0.0 && self.corruption_max_severity.is_finite()) {
            v.push("scenario.corruption_max_severity must be finite and nonnegative".to_string());
        }
        v
    }

    pub fn make_task<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<SyntheticTask> {
        make_task(self.num_classes, self.input_dim, self.mean_scale, self.noise_std, rng)
    }

    pub fn schedule(&self) -> Result<ShiftSchedule> {
        ShiftSchedule::with_sine_mode(self.schedule, self.horizon, self.sine_mode)
    }
}
