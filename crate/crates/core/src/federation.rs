//! The federated post-adaptation loop.
//!
//! Per timestep every client draws a batch from its current distribution.
//! Sampled participants estimate their label prior, compute dynamics signals
//! and a learning rate, and take joint steps on the reweighted anchor risk.
//! On communication steps the server averages the uploaded shared layers,
//! broadcasts the average to every client, and participants refine their
//! heads with the shared layers frozen. Participants then cache their batch
//! summaries, and clients are evaluated on the labeled version of their batch.
//!
//! All randomness comes from streams derived from the run seed: one per
//! client plus a few server streams. Client work inside a timestep runs in
//! parallel and reductions happen in client-id order, so results do not
//! depend on the number of worker threads.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::{
    adaptive_eta, batch_summary, bbse_estimate_detailed, build_confusion, dynamics, prediction_histogram,
    BatchSummary, ConfusionMatrix, RateBounds, Signals, UncertaintyMeasure, DEFAULT_BBSE_RIDGE,
};
use crate::model::{
    accuracy, grad_mean_cross_entropy, grad_weighted_risk, mean_cross_entropy, weighted_risk, Layer,
    LabeledBatch, ModelDims, SplitParams, UnlabeledBatch, UpdateScope,
};
use crate::numerics::{l1_distance, Mat, ProbVector};
use crate::rng::{self, StreamRng};
use crate::shift::{
    pretrain_prior, sample_dirichlet_priors, ClientShiftProfile, ScenarioDescriptor, ScenarioKind, ShiftState,
    SyntheticTask,
};

/// How a client picks its learning rate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateMode {
    /// Signal-driven rate within the configured bounds.
    #[default]
    Adaptive,
    /// Constant rate.
    Fixed(f64),
}

impl RateMode {
    /// Stable identifier used in file names and CSV rows.
    pub fn label(&self) -> String {
        match self {
            RateMode::Adaptive => "adaptive".to_string(),
            RateMode::Fixed(eta) => format!("fixed:{eta:e}"),
        }
    }
}

/// Everything needed to reproduce one simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub num_clients: usize,
    /// Fraction of clients sampled per timestep; `⌈rate · C⌉` participate.
    pub participant_rate: f64,
    /// Gradient steps per phase (each a full pass over the anchor set).
    pub local_epochs: usize,
    /// Timesteps between aggregation barriers.
    pub comm_interval: usize,
    pub rate_mode: RateMode,
    pub bounds: RateBounds,
    pub batch_size: usize,
    pub anchor_size: usize,
    /// Allocate anchor labels proportionally with one sample per class
    /// instead of sampling them i.i.d.
    pub stratified_anchor: bool,
    /// Minibatch size for anchor SGD; `None` means full-batch steps.
    pub anchor_minibatch: Option<usize>,
    pub bbse_ridge: f64,
    pub uncertainty_measure: UncertaintyMeasure,
    pub hidden_dim: usize,
    pub pretrain_samples: usize,
    pub pretrain_epochs: usize,
    pub pretrain_eta: f64,
    pub pretrain_batch: usize,
    /// Evaluate only the participants of each timestep.
    pub evaluate_participants_only: bool,
    pub scenario: ScenarioDescriptor,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            num_clients: 100,
            participant_rate: 0.1,
            local_epochs: 4,
            comm_interval: 1,
            rate_mode: RateMode::Adaptive,
            bounds: RateBounds::IMAGE_DEFAULT,
            batch_size: 64,
            anchor_size: 100,
            stratified_anchor: false,
            anchor_minibatch: None,
            bbse_ridge: DEFAULT_BBSE_RIDGE,
            uncertainty_measure: UncertaintyMeasure::Cosine,
            hidden_dim: 16,
            pretrain_samples: 10_000,
            pretrain_epochs: 20,
            pretrain_eta: 0.1,
            pretrain_batch: 64,
            evaluate_participants_only: false,
            scenario: ScenarioDescriptor::default(),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn horizon(&self) -> usize {
        self.scenario.horizon
    }

    pub fn participants_per_step(&self) -> usize {
        let n = (self.participant_rate * self.num_clients as f64 - 1e-9).ceil() as usize;
        n.clamp(1, self.num_clients.max(1))
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            input_dim: self.scenario.input_dim,
            hidden_dim: self.hidden_dim,
            num_classes: self.scenario.num_classes,
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            hidden_dim: self.hidden_dim,
            samples: self.pretrain_samples,
            epochs: self.pretrain_epochs,
            eta: self.pretrain_eta,
            batch_size: self.pretrain_batch,
        }
    }

    /// Every violated constraint, empty when valid.
    pub fn violations(&self) -> Vec<String> {
        let mut v = self.scenario.violations();
        let mut positive = |name: &str, value: usize| {
            if value == 0 {
                v.push(format!("{name} must be at least 1"));
            }
        };
        positive("num_clients", self.num_clients);
        positive("local_epochs", self.local_epochs);
        positive("comm_interval", self.comm_interval);
        positive("batch_size", self.batch_size);
        positive("hidden_dim", self.hidden_dim);
        positive("pretrain_batch", self.pretrain_batch);
        if let Some(0) = self.anchor_minibatch {
            v.push("anchor_minibatch must be at least 1 when set".to_string());
        }
        if !(self.participant_rate > 0.0 && self.participant_rate <= 1.0) {
            v.push(format!("participant_rate must be in (0, 1] (got {})", self.participant_rate));
        }
        if self.anchor_size < self.scenario.num_classes {
            v.push(format!(
                "anchor_size ({}) must cover all {} classes",
                self.anchor_size, self.scenario.num_classes
            ));
        }
        if self.pretrain_samples < 10 * self.scenario.num_classes {
            v.push(format!(
                "pretrain_samples ({}) must be at least 10 per class",
                self.pretrain_samples
            ));
        }
        if !(self.pretrain_eta >= 0.0 && self.pretrain_eta.is_finite()) {
            v.push("pretrain_eta must be finite and nonnegative".to_string());
        }
        if !(self.bbse_ridge >= 0.0 && self.bbse_ridge.is_finite()) {
            v.push("bbse_ridge must be finite and nonnegative".to_string());
        }
        if let RateMode::Fixed(eta) = self.rate_mode {
            if !self.bounds.contains(eta) {
                v.push(format!(
                    "fixed rate {eta:e} outside RateBounds [{:e}, {:e}]",
                    self.bounds.eta_min(),
                    self.bounds.eta_max()
                ));
            }
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Argument(v.join("; ")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub hidden_dim: usize,
    pub samples: usize,
    pub epochs: usize,
    pub eta: f64,
    pub batch_size: usize,
}

/// Server-side pretraining result.
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub params: SplitParams,
    pub data: LabeledBatch,
    /// Mean cross-entropy on the pretraining data after the last epoch.
    pub final_loss: f64,
}

/// Minibatch SGD on labeled data drawn from `prior`.
pub fn pretrain<R: Rng + ?Sized>(
    task: &SyntheticTask,
    prior: &ProbVector,
    config: &PretrainConfig,
    rng: &mut R,
) -> Result<Pretrained> {
    if config.samples < 10 * task.num_classes {
        return Err(Error::arg("pretraining needs at least 10 samples per class"));
    }
    if config.batch_size == 0 {
        return Err(Error::arg("pretraining batch size must be positive"));
    }
    let dims = ModelDims { input_dim: task.input_dim, hidden_dim: config.hidden_dim, num_classes: task.num_classes };
    let mut params = SplitParams::init(dims, rng)?;
    let data = task.sample_batch(prior, config.samples, rng)?;
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..config.epochs {
        shuffle(&mut order, rng);
        for chunk in order.chunks(config.batch_size) {
            let mb = subset(&data, chunk)?;
            let grad = grad_mean_cross_entropy(&params, &mb)?;
            params.apply_step(&grad, config.eta, UpdateScope::Joint)?;
        }
    }
    params.validate()?;
    let final_loss = mean_cross_entropy(&params, &data)?;
    Ok(Pretrained { params, data, final_loss })
}

fn shuffle<T, R: Rng + ?Sized>(v: &mut [T], rng: &mut R) {
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}

fn subset(batch: &LabeledBatch, idx: &[usize]) -> Result<LabeledBatch> {
    let cols = batch.features().cols();
    let mut values = Vec::with_capacity(idx.len() * cols);
    let mut labels = Vec::with_capacity(idx.len());
    for &i in idx {
        values.extend_from_slice(batch.features().row(i));
        labels.push(batch.labels()[i]);
    }
    LabeledBatch::new(Mat::from_vec(idx.len(), cols, values)?, labels)
}

/// Work cached between the joint step and the head refinement.
#[derive(Debug, Clone, PartialEq)]
struct PendingUpdate {
    weights: ProbVector,
    eta: f64,
    summary: BatchSummary,
}

/// One client's local state.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub params: SplitParams,
    pub anchor: LabeledBatch,
    pub profile: ClientShiftProfile,
    pub prev_summary: BatchSummary,
    /// Weight of this client in the shared-layer average.
    pub sample_count: usize,
    pub rng: StreamRng,
    pending: Option<PendingUpdate>,
}

impl ClientState {
    /// Replaces the cached summary with the one computed this step.
    pub fn commit_summary(&mut self) {
        if let Some(p) = self.pending.take() {
            self.prev_summary = p.summary;
        }
    }

    pub fn pending_eta(&self) -> Option<f64> {
        self.pending.as_ref().map(|p| p.eta)
    }
}

fn sample_anchor(
    config: &RunConfig,
    task: &SyntheticTask,
    prior: &ProbVector,
    rng: &mut StreamRng,
) -> Result<LabeledBatch> {
    let k = task.num_classes;
    if config.stratified_anchor {
        let counts = SyntheticTask::stratified_counts(prior, config.anchor_size)?;
        let labels: Vec<usize> = counts.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c, n)).collect();
        return task.features_for(labels, rng);
    }
    let mut last = Error::Coverage { class: 0 };
    for _ in 0..10 {
        let anchor = task.sample_batch(prior, config.anchor_size, rng)?;
        match anchor.check_coverage(k) {
            Ok(_) => return Ok(anchor),
            Err(e) => last = e,
        }
    }
    Err(last)
}

/// Copies the global model to every client and draws per-client anchors,
/// shift profiles and initial summaries.
pub fn init_clients(config: &RunConfig, global: &SplitParams, task: &SyntheticTask) -> Result<Vec<ClientState>> {
    let q0 = pretrain_prior(config.scenario.pretrain_prior_kind, task.num_classes)?;
    (0..config.num_clients)
        .map(|id| {
            let mut rng = rng::stream(config.seed, id as u64);
            let schedule = config.scenario.schedule()?;
            let profile = match config.scenario.scenario {
                ScenarioKind::LabelShift => {
                    let target = sample_dirichlet_priors(config.scenario.alpha, 1, task.num_classes, &mut rng)?
                        .pop()
                        .expect("one prior requested");
                    ClientShiftProfile::label_shift(q0.clone(), target, schedule)?
                }
                ScenarioKind::CovariateShift => {
                    // Per-client severity caps stand in for per-client corruption types.
                    let cap = config.scenario.corruption_max_severity * rng.random_range(0.5..=1.0);
                    ClientShiftProfile::covariate_shift(q0.clone(), schedule, cap)?
                }
                ScenarioKind::Stationary => ClientShiftProfile::stationary(q0.clone(), schedule),
            };
            let anchor = sample_anchor(config, task, &q0, &mut rng)?;
            let prev_summary = batch_summary(global, anchor.inputs())?;
            Ok(ClientState {
                id,
                params: global.clone(),
                anchor,
                profile,
                prev_summary,
                sample_count: config.batch_size,
                rng,
                pending: None,
            })
        })
        .collect()
}

/// `Σ N_c ψ_c / Σ N_c`, elementwise.
pub fn aggregate_shared(entries: &[(&Layer, usize)]) -> Result<Layer> {
    let (first, _) = entries.first().ok_or_else(|| Error::arg("nothing to aggregate"))?;
    let mut out = Layer::zeros(first.weight.rows(), first.weight.cols());
    let mut total = 0usize;
    for (layer, n) in entries {
        if *n == 0 {
            return Err(Error::arg("aggregation weights must be positive"));
        }
        if layer.weight.rows() != first.weight.rows()
            || layer.weight.cols() != first.weight.cols()
            || layer.bias.len() != first.bias.len()
        {
            return Err(Error::arg("inconsistent shared-layer shapes"));
        }
        total += n;
    }
    for (layer, n) in entries {
        let w = *n as f64 / total as f64;
        for (o, v) in out.values_mut().zip(layer.values()) {
            *o += w * v;
        }
    }
    Ok(out)
}

/// What a participant reports after its local joint update.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientStepOutput {
    pub signals: Signals,
    pub bbse_prior: ProbVector,
    pub histogram: ProbVector,
    pub summary: BatchSummary,
    /// Estimated risk before the update.
    pub estimated_risk: f64,
    /// Shared layers to upload.
    pub upload: Layer,
}

fn local_steps(
    client: &mut ClientState,
    weights: &ProbVector,
    eta: f64,
    scope: UpdateScope,
    config: &RunConfig,
) -> Result<()> {
    if eta == 0.0 {
        return Ok(());
    }
    for _ in 0..config.local_epochs {
        match config.anchor_minibatch {
            None => {
                let grad = grad_weighted_risk(&client.params, &client.anchor, weights, scope)?;
                client.params.apply_step(&grad, eta, scope)?;
            }
            Some(mb) => {
                // Per-class stratified minibatch so every class risk stays defined.
                let k = weights.len();
                let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
                for (i, &y) in client.anchor.labels().iter().enumerate() {
                    by_class[y].push(i);
                }
                let per_class = mb.div_ceil(k).max(1);
                let mut idx = Vec::with_capacity(per_class * k);
                for members in &by_class {
                    let take = per_class.min(members.len());
                    for j in sample_indices(&mut client.rng, members.len(), take) {
                        idx.push(members[j]);
                    }
                }
                let mb_batch = subset(&client.anchor, &idx)?;
                let grad = grad_weighted_risk(&client.params, &mb_batch, weights, scope)?;
                client.params.apply_step(&grad, eta, scope)?;
            }
        }
    }
    client.params.validate()
}

/// BBSE weights, batch summaries, signals and rate, then the local joint
/// update. The cached summary is left untouched until
/// [`ClientState::commit_summary`].
pub fn client_step(
    client: &mut ClientState,
    batch: &UnlabeledBatch,
    conf: &ConfusionMatrix,
    config: &RunConfig,
) -> Result<ClientStepOutput> {
    let histogram = prediction_histogram(&client.params, batch)?;
    let bbse = bbse_estimate_detailed(conf, &histogram, config.bbse_ridge)?;
    let summary = batch_summary(&client.params, batch)?;
    let (s_unc, s_rep, s) = dynamics(&client.prev_summary, &summary, config.uncertainty_measure)?;
    let eta = match config.rate_mode {
        RateMode::Adaptive => adaptive_eta(s, config.bounds)?,
        RateMode::Fixed(eta) => eta,
    };
    let weights = bbse.prior;
    let estimated_risk = weighted_risk(&client.params, &client.anchor, &weights)?;
    local_steps(client, &weights, eta, UpdateScope::Joint, config)?;
    client.pending = Some(PendingUpdate { weights: weights.clone(), eta, summary: summary.clone() });
    Ok(ClientStepOutput {
        signals: Signals { s_unc, s_rep, s, eta },
        bbse_prior: weights,
        histogram,
        summary,
        estimated_risk,
        upload: client.params.shared.clone(),
    })
}

/// Head-only steps with this timestep's weights and rate.
pub fn head_refine(client: &mut ClientState, config: &RunConfig) -> Result<()> {
    let pending = client
        .pending
        .clone()
        .ok_or_else(|| Error::arg(format!("client {} has no pending update to refine", client.id)))?;
    local_steps(client, &pending.weights, pending.eta, UpdateScope::HeadOnly, config)
}

/// Per-client outcome of one timestep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClientRecord {
    pub client_id: usize,
    pub participated: bool,
    pub accuracy: f64,
    pub loss: f64,
    pub signals: Option<Signals>,
    pub bbse_prior: Option<ProbVector>,
    /// L1 distance of the BBSE estimate to the true prior.
    pub bbse_l1: Option<f64>,
    pub estimated_risk: Option<f64>,
    pub summary: Option<BatchSummary>,
    pub true_prior: ProbVector,
    pub severity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundRecord {
    pub t: usize,
    pub participants: Vec<usize>,
    pub communicated: bool,
    pub clients: Vec<ClientRecord>,
    pub mean_accuracy: f64,
    pub mean_loss: f64,
    /// Mean rate over participants.
    pub mean_eta: f64,
}

/// Initial state of one client, for oracle diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClientStart {
    pub initial_prior: ProbVector,
    pub target_prior: ProbVector,
    pub summary: BatchSummary,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<RoundRecord>,
    pub starts: Vec<ClientStart>,
    pub pretrain_loss: f64,
    pub pretrained: SplitParams,
    pub global_shared: Layer,
}

/// A simulation that can be advanced one timestep at a time.
pub struct Simulation {
    config: RunConfig,
    task: SyntheticTask,
    conf: ConfusionMatrix,
    pretrained: Pretrained,
    clients: Vec<ClientState>,
    participant_rng: StreamRng,
    global_shared: Layer,
    t: usize,
}

impl Simulation {
    /// Generates the task, pretrains the global model, builds the confusion
    /// matrix on the pretraining data and initializes every client.
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let task = config.scenario.make_task(&mut rng::stream(config.seed, rng::tag::TASK))?;
        let prior = pretrain_prior(config.scenario.pretrain_prior_kind, task.num_classes)?;
        let pretrained = pretrain(
            &task,
            &prior,
            &config.pretrain_config(),
            &mut rng::stream(config.seed, rng::tag::PRETRAIN),
        )?;
        Self::from_pretrained(config, task, pretrained)
    }

    /// Starts from an existing task and pretrained model.
    pub fn from_pretrained(config: RunConfig, task: SyntheticTask, pretrained: Pretrained) -> Result<Self> {
        config.validate()?;
        let conf = build_confusion(&pretrained.params, &pretrained.data)?;
        log::info!(
            "run seed {} mode {} bbse ridge {:e}",
            config.seed,
            config.rate_mode.label(),
            config.bbse_ridge
        );
        let clients = init_clients(&config, &pretrained.params, &task)?;
        Ok(Self {
            participant_rng: rng::stream(config.seed, rng::tag::PARTICIPANTS),
            global_shared: pretrained.params.shared.clone(),
            config,
            task,
            conf,
            pretrained,
            clients,
            t: 0,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn task(&self) -> &SyntheticTask {
        &self.task
    }

    pub fn confusion(&self) -> &ConfusionMatrix {
        &self.conf
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn pretrained(&self) -> &Pretrained {
        &self.pretrained
    }

    /// Most recent server average of the shared layers.
    pub fn global_shared(&self) -> &Layer {
        &self.global_shared
    }

    pub fn timestep(&self) -> usize {
        self.t
    }

    pub fn is_finished(&self) -> bool {
        self.t >= self.config.horizon()
    }

    pub fn starts(&self) -> Vec<ClientStart> {
        self.clients
            .iter()
            .map(|c| ClientStart {
                initial_prior: c.profile.initial_prior().clone(),
                target_prior: c.profile.target_prior().clone(),
                summary: c.prev_summary.clone(),
            })
            .collect()
    }

    /// Advances one timestep. Runs client work on the current rayon pool.
    pub fn step(&mut self) -> Result<RoundRecord> {
        if self.is_finished() {
            return Err(Error::arg("simulation already reached its horizon"));
        }
        self.t += 1;
        let t = self.t;
        let config = &self.config;
        let task = &self.task;
        let conf = &self.conf;

        let draws: Vec<(ShiftState, LabeledBatch)> = self
            .clients
            .par_iter_mut()
            .map(|c| {
                let state = c.profile.state_at(t, &mut c.rng)?;
                let batch = c.profile.sample(task, &state, config.batch_size, &mut c.rng)?;
                Ok((state, batch))
            })
            .collect::<Result<_>>()?;

        let mut participants: Vec<usize> =
            sample_indices(&mut self.participant_rng, config.num_clients, config.participants_per_step()).into_vec();
        participants.sort_unstable();
        let mut is_participant = vec![false; config.num_clients];
        for &p in &participants {
            is_participant[p] = true;
        }

        let outputs: Vec<Option<ClientStepOutput>> = self
            .clients
            .par_iter_mut()
            .zip(&draws)
            .map(|(c, (_, batch))| {
                if is_participant[c.id] {
                    client_step(c, batch.inputs(), conf, config).map(Some)
                } else {
                    Ok(None)
                }
            })
            .collect::<Result<_>>()?;

        let communicated = t.is_multiple_of(config.comm_interval);
        if communicated {
            let uploads: Vec<(&Layer, usize)> = outputs
                .iter()
                .zip(&self.clients)
                .filter_map(|(o, c)| o.as_ref().map(|o| (&o.upload, c.sample_count)))
                .collect();
            let average = aggregate_shared(&uploads)?;
            self.clients.par_iter_mut().try_for_each(|c| -> Result<()> {
                c.params.shared = average.clone();
                if is_participant[c.id] {
                    head_refine(c, config)?;
                }
                Ok(())
            })?;
            self.global_shared = average;
        }
        for &p in &participants {
            self.clients[p].commit_summary();
        }

        let clients: Vec<ClientRecord> = self
            .clients
            .par_iter()
            .zip(&draws)
            .zip(outputs)
            .filter(|((c, _), _)| !config.evaluate_participants_only || is_participant[c.id])
            .map(|((c, (state, batch)), out)| {
                let bbse_l1 = out.as_ref().map(|o| l1_distance(&o.bbse_prior, &state.prior)).transpose()?;
                Ok(ClientRecord {
                    client_id: c.id,
                    participated: out.is_some(),
                    accuracy: accuracy(&c.params, batch)?,
                    loss: mean_cross_entropy(&c.params, batch)?,
                    signals: out.as_ref().map(|o| o.signals),
                    bbse_l1,
                    estimated_risk: out.as_ref().map(|o| o.estimated_risk),
                    bbse_prior: out.as_ref().map(|o| o.bbse_prior.clone()),
                    summary: out.map(|o| o.summary),
                    true_prior: state.prior.clone(),
                    severity: state.severity,
                })
            })
            .collect::<Result<_>>()?;

        let n = clients.len().max(1) as f64;
        let mean_accuracy = clients.iter().map(|c| c.accuracy).sum::<f64>() / n;
        let mean_loss = clients.iter().map(|c| c.loss).sum::<f64>() / n;
        let etas: Vec<f64> = clients.iter().filter_map(|c| c.signals.map(|s| s.eta)).collect();
        let mean_eta = if etas.is_empty() { f64::NAN } else { etas.iter().sum::<f64>() / etas.len() as f64 };
        Ok(RoundRecord { t, participants, communicated, clients, mean_accuracy, mean_loss, mean_eta })
    }

    pub fn finish(mut self) -> Result<RunOutput> {
        let starts = self.starts();
        let mut records = Vec::with_capacity(self.config.horizon());
        while !self.is_finished() {
            records.push(self.step()?);
        }
        Ok(RunOutput {
            records,
            starts,
            pretrain_loss: self.pretrained.final_loss,
            pretrained: self.pretrained.params,
            global_shared: self.global_shared,
        })
    }
}

/// Runs a full simulation on the global rayon pool.
pub fn run(config: RunConfig) -> Result<RunOutput> {
    Simulation::new(config)?.finish()
}

/// Runs a full simulation on a dedicated pool of `workers` threads.
pub fn run_with_workers(config: RunConfig, workers: usize) -> Result<RunOutput> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Numeric(format!("cannot build worker pool: {e}")))?;
    pool.install(|| run(config))
}
