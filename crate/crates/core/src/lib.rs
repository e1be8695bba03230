//! Federated post-adaptation under online distribution shift.
//!
//! Clients observe unlabeled, drifting data streams. Each client re-estimates
//! its current label prior with black-box shift estimation, reweights the
//! class-wise risks of a small labeled anchor set, and steps its model with a
//! learning rate driven by how much its batch summaries moved since the last
//! step. Shared feature layers are averaged at the server; classifier heads
//! stay local.
//!
//! Module map:
//!
//! - [`numerics`]: dense primitives, softmax, cosine, ridge solves, simplex projection
//! - [`model`]: the two-layer split classifier and its gradients
//! - [`shift`]: synthetic tasks, shift schedules and client shift profiles
//! - [`estimation`]: confusion matrices, BBSE, batch summaries, dynamics signals
//! - [`federation`]: the simulator loop
//! - [`analysis`]: surrogate, regret and rate diagnostics

pub mod analysis;
pub mod error;
pub mod estimation;
pub mod federation;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod shift;

pub use error::{Error, Result};
pub use estimation::{BatchSummary, ConfusionMatrix, RateBounds, Signals};
pub use federation::{ClientRecord, RateMode, RoundRecord, RunConfig, RunOutput};
pub use model::{LabeledBatch, SplitParams, UnlabeledBatch, UpdateScope};
pub use numerics::{Mat, ProbVector};
pub use shift::{ScenarioDescriptor, ScenarioKind, ScheduleKind, ShiftSchedule, SyntheticTask};
