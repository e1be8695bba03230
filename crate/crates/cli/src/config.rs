//! Experiment configuration: one JSON document, every field optional.

use std::collections::BTreeMap;
use std::path::PathBuf;

use fedade_core::{RateMode, RunConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Image-benchmark FixLR baselines: Low, Mid and High.
pub const FIXLR_DEFAULTS: [f64; 3] = [5e-6, 1e-5, 1e-4];

/// A grid of simulations sharing one [`RunConfig`].
///
/// The run fields sit at the top level of the JSON document. Each cell of
/// the grid takes its rate mode from `modes` and its seed from `seeds`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    #[serde(flatten)]
    pub run: RunConfig,
    pub modes: Vec<RateMode>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Also write per-step true priors, BBSE estimates and summaries.
    pub emit_oracle_diagnostics: bool,
    /// Write the server's shared layers every this many timesteps.
    pub checkpoint_interval: Option<usize>,
    #[serde(flatten, skip_serializing)]
    unknown: BTreeMap<String, serde_json::Value>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut modes = vec![RateMode::Adaptive];
        modes.extend(FIXLR_DEFAULTS.iter().map(|&eta| RateMode::Fixed(eta)));
        Self {
            run: RunConfig::default(),
            modes,
            seeds: vec![0],
            output_dir: PathBuf::from("results"),
            emit_oracle_diagnostics: false,
            checkpoint_interval: None,
            unknown: BTreeMap::new(),
        }
    }
}

impl ExperimentConfig {
    /// Every violated constraint, empty when valid.
    pub fn violations(&self) -> Vec<String> {
        let mut v: Vec<String> = self.unknown.keys().map(|k| format!("unknown field `{k}`")).collect();
        v.extend(self.run.violations());
        if self.modes.is_empty() {
            v.push("modes must list at least one rate mode".to_string());
        }
        if self.seeds.is_empty() {
            v.push("seeds must list at least one seed".to_string());
        }
        let mut seen = std::collections::BTreeSet::new();
        for s in &self.seeds {
            if !seen.insert(s) {
                v.push(format!("seed {s} listed twice"));
            }
        }
        for mode in &self.modes {
            if let RateMode::Fixed(eta) = *mode {
                if !self.run.bounds.contains(eta) {
                    v.push(format!(
                        "fixed rate {eta:e} outside RateBounds [{:e}, {:e}]",
                        self.run.bounds.eta_min(),
                        self.run.bounds.eta_max()
                    ));
                }
            }
        }
        if self.checkpoint_interval == Some(0) {
            v.push("checkpoint_interval must be at least 1 when set".to_string());
        }
        v
    }

    /// The run configuration of one grid cell.
    pub fn cell(&self, mode: RateMode, seed: u64) -> RunConfig {
        RunConfig { rate_mode: mode, seed, ..self.run.clone() }
    }

    /// Canonical JSON of everything that affects results.
    pub fn canonical_json(&self) -> String {
        let mut hashed = self.clone();
        hashed.output_dir = PathBuf::new();
        hashed.run.rate_mode = RateMode::Adaptive;
        hashed.run.seed = 0;
        serde_json::to_string(&hashed).expect("config serializes")
    }

    /// Pretty JSON that [`validate_config`] accepts back. The per-run
    /// `seed` and `rate_mode` come from `seeds` and `modes` and are omitted.
    pub fn to_json_pretty(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = value.as_object_mut() {
            obj.remove("seed");
            obj.remove("rate_mode");
        }
        serde_json::to_string_pretty(&value).expect("config serializes")
    }

    /// First 12 hex digits of the SHA-256 of [`Self::canonical_json`].
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        hex::encode(digest)[..12].to_string()
    }
}

/// Parses, defaults and validates a JSON config.
pub fn validate_config(raw: &str) -> CliResult<ExperimentConfig> {
    let value: serde_json::Value = serde_json::from_str(raw).map_err(parse_error)?;
    let mut violations = Vec::new();
    if let Some(obj) = value.as_object() {
        for (key, hint) in [("seed", "seeds"), ("rate_mode", "modes")] {
            if obj.contains_key(key) {
                violations.push(format!("`{key}` is set per run; use `{hint}` instead"));
            }
        }
    }
    let config: ExperimentConfig = serde_json::from_value(value).map_err(|e| CliError::Invalid(vec![e.to_string()]))?;
    violations.extend(config.violations());
    if violations.is_empty() {
        Ok(config)
    } else {
        Err(CliError::Invalid(violations))
    }
}

fn parse_error(e: serde_json::Error) -> CliError {
    CliError::Parse { line: e.line(), column: e.column(), message: e.to_string() }
}
