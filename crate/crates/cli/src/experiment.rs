//! Runs every (mode, seed) cell of an experiment and writes its outputs.
//!
//! Files written to the output directory, with `{hash}` the config hash:
//!
//! - `metrics_{scenario}_{mode}_s{seed}_{hash}.csv`, one row per client and timestep
//! - `summary_{scenario}_{mode}_{hash}.json`, mean and std over seeds
//! - `comparison_{hash}.csv`, mean accuracy per scenario and mode
//! - `checkpoint_{scenario}_{mode}_s{seed}_{hash}_t{t}.json` when checkpointing
//! - `diagnostics_{scenario}_{mode}_s{seed}_{hash}.json` with oracle diagnostics

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use fedade_core::analysis::{traces_from_run, AnalysisReport};
use fedade_core::federation::{ClientStart, Simulation};
use fedade_core::{RateMode, RoundRecord, RunOutput};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

pub const CSV_HEADER: [&str; 11] =
    ["t", "client_id", "mode", "seed", "accuracy", "loss", "s_unc", "s_rep", "s", "eta", "bbse_l1"];

/// Nine significant digits.
pub fn fmt_float(x: f64) -> String {
    format!("{x:.8e}")
}

/// Mode label safe for file names: `adaptive` or `fixed-1e-5`.
pub fn mode_file_label(mode: &RateMode) -> String {
    mode.label().replace(':', "-")
}

/// Headline numbers of one run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RunSummary {
    pub mean_accuracy: f64,
    pub final_accuracy: f64,
    pub mean_eta: f64,
    pub cum_s: f64,
}

impl RunSummary {
    pub fn from_records(records: &[RoundRecord]) -> Self {
        let n = records.len().max(1) as f64;
        let mean_accuracy = records.iter().map(|r| r.mean_accuracy).sum::<f64>() / n;
        let final_accuracy = records.last().map_or(f64::NAN, |r| r.mean_accuracy);
        let etas: Vec<f64> = records.iter().flat_map(|r| r.clients.iter().filter_map(|c| c.signals.map(|s| s.eta))).collect();
        let mean_eta = etas.iter().sum::<f64>() / etas.len().max(1) as f64;
        let cum_s = records
            .iter()
            .map(|r| {
                let s: Vec<f64> = r.clients.iter().filter_map(|c| c.signals.map(|s| s.s)).collect();
                if s.is_empty() {
                    0.0
                } else {
                    s.iter().sum::<f64>() / s.len() as f64
                }
            })
            .sum();
        Self { mean_accuracy, final_accuracy, mean_eta, cum_s }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Sample standard deviation; zero for a single value.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

/// Aggregate over seeds for one rate mode.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModeSummary {
    pub scenario: String,
    pub mode: RateMode,
    pub seeds: Vec<u64>,
    pub mean_accuracy: MeanStd,
    pub final_accuracy: MeanStd,
    pub mean_eta: MeanStd,
    pub cum_s: MeanStd,
    pub runs: Vec<RunSummary>,
}

/// Everything `run_experiment` produced.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub hash: String,
    pub output_dir: PathBuf,
    pub modes: Vec<ModeSummary>,
    pub metrics_files: Vec<PathBuf>,
}

impl ExperimentOutcome {
    pub fn mode(&self, mode: RateMode) -> Option<&ModeSummary> {
        self.modes.iter().find(|m| m.mode == mode)
    }
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::io(path, e.into()))?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| CliError::io(path, e))
}

struct Cell {
    mode: RateMode,
    seed: u64,
    stem: String,
}

#[derive(Serialize)]
struct Diagnostics<'a> {
    starts: &'a [ClientStart],
    steps: Vec<DiagnosticStep>,
    analysis: Option<AnalysisReport>,
}

#[derive(Serialize)]
struct DiagnosticStep {
    t: usize,
    client_id: usize,
    true_prior: Vec<f64>,
    severity: f64,
    bbse_prior: Option<Vec<f64>>,
    q: Option<Vec<f64>>,
    z: Option<Vec<f64>>,
}

fn run_cell(config: &ExperimentConfig, cell: &Cell, dir: &Path) -> CliResult<(PathBuf, RunSummary)> {
    let mut sim = Simulation::new(config.cell(cell.mode, cell.seed))?;
    let starts = sim.starts();
    let metrics_path = dir.join(format!("metrics_{}.csv", cell.stem));
    let csv_err = |source| CliError::Csv { context: metrics_path.display().to_string(), source };
    let mut writer = csv::Writer::from_writer(create(&metrics_path)?);
    writer.write_record(CSV_HEADER).map_err(csv_err)?;

    let mode_label = cell.mode.label();
    let seed = cell.seed.to_string();
    let mut records = Vec::with_capacity(config.run.horizon());
    while !sim.is_finished() {
        let record = sim.step()?;
        for c in &record.clients {
            let sig = |f: fn(&fedade_core::Signals) -> f64| c.signals.as_ref().map(f).map(fmt_float).unwrap_or_default();
            writer
                .write_record([
                    record.t.to_string(),
                    c.client_id.to_string(),
                    mode_label.clone(),
                    seed.clone(),
                    fmt_float(c.accuracy),
                    fmt_float(c.loss),
                    sig(|s| s.s_unc),
                    sig(|s| s.s_rep),
                    sig(|s| s.s),
                    sig(|s| s.eta),
                    c.bbse_l1.map(fmt_float).unwrap_or_default(),
                ])
                .map_err(csv_err)?;
        }
        if let Some(every) = config.checkpoint_interval {
            if record.t % every == 0 {
                let path = dir.join(format!("checkpoint_{}_t{}.json", cell.stem, record.t));
                write_json(&path, sim.global_shared())?;
            }
        }
        records.push(record);
    }
    writer.flush().map_err(|e| CliError::io(&metrics_path, e))?;
    let summary = RunSummary::from_records(&records);

    if config.emit_oracle_diagnostics {
        let steps = records
            .iter()
            .flat_map(|r| {
                r.clients.iter().map(move |c| DiagnosticStep {
                    t: r.t,
                    client_id: c.client_id,
                    true_prior: c.true_prior.as_slice().to_vec(),
                    severity: c.severity,
                    bbse_prior: c.bbse_prior.as_ref().map(|p| p.as_slice().to_vec()),
                    q: c.summary.as_ref().map(|s| s.q.as_slice().to_vec()),
                    z: c.summary.as_ref().map(|s| s.z.clone()),
                })
            })
            .collect();
        let full = records.iter().all(|r| r.participants.len() == config.run.num_clients)
            && !config.run.evaluate_participants_only;
        let analysis = if full {
            let output = RunOutput {
                records,
                starts: starts.clone(),
                pretrain_loss: sim.pretrained().final_loss,
                pretrained: sim.pretrained().params.clone(),
                global_shared: sim.global_shared().clone(),
            };
            Some(AnalysisReport::from_traces(&traces_from_run(&output)?)?)
        } else {
            None
        };
        let path = dir.join(format!("diagnostics_{}.json", cell.stem));
        write_json(&path, &Diagnostics { starts: &starts, steps, analysis })?;
    }
    log::info!("finished {} (mean accuracy {:.4})", cell.stem, summary.mean_accuracy);
    Ok((metrics_path, summary))
}

/// Runs every cell on a pool of `workers` threads and writes all outputs to
/// `config.output_dir`.
pub fn run_experiment(config: &ExperimentConfig, workers: usize) -> CliResult<ExperimentOutcome> {
    let violations = config.violations();
    if !violations.is_empty() {
        return Err(CliError::Invalid(violations));
    }
    let dir = config.output_dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let hash = config.hash();
    let scenario = config.run.scenario.label();

    let cells: Vec<Cell> = config
        .modes
        .iter()
        .flat_map(|&mode| {
            let scenario = &scenario;
            let hash = &hash;
            config.seeds.iter().map(move |&seed| Cell {
                mode,
                seed,
                stem: format!("{scenario}_{}_s{seed}_{hash}", mode_file_label(&mode)),
            })
        })
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| CliError::Report(format!("cannot build worker pool: {e}")))?;
    let results: Vec<(PathBuf, RunSummary)> =
        pool.install(|| cells.par_iter().map(|cell| run_cell(config, cell, &dir)).collect::<CliResult<_>>())?;

    let mut modes = Vec::new();
    for (i, &mode) in config.modes.iter().enumerate() {
        let runs: Vec<RunSummary> =
            results[i * config.seeds.len()..(i + 1) * config.seeds.len()].iter().map(|(_, s)| *s).collect();
        let stat = |f: fn(&RunSummary) -> f64| MeanStd::of(&runs.iter().map(f).collect::<Vec<_>>());
        let summary = ModeSummary {
            scenario: scenario.clone(),
            mode,
            seeds: config.seeds.clone(),
            mean_accuracy: stat(|r| r.mean_accuracy),
            final_accuracy: stat(|r| r.final_accuracy),
            mean_eta: stat(|r| r.mean_eta),
            cum_s: stat(|r| r.cum_s),
            runs,
        };
        let path = dir.join(format!("summary_{scenario}_{}_{hash}.json", mode_file_label(&mode)));
        write_json(&path, &summary)?;
        modes.push(summary);
    }

    let rows: Vec<ComparisonRow> = modes
        .iter()
        .map(|m| ComparisonRow {
            scenario: m.scenario.clone(),
            mode: m.mode.label(),
            seeds: m.seeds.len(),
            mean_accuracy: m.mean_accuracy.mean,
            std_accuracy: m.mean_accuracy.std,
        })
        .collect();
    write_comparison(&dir.join(format!("comparison_{hash}.csv")), &rows)?;

    Ok(ExperimentOutcome { hash, output_dir: dir, modes, metrics_files: results.into_iter().map(|(p, _)| p).collect() })
}

/// One line of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub scenario: String,
    pub mode: String,
    pub seeds: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
}

pub fn write_comparison(path: &Path, rows: &[ComparisonRow]) -> CliResult<()> {
    let csv_err = |source| CliError::Csv { context: path.display().to_string(), source };
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["scenario", "mode", "seeds", "mean_accuracy", "std_accuracy"]).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.scenario.clone(),
            r.mode.clone(),
            r.seeds.to_string(),
            fmt_float(r.mean_accuracy),
            fmt_float(r.std_accuracy),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Fixed-width rendering of the comparison table.
pub fn render_comparison(rows: &[ComparisonRow]) -> String {
    let mut out = format!("{:<22} {:<14} {:>5} {:>10} {:>10}\n", "scenario", "mode", "seeds", "mean_acc", "std_acc");
    for r in rows {
        out.push_str(&format!(
            "{:<22} {:<14} {:>5} {:>10.4} {:>10.4}\n",
            r.scenario, r.mode, r.seeds, r.mean_accuracy, r.std_accuracy
        ));
    }
    out
}
