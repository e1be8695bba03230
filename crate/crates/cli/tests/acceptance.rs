//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any fails. Pass criterion numbers to run a subset:
//! `cargo test --test acceptance -- 4 6`.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use fedade_cli::config::ExperimentConfig;
use fedade_cli::run_experiment;
use fedade_core::analysis::{regret_rate_check, surrogate_gap_report, traces_from_run, RegretFixture};
use fedade_core::estimation::{bbse_estimate, build_confusion, prediction_histogram, RateBounds};
use fedade_core::federation::{pretrain, run, PretrainConfig, RunConfig};
use fedade_core::model::gradcheck::{finite_difference_gradient, max_relative_error};
use fedade_core::model::{class_wise_risks, grad_weighted_risk, ModelDims};
use fedade_core::numerics::{cosine, l1_distance, simplex_project, softmax};
use fedade_core::shift::{make_task, sample_dirichlet_priors};
use fedade_core::{LabeledBatch, Mat, ProbVector, RateMode, ScenarioDescriptor, ScenarioKind, ScheduleKind};
use fedade_core::{ShiftSchedule, SplitParams, UpdateScope};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Rate scale of the simulator fixtures. The FixLR baselines keep the
/// Low : Mid : High = 1 : 2 : 20 ratios of the image defaults.
const ETA_LOW: f64 = 0.01;
const ETA_MID: f64 = 2.0 * ETA_LOW;
const ETA_HIGH: f64 = 20.0 * ETA_LOW;

fn desk_bounds() -> RateBounds {
    RateBounds::new(ETA_LOW, ETA_HIGH).expect("valid bounds")
}

/// Label-shift simulator fixture with overlapping classes, where knowing the
/// current prior changes predictions.
fn label_shift_fixture() -> RunConfig {
    RunConfig {
        bounds: desk_bounds(),
        scenario: ScenarioDescriptor { mean_scale: 0.5, ..Default::default() },
        ..Default::default()
    }
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn numeric_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut failures = Vec::new();

    for _ in 0..10_000 {
        let k = rng.random_range(1..12);
        let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-500.0..500.0)).collect();
        let p = softmax(&logits).unwrap();
        let sum: f64 = p.as_slice().iter().sum();
        if p.as_slice().iter().any(|x| *x < 0.0) || (sum - 1.0).abs() > 1e-9 {
            failures.push("softmax left the simplex".to_string());
            break;
        }
        let c = rng.random_range(-100.0..100.0);
        let shifted: Vec<f64> = logits.iter().map(|x| x + c).collect();
        let q = softmax(&shifted).unwrap();
        if p.as_slice().iter().zip(q.as_slice()).any(|(a, b)| (a - b).abs() > 1e-12) {
            failures.push("softmax not shift invariant".to_string());
            break;
        }
    }

    for _ in 0..10_000 {
        let k = rng.random_range(1..10);
        let a: Vec<f64> = (0..k).map(|_| rng.random_range(-1e3..1e3)).collect();
        let scale = rng.random_range(1e-3..1e3);
        let b: Vec<f64> = if rng.random_bool(0.5) { a.iter().map(|x| x * scale).collect() } else { a.iter().map(|x| -x * scale).collect() };
        let c = cosine(&a, &b).unwrap();
        if !(-1.0..=1.0).contains(&c) {
            failures.push(format!("cosine {c} outside [-1, 1]"));
            break;
        }
    }

    let mut worst_gap = f64::NEG_INFINITY;
    for _ in 0..100_000 {
        let k = rng.random_range(2..10);
        let draw = |rng: &mut ChaCha8Rng| {
            ProbVector::from_weights((0..k).map(|_| -rng.random::<f64>().max(1e-300).ln()).collect()).unwrap()
        };
        let (p, q) = (draw(&mut rng), draw(&mut rng));
        let gap = (1.0 - cosine(p.as_slice(), q.as_slice()).unwrap()) - l1_distance(&p, &q).unwrap();
        worst_gap = worst_gap.max(gap);
    }
    if worst_gap > 1e-12 {
        failures.push(format!("cosine distance exceeded L1 by {worst_gap:e}"));
    }

    for _ in 0..10_000 {
        let k = rng.random_range(1..10);
        let v: Vec<f64> = (0..k).map(|_| rng.random_range(-5.0..5.0)).collect();
        let p = simplex_project(&v).unwrap();
        if simplex_project(p.as_slice()).unwrap() != p {
            failures.push("simplex projection not idempotent".to_string());
            break;
        }
    }

    let mut worst_rel = 0.0f64;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let (d, h, k) = (rng.random_range(1..5), rng.random_range(1..6), rng.random_range(2..5));
        let dims = ModelDims { input_dim: d, hidden_dim: h, num_classes: k };
        let mut params = SplitParams::init(dims, &mut rng).unwrap();
        for b in params.shared.bias.iter_mut().chain(params.head.bias.iter_mut()) {
            *b = rng.random_range(-0.5..0.5);
        }
        let n = k * rng.random_range(1..4);
        let rows: Vec<f64> = (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let anchor = LabeledBatch::new(Mat::from_vec(n, d, rows).unwrap(), (0..n).map(|i| i % k).collect()).unwrap();
        let w = ProbVector::from_weights((0..k).map(|_| rng.random_range(0.05..1.0)).collect()).unwrap();
        let analytic = grad_weighted_risk(&params, &anchor, &w, UpdateScope::Joint).unwrap();
        let numeric = finite_difference_gradient(&params, &anchor, &w, 1e-5).unwrap();
        worst_rel = worst_rel.max(max_relative_error(&analytic, &numeric, 1e-6));
    }
    if worst_rel > 1e-4 {
        failures.push(format!("gradient relative error {worst_rel:e} > 1e-4"));
    }

    let detail = format!("max cos-L1 excess {worst_gap:.3e} over 1e5 pairs; max gradient rel. error {worst_rel:.2e}");
    if failures.is_empty() {
        outcome(true, detail)
    } else {
        outcome(false, format!("{}; {detail}", failures.join("; ")))
    }
}

fn bbse_recovery() -> Outcome {
    let pre = PretrainConfig { hidden_dim: 16, samples: 10_000, epochs: 20, eta: 0.1, batch_size: 64 };
    let mut errors = Vec::new();
    for trial in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + trial);
        let task = make_task(5, 10, 2.0, 1.0, &mut rng).unwrap();
        let trained = pretrain(&task, &ProbVector::uniform(5), &pre, &mut rng).unwrap();
        let conf = build_confusion(&trained.params, &trained.data).unwrap();
        let prior = loop {
            let p = sample_dirichlet_priors(1.0, 1, 5, &mut rng).unwrap().pop().unwrap();
            if p.as_slice().iter().all(|&x| x >= 0.05) {
                break p;
            }
        };
        let batch = task.sample_batch(&prior, 10_000, &mut rng).unwrap();
        let hist = prediction_histogram(&trained.params, batch.inputs()).unwrap();
        let estimate = bbse_estimate(&conf, &hist, 1e-6).unwrap();
        errors.push(l1_distance(&estimate, &prior).unwrap());
    }
    let good = errors.iter().filter(|e| **e <= 0.1).count();
    let mut sorted = errors.clone();
    sorted.sort_by(f64::total_cmp);
    outcome(good >= 45, format!("{good}/50 trials with L1 ≤ 0.1 (median {:.4}, max {:.4})", sorted[25], sorted[49]))
}

fn unbiasedness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(300);
    let task = make_task(5, 10, 1.0, 1.0, &mut rng).unwrap();
    let q0 = ProbVector::uniform(5);
    let priors = [
        ProbVector::new(vec![0.5, 0.2, 0.1, 0.1, 0.1]).unwrap(),
        ProbVector::new(vec![0.05, 0.1, 0.15, 0.3, 0.4]).unwrap(),
        ProbVector::new(vec![0.2, 0.2, 0.2, 0.2, 0.2]).unwrap(),
    ];
    let mut lines = Vec::new();
    let mut pass = true;
    for (m, epochs) in [1usize, 5, 20].into_iter().enumerate() {
        let pre = PretrainConfig { hidden_dim: 16, samples: 5000, epochs, eta: 0.1, batch_size: 64 };
        let model = pretrain(&task, &q0, &pre, &mut rng).unwrap().params;
        // Large-sample confusion matrix for this model.
        let source = task.sample_batch(&q0, 50_000, &mut rng).unwrap();
        let conf = build_confusion(&model, &source).unwrap();
        for (j, prior) in priors.iter().enumerate() {
            let oracle_batch = task.sample_batch(prior, 100_000, &mut rng).unwrap();
            let ce = per_sample_ce(&model, &oracle_batch);
            let oracle = mean(&ce);
            let oracle_se = (ce.iter().map(|v| (v - oracle).powi(2)).sum::<f64>() / (ce.len() - 1) as f64).sqrt()
                / (ce.len() as f64).sqrt();

            let estimates: Vec<f64> = (0..200)
                .map(|_| {
                    let batch = task.sample_batch(prior, 1000, &mut rng).unwrap();
                    let anchor = task.sample_batch(&q0, 500, &mut rng).unwrap();
                    let hist = prediction_histogram(&model, batch.inputs()).unwrap();
                    let w = bbse_estimate(&conf, &hist, 1e-6).unwrap();
                    let risks = class_wise_risks(&model, &anchor).unwrap();
                    w.as_slice().iter().zip(&risks).map(|(a, b)| a * b).sum()
                })
                .collect();
            let mc = mean(&estimates);
            let mc_se = (estimates.iter().map(|v| (v - mc).powi(2)).sum::<f64>() / 199.0).sqrt() / 200f64.sqrt();
            let half_width = 2.576 * (mc_se * mc_se + oracle_se * oracle_se).sqrt();
            let inside = (mc - oracle).abs() <= half_width;
            pass &= inside;
            lines.push(format!("m{m}p{j} {:+.4}/{:.4}{}", mc - oracle, half_width, if inside { "" } else { "!" }));
        }
    }
    outcome(pass, format!("(estimate − oracle)/CI half-width: {}", lines.join(", ")))
}

fn per_sample_ce(model: &SplitParams, batch: &LabeledBatch) -> Vec<f64> {
    batch
        .inputs()
        .samples()
        .zip(batch.labels())
        .map(|(x, &y)| -model.forward(x).unwrap().probs[y].max(1e-12).ln())
        .collect()
}

fn adaptivity() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut config = ExperimentConfig::default();
    config.run = label_shift_fixture();
    config.modes = vec![RateMode::Adaptive, RateMode::Fixed(ETA_LOW), RateMode::Fixed(ETA_MID), RateMode::Fixed(ETA_HIGH)];
    config.seeds = (0..5).collect();
    config.output_dir = dir.path().to_path_buf();
    let result = run_experiment(&config, 0).unwrap();
    let acc = |mode| result.mode(mode).unwrap().mean_accuracy.mean;
    let adaptive = acc(RateMode::Adaptive);
    let fixed: Vec<f64> = [ETA_LOW, ETA_MID, ETA_HIGH].iter().map(|&e| acc(RateMode::Fixed(e))).collect();
    let best = fixed.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let worst = fixed.iter().copied().fold(f64::INFINITY, f64::min);
    outcome(
        adaptive >= best - 0.01 && adaptive >= worst + 0.02,
        format!(
            "adaptive {adaptive:.4}; FixLR low/mid/high {:.4}/{:.4}/{:.4}; needs ≥ {:.4} and ≥ {:.4}",
            fixed[0],
            fixed[1],
            fixed[2],
            best - 0.01,
            worst + 0.02
        ),
    )
}

fn signal_sanity() -> Outcome {
    let base = label_shift_fixture();
    let mut pass = true;
    let mut stationary = Vec::new();
    for seed in 0..5 {
        let config = RunConfig {
            seed,
            scenario: ScenarioDescriptor { scenario: ScenarioKind::Stationary, ..base.scenario.clone() },
            ..base.clone()
        };
        let out = run(config).unwrap();
        let late = || out.records.iter().filter(|r| r.t >= 5).flat_map(|r| r.clients.iter().filter_map(|c| c.signals));
        let s = mean(&late().map(|s| s.s).collect::<Vec<_>>());
        let eta = mean(&late().map(|s| s.eta).collect::<Vec<_>>());
        pass &= s <= 0.1 && eta <= 2.0 * ETA_LOW;
        stationary.push(format!("S {s:.4} η/η_min {:.3}", eta / ETA_LOW));
    }

    let mut ratios = Vec::new();
    for seed in 0..5 {
        let config = RunConfig {
            seed,
            participant_rate: 1.0,
            scenario: ScenarioDescriptor { schedule: ScheduleKind::Square, ..base.scenario.clone() },
            ..base.clone()
        };
        let horizon = config.horizon();
        let mut schedule = ShiftSchedule::new(ScheduleKind::Square, horizon).unwrap();
        let mut dummy = ChaCha8Rng::seed_from_u64(0);
        let omegas: Vec<f64> = (0..=horizon).map(|t| schedule.omega(t, &mut dummy).unwrap()).collect();
        let flips: Vec<usize> = (1..=horizon).filter(|&t| omegas[t] != omegas[t - 1]).collect();
        let out = run(config).unwrap();
        let (mut near, mut between) = (Vec::new(), Vec::new());
        for r in &out.records {
            let s = mean(&r.clients.iter().filter_map(|c| c.signals.map(|s| s.s)).collect::<Vec<_>>());
            if flips.iter().any(|&f| r.t >= f && r.t < f + 2) {
                near.push(s);
            } else {
                between.push(s);
            }
        }
        let ratio = mean(&near) / mean(&between);
        pass &= ratio >= 3.0;
        ratios.push(format!("{ratio:.2}"));
    }
    outcome(pass, format!("stationary [{}]; square spike ratios [{}]", stationary.join(", "), ratios.join(", ")))
}

fn regret_shape() -> Outcome {
    let horizons = [100usize, 400, 1600];
    let seeds = [0u64, 1, 2];
    let mut regrets = BTreeMap::new();
    for &t in &horizons {
        let per_seed: Vec<f64> = seeds
            .iter()
            .map(|&seed| RegretFixture { horizon: t, rate_mode: RateMode::Adaptive, seed, ..Default::default() }.run().unwrap().regret)
            .collect();
        regrets.insert(t, mean(&per_seed));
    }
    let points: Vec<(usize, f64)> = regrets.into_iter().collect();
    let report = regret_rate_check(&points).unwrap();
    outcome(
        report.passes,
        format!(
            "Reg_T/T {:?}; slope {:.3} (≤ 0.9)",
            report.regret_per_step.iter().map(|v| format!("{v:.5}")).collect::<Vec<_>>(),
            report.slope
        ),
    )
}

fn surrogate_bound() -> Outcome {
    let (mut holding, mut total) = (0usize, 0usize);
    for seed in 0..20 {
        let config = RunConfig { seed, num_clients: 20, participant_rate: 1.0, ..label_shift_fixture() };
        let out = run(config).unwrap();
        for trace in traces_from_run(&out).unwrap() {
            let report = surrogate_gap_report(&trace).unwrap();
            holding += report.prefix_holds.iter().filter(|h| **h).count();
            total += report.prefix_holds.len();
        }
    }
    let fraction = holding as f64 / total as f64;
    outcome(fraction >= 0.99, format!("bound holds at {holding}/{total} steps ({:.2}%)", 100.0 * fraction))
}

fn convergence() -> Outcome {
    let mut pass = true;
    let mut lines = Vec::new();
    for seed in 0..5 {
        let config = RunConfig {
            seed,
            rate_mode: RateMode::Fixed(ETA_MID),
            bounds: desk_bounds(),
            batch_size: 1000,
            anchor_size: 500,
            pretrain_epochs: 1,
            scenario: ScenarioDescriptor { scenario: ScenarioKind::Stationary, ..Default::default() },
            ..Default::default()
        };
        let out = run(config).unwrap();
        let losses: Vec<f64> = out.records.iter().map(|r| r.mean_loss).collect();
        let (first, last) = (losses[0], *losses.last().unwrap());
        let mut running_min = f64::INFINITY;
        let mut worst = 0.0f64;
        for (i, &l) in losses.iter().enumerate() {
            running_min = running_min.min(l);
            if i + 1 > 10 {
                worst = worst.max(l / running_min);
            }
        }
        pass &= last <= first && worst <= 1.05;
        lines.push(format!("{first:.4}→{last:.4} peak/min {worst:.4}"));
    }
    outcome(pass, lines.join(", "))
}

fn determinism() -> Outcome {
    let dirs: Vec<_> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    let mut base = ExperimentConfig::default();
    base.run = RunConfig {
        num_clients: 20,
        participant_rate: 0.3,
        scenario: ScenarioDescriptor { horizon: 30, mean_scale: 0.5, ..Default::default() },
        ..label_shift_fixture()
    };
    base.modes = vec![RateMode::Adaptive, RateMode::Fixed(ETA_MID)];
    base.seeds = vec![0, 7];
    let mut outputs = Vec::new();
    for (dir, workers) in dirs.iter().zip([1, 1, 4]) {
        let mut config = base.clone();
        config.output_dir = dir.path().to_path_buf();
        let result = run_experiment(&config, workers).unwrap();
        let files: Vec<(String, Vec<u8>)> = result
            .metrics_files
            .iter()
            .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(p).unwrap()))
            .collect();
        outputs.push(files);
    }
    let identical = outputs.windows(2).all(|w| w[0] == w[1]);
    outcome(identical, format!("{} CSVs compared across two 1-worker runs and one 4-worker run", outputs[0].len()))
}

type Criterion = (u32, &'static str, Duration, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 9] = [
        (1, "numeric invariants", Duration::from_secs(60), numeric_invariants),
        (2, "BBSE recovery", Duration::from_secs(120), bbse_recovery),
        (3, "risk estimator unbiasedness", Duration::from_secs(120), unbiasedness),
        (4, "adaptivity versus FixLR", Duration::from_secs(600), adaptivity),
        (5, "signal sanity", Duration::from_secs(300), signal_sanity),
        (6, "regret rate shape", Duration::from_secs(600), regret_shape),
        (7, "surrogate bound direction", Duration::from_secs(180), surrogate_bound),
        (8, "convergence sanity", Duration::from_secs(300), convergence),
        (9, "determinism", Duration::from_secs(300), determinism),
    ];
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    for (id, name, budget, check) in criteria {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            outcome(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        let elapsed = start.elapsed();
        let pass = result.pass && elapsed <= budget;
        println!(
            "{} criterion {id} ({name}): {} [{:.1}s / {}s budget]",
            if pass { "PASS" } else { "FAIL" },
            result.detail,
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
        if !pass {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
