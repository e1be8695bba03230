use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fedade_core::estimation::{bbse_estimate, build_confusion, prediction_histogram};
use fedade_core::federation::{client_step, run, Simulation};
use fedade_core::numerics::{simplex_project, softmax, solve_regularized};
use fedade_core::{Mat, ProbVector, RunConfig, ScenarioDescriptor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_run() -> RunConfig {
    RunConfig {
        num_clients: 20,
        participant_rate: 0.5,
        pretrain_samples: 2000,
        pretrain_epochs: 2,
        scenario: ScenarioDescriptor { horizon: 10, ..Default::default() },
        ..Default::default()
    }
}

fn numerics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for k in [10usize, 100] {
        let v: Vec<f64> = (0..k).map(|_| rng.random_range(-5.0..5.0)).collect();
        c.bench_with_input(BenchmarkId::new("softmax", k), &v, |b, v| b.iter(|| softmax(black_box(v))));
        c.bench_with_input(BenchmarkId::new("simplex_project", k), &v, |b, v| {
            b.iter(|| simplex_project(black_box(v)))
        });
    }
    let k = 10;
    let mut m = Mat::identity(k);
    for v in m.as_mut_slice() {
        *v += rng.random_range(0.0..0.1);
    }
    let y: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
    c.bench_function("solve_regularized/10", |b| b.iter(|| solve_regularized(black_box(&m), black_box(&y), 1e-6)));
}

fn estimation(c: &mut Criterion) {
    let sim = Simulation::new(small_run()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batch = sim.task().sample_batch(&ProbVector::uniform(5), 64, &mut rng).unwrap();
    let model = &sim.pretrained().params;
    c.bench_function("prediction_histogram/64", |b| b.iter(|| prediction_histogram(model, batch.inputs())));
    c.bench_function("build_confusion/2000", |b| b.iter(|| build_confusion(model, &sim.pretrained().data)));
    let hist = prediction_histogram(model, batch.inputs()).unwrap();
    c.bench_function("bbse_estimate/5", |b| b.iter(|| bbse_estimate(sim.confusion(), black_box(&hist), 1e-6)));
    let config = sim.config().clone();
    c.bench_function("client_step", |b| {
        b.iter_batched(
            || sim.clients()[0].clone(),
            |mut client| client_step(&mut client, batch.inputs(), sim.confusion(), &config),
            criterion::BatchSize::SmallInput,
        )
    });
}

fn simulation(c: &mut Criterion) {
    let mut group = c.benchmark_group("run");
    group.sample_size(10);
    group.bench_function("20_clients_10_steps", |b| b.iter(|| run(small_run())));
    group.finish();
}

criterion_group!(benches, numerics, estimation, simulation);
criterion_main!(benches);
