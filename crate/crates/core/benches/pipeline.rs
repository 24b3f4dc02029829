use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use habitdual::approx::{calibrate_eta, ApproxKind, QMode};
use habitdual::duality::{evaluate, EvalOptions};
use habitdual::market::simulate_paths;
use habitdual::{Exec, ModelParams};

const PATHS: usize = 4000;
const STEPS: usize = 40;

fn variants() -> [(&'static str, Exec); 2] {
    [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)]
}

fn bench_simulate(c: &mut Criterion) {
    let model = ModelParams::baseline();
    let grid = model.grid(STEPS).unwrap();
    let mut group = c.benchmark_group("simulate_paths");
    for (name, exec) in variants() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| simulate_paths(&model.market, &grid, PATHS, black_box(7), exec).unwrap())
        });
    }
    group.finish();
}

fn bench_calibrate(c: &mut Criterion) {
    let model = ModelParams::baseline();
    let grid = model.grid(STEPS).unwrap();
    let batch = simulate_paths(&model.market, &grid, PATHS, 7, Exec::Parallel).unwrap();
    let mut group = c.benchmark_group("calibrate_dual");
    for (name, exec) in variants() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| calibrate_eta(ApproxKind::Dual, &model, &batch, QMode::FirstOrder, exec).unwrap())
        });
    }
    group.finish();
}

fn bench_evaluate(c: &mut Criterion) {
    let model = ModelParams::baseline();
    let grid = model.grid(STEPS).unwrap();
    let batch = simulate_paths(&model.market, &grid, PATHS, 7, Exec::Parallel).unwrap();
    let mut group = c.benchmark_group("evaluate_both");
    group.sample_size(10);
    for (name, exec) in variants() {
        let opts = EvalOptions {
            exec,
            ..EvalOptions::default()
        };
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| evaluate(&ApproxKind::ALL, &model, &batch, &opts).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_simulate, bench_calibrate, bench_evaluate);
criterion_main!(benches);
