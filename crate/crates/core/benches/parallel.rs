//! Rayon pool against a single-thread pool on the two data-parallel hot
//! paths: batch evaluation and dataset generation. Built without the
//! `parallel` feature both arms run the sequential fallback.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use panolayout::experiments::{generate_dataset, ExperimentConfig};
use panolayout::model::Model;
use panolayout::trainer::{evaluate, Sample};

fn small_config(n: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.n_samples = n;
    cfg.n_val = 1;
    cfg.n_test = 1;
    cfg.label_budget = 1;
    cfg
}

fn pools() -> Vec<(&'static str, rayon::ThreadPool)> {
    let all = rayon::current_num_threads();
    vec![
        ("sequential", rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap()),
        ("rayon", rayon::ThreadPoolBuilder::new().num_threads(all).build().unwrap()),
    ]
}

fn bench_evaluate(c: &mut Criterion) {
    let cfg = small_config(32);
    let ds = generate_dataset(&cfg).unwrap();
    let samples: Vec<&Sample> = ds.samples.iter().collect();
    let model = Model::new(cfg.height, cfg.width).unwrap();
    let params = model.init_params(0);
    let mut group = c.benchmark_group("evaluate_32");
    group.sample_size(10);
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| pool.install(|| evaluate(&model, &params, &samples).unwrap()))
        });
    }
    group.finish();
}

fn bench_generate(c: &mut Criterion) {
    let cfg = small_config(32);
    let mut group = c.benchmark_group("generate_32");
    group.sample_size(10);
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| pool.install(|| generate_dataset(&cfg).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_evaluate, bench_generate);
criterion_main!(benches);
