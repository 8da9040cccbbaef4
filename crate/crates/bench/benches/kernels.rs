use std::hint::black_box;

use bipcl::eval::evaluate_split;
use bipcl::graph::propagate;
use bipcl::model::InferenceSnapshot;
use bipcl::numerics::{matmul, matmul_nt};
use bipcl::trainer::{run_steps, OptimizerState};
use bipcl_bench::{random_tensor, workload};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn dense(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [64usize, 256] {
        let a = random_tensor(n, 64, 1);
        let b = random_tensor(64, n, 2);
        group.bench_with_input(BenchmarkId::new("nn", n), &n, |bench, _| {
            bench.iter(|| matmul(black_box(&a), black_box(&b)).unwrap())
        });
        let bt = random_tensor(n, 64, 3);
        group.bench_with_input(BenchmarkId::new("nt", n), &n, |bench, _| {
            bench.iter(|| matmul_nt(black_box(&a), black_box(&bt)).unwrap())
        });
    }
    group.finish();
}

fn sparse(c: &mut Criterion) {
    let w = workload(2000, 500, 64);
    let e = random_tensor(w.graph.n_items(), 64, 4);
    c.bench_function("propagate_depth2", |b| {
        b.iter(|| propagate(black_box(&w.graph), black_box(&e), 2).unwrap())
    });
}

fn training(c: &mut Criterion) {
    let w = workload(2000, 500, 32);
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    for variant in ["full", "no_cl"] {
        let cfg = bipcl::trainer::TrainConfig {
            ablation: bipcl::trainer::AblationFlags::variant(variant).unwrap(),
            ..w.cfg.clone()
        };
        group.bench_function(variant, |b| {
            b.iter(|| {
                let mut model = w.model.clone();
                let mut opt = OptimizerState::for_model(&model);
                run_steps(&mut model, &mut opt, &w.train, &w.graph, &cfg, 1).unwrap()
            })
        });
    }
    group.finish();
}

fn evaluation(c: &mut Criterion) {
    let w = workload(2000, 500, 32);
    let variant = w.cfg.ablation.architecture();
    let mut group = c.benchmark_group("evaluate");
    group.sample_size(10);
    group.bench_function("snapshot", |b| {
        b.iter(|| InferenceSnapshot::new(&w.model, &w.graph, variant).unwrap())
    });
    let snap = InferenceSnapshot::new(&w.model, &w.graph, variant).unwrap();
    group.bench_function("test_split", |b| {
        b.iter(|| evaluate_split(&snap, &w.test, &[20, 50], 1).unwrap())
    });
    group.finish();
}

criterion_group!(benches, dense, sparse, training, evaluation);
criterion_main!(benches);
