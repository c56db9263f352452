use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use daso_core::datagen::generate_dataset;
use daso_core::harness::config::RunConfig;
use daso_core::learner::run_training_with;
use daso_core::metrics::evaluate_with;
use daso_core::nn::{init_model, loss_and_grads_with, CompositeLoss, LossGroup, Term, TermKind};
use daso_core::par::Exec;

const STRATEGIES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn bench_loss(c: &mut Criterion) {
    let model = init_model(&[16, 64, 32], 10, 1).unwrap();
    let data = generate_dataset(&RunConfig::default().dataset, 2).unwrap();
    let mut loss = CompositeLoss::new();
    loss.declare(LossGroup::Cls, 1.0, 192);
    for s in data.labeled.iter().take(192) {
        let mut target = vec![0.0; 10];
        target[s.y] = 1.0;
        loss.push(
            s.x.clone(),
            vec![Term {
                group: LossGroup::Cls,
                kind: TermKind::Ce { target, offset: None },
            }],
        );
    }
    let mut g = c.benchmark_group("loss_and_grads_192");
    for (name, exec) in STRATEGIES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| loss_and_grads_with(exec, black_box(&model), &loss).unwrap())
        });
    }
    g.finish();

    let mut g = c.benchmark_group("evaluate_1000");
    for (name, exec) in STRATEGIES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| evaluate_with(exec, black_box(&model), &data.test, true).unwrap())
        });
    }
    g.finish();
}

fn bench_run(c: &mut Criterion) {
    let cfg = RunConfig::parse("total_steps = 100\neval_interval = 50\n[loss]\nP = 50\n[bank]\nL = 32\n").unwrap();
    let mut g = c.benchmark_group("train_100_steps");
    g.sample_size(10);
    for (name, exec) in STRATEGIES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| run_training_with(exec, black_box(&cfg)).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench_loss, bench_run);
criterion_main!(benches);
