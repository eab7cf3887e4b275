use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use nsm_bench::{pair, synthetic, uniform_matrix};
use nsm_core::linalg::{pseudo_inverse, svd};
use nsm_core::matching::knn_match;
use nsm_core::metrics::wasserstein_exact;
use nsm_core::nn::{default_architecture, train, TrainConfig};

fn linalg(c: &mut Criterion) {
    for n in [10, 50, 100] {
        let a = uniform_matrix(n, n, 1);
        c.bench_function(&format!("svd {n}x{n}"), |b| b.iter(|| svd(black_box(&a)).unwrap()));
    }
    let tall = uniform_matrix(100, 5, 2);
    c.bench_function("pseudo_inverse 100x5", |b| {
        b.iter(|| pseudo_inverse(black_box(&tall), None).unwrap())
    });
}

fn transport(c: &mut Criterion) {
    let mut g = c.benchmark_group("wasserstein_exact");
    g.sample_size(10);
    for n in [50, 200] {
        let p = pair(n, 5, 3);
        g.bench_function(format!("{n}x{n} in 5d"), |b| b.iter(|| wasserstein_exact(black_box(&p)).unwrap()));
    }
    g.finish();
}

fn matching(c: &mut Criterion) {
    let ds = synthetic(4000, 100);
    let scores = uniform_matrix(4000, 5, 4);
    c.bench_function("knn 4000 rows, 5-d scores", |b| {
        b.iter(|| knn_match(black_box(&scores), &ds.t, 1, true).unwrap())
    });
    c.bench_function("knn 4000 rows, 100-d covariates", |b| {
        b.iter(|| knn_match(black_box(&ds.x), &ds.t, 1, true).unwrap())
    });
}

fn training(c: &mut Criterion) {
    let ds = synthetic(2400, 100);
    let mut model = default_architecture(100).unwrap();
    model.initialize(0);
    let cfg = TrainConfig {
        max_epochs: 1,
        ..TrainConfig::default()
    };
    let mut g = c.benchmark_group("train");
    g.sample_size(10);
    g.bench_function("one epoch, 2400 x 100, default network", |b| {
        b.iter(|| train(black_box(&model), &ds, None, &cfg).unwrap())
    });
    g.finish();
}

criterion_group!(benches, linalg, transport, matching, training);
criterion_main!(benches);
