use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use ntklev::nn::{dynamic_kernel, gradient, init_gaussian, train, TrainOptions};
use ntklev::{generate_dataset, SeedStream};

fn gradient_step(c: &mut Criterion) {
    let ds = generate_dataset(8, 4, SeedStream::new(1, 0), 0.05).unwrap();
    let mut group = c.benchmark_group("gradient");
    for m in [256, 4096] {
        let net = init_gaussian(m, 4, 1.0, 0.01, SeedStream::new(1, 1)).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(m), &net, |b, net| {
            b.iter(|| gradient(black_box(net), &ds.x, &ds.y).unwrap())
        });
    }
    group.finish();
}

fn kernel(c: &mut Criterion) {
    let ds = generate_dataset(8, 4, SeedStream::new(2, 0), 0.05).unwrap();
    let net = init_gaussian(4096, 4, 1.0, 0.0, SeedStream::new(2, 1)).unwrap();
    c.bench_function("dynamic_kernel/4096", |b| {
        b.iter(|| dynamic_kernel(black_box(&net), &ds.x).unwrap())
    });
}

fn short_run(c: &mut Criterion) {
    let ds = generate_dataset(8, 4, SeedStream::new(3, 0), 0.05).unwrap();
    let opts = TrainOptions {
        eta: 0.1,
        steps: 100,
        diag_every: 10,
        u_star: None,
        x_test: None,
    };
    let mut group = c.benchmark_group("train_100_steps");
    group.sample_size(10);
    group.bench_function("m1024", |b| {
        b.iter(|| {
            let mut net = init_gaussian(1024, 4, 1.0, 0.01, SeedStream::new(3, 1)).unwrap();
            train(&mut net, &ds.x, &ds.y, &opts).unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, gradient_step, kernel, short_run);
criterion_main!(benches);
