use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use otrecon::kspace::{fft2c, make_mask};
use otrecon::nets::init_state;
use otrecon::otcore::{exact_w1, sinkhorn_w1};
use otrecon::trainer::{infer, train_step, Adam, Prepared};
use otrecon::{ComplexImage, Dataset, DiscreteMeasure, MaskScheme, TrainConfig};

fn random_image(n: usize, rng: &mut ChaCha8Rng) -> ComplexImage {
    let re: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let im: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    ComplexImage::from_parts(n, n, &re, &im)
}

fn random_measure(points: usize, rng: &mut ChaCha8Rng) -> DiscreteMeasure {
    let support = (0..points).map(|_| vec![rng.random_range(0.0..8.0), rng.random_range(0.0..8.0)]).collect();
    let weights = (0..points).map(|_| rng.random_range(0.1..1.0)).collect();
    DiscreteMeasure::new(support, weights).unwrap()
}

fn toy_data(cfg: &TrainConfig) -> Vec<Prepared> {
    let ds = Dataset::phantoms(12, 32, 3.0, 1).unwrap();
    let mask = cfg.mask(32, 32).unwrap();
    Prepared::prepare_all(&ds.train, &mask).unwrap()
}

fn bench_fft(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("fft2c");
    for n in [64, 320] {
        let img = random_image(n, &mut rng);
        group.bench_with_input(BenchmarkId::from_parameter(n), &img, |b, img| b.iter(|| fft2c(black_box(img)).unwrap()));
    }
    group.finish();
    c.bench_function("mask random 320", |b| b.iter(|| make_mask(MaskScheme::Random, 0.25, 320, 320, black_box(3)).unwrap()));
}

fn bench_transport(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut group = c.benchmark_group("w1");
    for points in [16, 32, 64] {
        let (mu, nu) = (random_measure(points, &mut rng), random_measure(points, &mut rng));
        group.bench_with_input(BenchmarkId::new("exact", points), &(&mu, &nu), |b, (mu, nu)| b.iter(|| exact_w1(mu, nu).unwrap()));
        group.bench_with_input(BenchmarkId::new("sinkhorn", points), &(&mu, &nu), |b, (mu, nu)| {
            b.iter(|| sinkhorn_w1(mu, nu, 0.05, 20_000).unwrap())
        });
    }
    group.finish();
}

fn bench_networks(c: &mut Criterion) {
    let cfg = TrainConfig::toy();
    let data = toy_data(&cfg);
    let state = init_state(&cfg.net, 0).unwrap();
    c.bench_function("toy inference 32x32", |b| b.iter(|| infer(&state, cfg.ablation, black_box(&data[0])).unwrap()));

    let mut group = c.benchmark_group("toy train step");
    group.sample_size(10);
    let batch: Vec<&Prepared> = data.iter().take(cfg.batch_size).collect();
    group.bench_function("batch 4", |b| {
        let mut s = state.clone();
        let mut opt = Adam::new(&s);
        let mut step = 0;
        b.iter(|| {
            step += 1;
            train_step(&mut s, &mut opt, &batch, &cfg, step, &mut |_| {}).unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, bench_fft, bench_transport, bench_networks);
criterion_main!(benches);
