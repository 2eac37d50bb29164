use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use kitt_core::gp::{log_marginal_likelihood, log_marginal_likelihood_value};
use kitt_core::inference::{generate_caption, DecodeMode};
use kitt_core::vocab::default_vocabulary;
use kitt_core::{ArchitectureConfig, Dataset, GpModel, KernelExpression, KittModel, ModelKind, Token};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dataset(n: usize, d: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(n, d, |_, _| rng.random_range(-2.5..2.5));
    let y = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
    Dataset::new(x, y).unwrap()
}

fn lml(c: &mut Criterion) {
    let mut g = c.benchmark_group("lml");
    let expr = |d| {
        let tokens = ["RBF", "LIN*PER"].map(|t| Token::parse(t).unwrap());
        KernelExpression::from_tokens(&tokens, d)
    };
    for n in [64, 256, 512] {
        let data = dataset(n, 4, n as u64);
        let model = GpModel::new(expr(4), 0.1);
        g.bench_with_input(BenchmarkId::new("value", n), &n, |b, _| {
            b.iter(|| log_marginal_likelihood_value(black_box(&data.x), &data.y, &model).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("gradient", n), &n, |b, _| {
            b.iter(|| log_marginal_likelihood(black_box(&data.x), &data.y, &model).unwrap())
        });
    }
    g.finish();
}

fn network(c: &mut Criterion) {
    let model = KittModel::new(&ArchitectureConfig::default(), ModelKind::Captioner, default_vocabulary(), 0).unwrap();
    let mut g = c.benchmark_group("network");
    g.sample_size(10);
    for (n, d) in [(64, 4), (512, 4), (64, 14)] {
        let data = dataset(n, d, 7);
        let id = format!("{n}x{d}");
        g.bench_function(BenchmarkId::new("encode", &id), |b| {
            b.iter(|| model.encode_dataset(black_box(&data.x), data.y.as_slice()).unwrap())
        });
        g.bench_function(BenchmarkId::new("caption", &id), |b| {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            b.iter(|| generate_caption(&model, black_box(&data), DecodeMode::Greedy, &mut rng).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, lml, network);
criterion_main!(benches);
