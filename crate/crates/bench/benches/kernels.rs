//! Kernel micro-benchmarks: the batched distance matrix should scale
//! quadratically in sequence length at fixed dimension, and the full encoder
//! forward should be dominated by it.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stosa_core::{w2_distance_matrix, w2_squared_diag, ModelParams, RunConfig, Tensor, Variant};

fn gaussians(n: usize, d: usize, rng: &mut ChaCha8Rng) -> (Tensor, Tensor) {
    let mean = Tensor::randn(&[n, d], 1.0, rng);
    let cov = Tensor::randn(&[n, d], 1.0, rng).map(|v| v.abs() + 0.05);
    (mean, cov)
}

fn bench_distance_matrix(c: &mut Criterion) {
    let mut group = c.benchmark_group("w2_distance_matrix");
    let d = 64;
    for &n in &[32usize, 64, 128, 256] {
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        let (qm, qc) = gaussians(n, d, &mut rng);
        let (km, kc) = gaussians(n, d, &mut rng);
        group.throughput(Throughput::Elements((n * n) as u64));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| w2_distance_matrix(&qm, &qc, &km, &kc).unwrap())
        });
    }
    group.finish();
}

fn bench_scalar_w2(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let d = 64;
    let m1: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let m2: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let c1: Vec<f64> = (0..d).map(|_| rng.gen_range(0.1..4.0)).collect();
    let c2: Vec<f64> = (0..d).map(|_| rng.gen_range(0.1..4.0)).collect();
    c.bench_function("w2_squared_diag_d64", |b| {
        b.iter(|| w2_squared_diag(&m1, &c1, &m2, &c2).unwrap())
    });
}

fn bench_encoder_forward(c: &mut Criterion) {
    let cfg = RunConfig {
        variant: Variant::Stosa,
        d: 64,
        n: 50,
        layers: 2,
        heads: 1,
        dropout: 0.0,
        allow_nonstandard: true,
        ..Default::default()
    };
    let model = ModelParams::init(&cfg, 500).unwrap();
    let context: Vec<u32> = (1..=40).map(|i| (i % 500) + 1).collect();
    c.bench_function("stosa_encode_n50_d64_l2", |b| {
        b.iter(|| stosa_core::encode_context(&model, &context).unwrap())
    });
}

criterion_group!(
    benches,
    bench_distance_matrix,
    bench_scalar_w2,
    bench_encoder_forward
);
criterion_main!(benches);
