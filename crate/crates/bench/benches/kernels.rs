use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use progae_core::graph::Graph;
use progae_core::latent_ops::slerp;
use progae_core::metrics::{fit_feature_stats, frechet_distance};
use progae_core::normalization::{pixel_norm, spectral_normalize, SpectralState};
use progae_core::Tensor;
use progae_bench::codes;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn conv(c: &mut Criterion) {
    let mut group = c.benchmark_group("conv3x3_forward_backward");
    for res in [8usize, 16, 32] {
        let x = random(&[16, 32, res, res], 1);
        let w = random(&[32, 32, 3, 3], 2);
        group.bench_with_input(BenchmarkId::from_parameter(res), &res, |b, _| {
            b.iter(|| {
                let mut g = Graph::new();
                let xv = g.leaf(x.clone(), false);
                let wv = g.leaf(w.clone(), true);
                let y = g.conv2d(xv, wv, None, 1, 1).unwrap();
                let loss = g.mean(y);
                black_box(g.backward(loss).unwrap());
            })
        });
    }
    group.finish();
}

fn normalization(c: &mut Criterion) {
    let w = random(&[128, 128 * 9], 3);
    let state = SpectralState::random(128, &mut ChaCha8Rng::seed_from_u64(4));
    c.bench_function("spectral_normalize_128x1152", |b| {
        b.iter(|| black_box(spectral_normalize(&w, &state, 1).unwrap()))
    });
    let f = random(&[16, 64, 16, 16], 5);
    c.bench_function("pixel_norm_16x64x16x16", |b| b.iter(|| black_box(pixel_norm(&f, 1e-8).unwrap())));
}

fn metrics(c: &mut Criterion) {
    let a = fit_feature_stats(&random(&[1000, 64], 6)).unwrap();
    let b = fit_feature_stats(&random(&[1000, 64], 7)).unwrap();
    c.bench_function("frechet_distance_f64", |bench| {
        bench.iter(|| black_box(frechet_distance(&a, &b).unwrap()))
    });
}

fn latent(c: &mut Criterion) {
    let z = codes(2, 512, 8);
    c.bench_function("slerp_512", |b| b.iter(|| black_box(slerp(&z[0], &z[1], 0.3).unwrap())));
}

criterion_group!(benches, conv, normalization, metrics, latent);
criterion_main!(benches);
