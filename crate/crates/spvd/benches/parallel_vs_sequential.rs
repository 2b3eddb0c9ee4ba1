//! Rayon-backed paths vs their sequential fallbacks. Both paths produce
//! bitwise-identical results; the interesting number is the speedup.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use spvd::metrics::{distance_matrix, distance_matrix_seq, Metric};
use spvd::par;
use spvd::tensor::Tensor;

fn clouds(count: usize, n: usize) -> Vec<Tensor<f64>> {
    let mut rng = ChaCha12Rng::seed_from_u64(42);
    (0..count).map(|_| Tensor::randn(vec![n, 3], &mut rng, false)).collect()
}

fn bench_distance_matrix(c: &mut Criterion) {
    let mut group = c.benchmark_group("distance_matrix_cd");
    for &n in &[64usize, 256] {
        let set = clouds(10, n);
        group.bench_with_input(BenchmarkId::new("parallel", n), &set, |b, s| {
            b.iter(|| distance_matrix(s, s, Metric::Cd).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("sequential", n), &set, |b, s| {
            b.iter(|| distance_matrix_seq(s, s, Metric::Cd).unwrap())
        });
    }
    group.finish();

    let mut group = c.benchmark_group("distance_matrix_emd");
    let set = clouds(6, 64);
    group.bench_function("parallel", |b| {
        b.iter(|| distance_matrix(&set, &set, Metric::Emd).unwrap())
    });
    group.bench_function("sequential", |b| {
        b.iter(|| distance_matrix_seq(&set, &set, Metric::Emd).unwrap())
    });
    group.finish();
}

fn bench_chunk_map(c: &mut Criterion) {
    // matmul-shaped workload: one dot product row per output chunk
    let k = 256;
    let rows = 512;
    let mut rng = ChaCha12Rng::seed_from_u64(43);
    let a: Vec<f64> = Tensor::<f64>::randn(vec![rows, k], &mut rng, false)
        .data()
        .to_vec();
    let x: Vec<f64> = Tensor::<f64>::randn(vec![k, 1], &mut rng, false)
        .data()
        .to_vec();
    let dot = |i: usize, out: &mut [f64]| {
        let mut acc = 0.0;
        for j in 0..k {
            acc += a[i * k + j] * x[j];
        }
        out[0] = acc;
    };
    let mut group = c.benchmark_group("row_dot_products");
    group.bench_function("parallel", |b| {
        b.iter(|| {
            let mut out = vec![0.0f64; rows];
            par::for_each_chunk(&mut out, 1, dot);
            out
        })
    });
    group.bench_function("sequential", |b| {
        b.iter(|| {
            let mut out = vec![0.0f64; rows];
            par::for_each_chunk_seq(&mut out, 1, dot);
            out
        })
    });
    group.finish();
}

criterion_group!(benches, bench_distance_matrix, bench_chunk_map);
criterion_main!(benches);
