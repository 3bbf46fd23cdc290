//! Quantization kernels: fake-quant round trips, integer matvec, qGELU.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::{Array1, Array2};
use qs5_core::qops;
use qs5_core::quant;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bench_quant(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(9);

    let mut group = c.benchmark_group("fake_quant");
    for &n in &[1024usize, 16384] {
        let x = Array1::from_shape_fn(n, |_| rng.gen_range(-4.0..4.0));
        group.bench_with_input(BenchmarkId::from_parameter(n), &x, |b, x| {
            b.iter(|| quant::fake_quant(x, 8).unwrap())
        });
    }
    group.finish();

    let mut group = c.benchmark_group("int_matvec");
    for &n in &[64usize, 256] {
        let w = Array2::from_shape_fn((n, n), |_| rng.gen_range(-1.0..1.0));
        let x = Array1::from_shape_fn(n, |_| rng.gen_range(-1.0..1.0));
        let wq = quant::quantize(&w, 8).unwrap();
        let xq = quant::quantize(&x, 8).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n), &(), |b, _| {
            b.iter(|| quant::int_matvec(&wq, &xq).unwrap())
        });
    }
    group.finish();

    let mut group = c.benchmark_group("qgelu_int");
    for &n in &[1024usize, 16384] {
        let x = Array1::from_shape_fn(n, |_| rng.gen_range(-4.0..4.0));
        let q = quant::quantize(&x, 8).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n), &q, |b, q| {
            b.iter(|| qops::qgelu(q).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_quant);
criterion_main!(benches);
