use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use ewod_core::adapters::{advance_task, MergePolicy};
use ewod_core::heads::UnknownPath;
use ewod_core::linalg::{hungarian_assign, truncated_svd};
use ewod_core::rng::SeedStream;
use ewod_core::simulator::{detector_forward, DetectorParams};
use ewod_core::Matrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn uniform(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::new(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn linalg(c: &mut Criterion) {
    let mut rng = SeedStream::new(0).rng("bench/linalg");
    let m = uniform(&mut rng, 32, 32);
    c.bench_function("truncated_svd 32x32 r8", |b| b.iter(|| truncated_svd(black_box(&m), 8).unwrap()));
    let cost = uniform(&mut rng, 10, 12);
    c.bench_function("hungarian 10x12", |b| b.iter(|| hungarian_assign(black_box(&cost)).unwrap()));
}

fn detector(c: &mut Criterion) {
    let mut rng = SeedStream::new(1).rng("bench/detector");
    let mut p = DetectorParams::init(&SeedStream::new(2), &[1, 2, 3, 4, 5, 6], 32, 10, 8).unwrap();
    p.reset_task_adapters(&mut rng).unwrap();
    let tokens = uniform(&mut rng, 12, 32);
    c.bench_function("detector_forward d32 q10", |b| {
        b.iter(|| detector_forward(black_box(&p), black_box(&tokens), &[0, 1, 2, 3, 4, 5], UnknownPath::Eumix).unwrap())
    });
    let policy = MergePolicy::default();
    let state = p.adapters[0].clone();
    c.bench_function("advance_task 32x32 r8", |b| b.iter(|| advance_task(black_box(&state), 200, &policy).unwrap()));
}

criterion_group!(benches, linalg, detector);
criterion_main!(benches);
