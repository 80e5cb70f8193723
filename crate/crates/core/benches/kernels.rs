//! Parallel kernels against the sequential fallback. Build with
//! `--no-default-features` to drop rayon entirely; both arms then match.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;
use stgan::autodiff::kernels::{conv_forward, conv_input_grad, ConvGeom};
use stgan::cubes::{CubesConfig, CubesDataset};
use stgan::eval::{evaluate, EvalConfig};
use stgan::par;
use stgan::train::{StackView, TrainConfig, Trainer};

fn arms<T>(c: &mut Criterion, name: &str, mut f: impl FnMut() -> T) {
    let mut group = c.benchmark_group(name);
    group.sample_size(10);
    group.bench_function(BenchmarkId::from_parameter("parallel"), |b| b.iter(|| black_box(f())));
    group.bench_function(BenchmarkId::from_parameter("sequential"), |b| b.iter(|| par::sequential(|| black_box(f()))));
    group.finish();
}

fn conv(c: &mut Criterion) {
    // first critic layer on a batch of 20 at 32x32
    let g = ConvGeom::new(20, 3, 32, 32, 8, 4, 2);
    let x: Vec<f32> = (0..20 * 3 * 32 * 32).map(|i| (i % 17) as f32 / 17.0).collect();
    let w: Vec<f32> = (0..8 * 3 * 16).map(|i| (i % 5) as f32 / 10.0 - 0.2).collect();
    let gy: Vec<f32> = (0..20 * 8 * 16 * 16).map(|i| (i % 3) as f32 - 1.0).collect();
    arms(c, "conv_forward", || conv_forward(&x, &w, &g));
    arms(c, "conv_input_grad", || conv_input_grad(&gy, &w, &g));
}

fn cubes(c: &mut Criterion) {
    let cfg = CubesConfig::default();
    arms(c, "render_20_cubes", || CubesDataset::generate(&cfg, 0, 0, 20).unwrap());
}

fn eval(c: &mut Criterion) {
    let data = CubesDataset::generate(&CubesConfig::default(), 0, 0, 20).unwrap();
    let trainer = Trainer::new(TrainConfig::desk()).unwrap();
    let view = StackView {
        stack: &trainer.stack,
        stages: 2,
    };
    let ecfg = EvalConfig::default();
    arms(c, "evaluate_20", || evaluate(&view, &data, &ecfg).unwrap());
}

criterion_group!(benches, conv, cubes, eval);
criterion_main!(benches);
