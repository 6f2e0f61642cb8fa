use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use warpformer::dataio::Label;
use warpformer::harness::metrics::{auprc, auroc};
use warpformer::nn::ForwardCtx;
use warpformer::warp::{transform_matrix, TransformOptions, WarpMode};
use warpformer::Tape;
use warpformer_bench::{batch, model, scores};

fn train_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_step");
    group.sample_size(10);
    let (k, len) = (3, 64);
    let b = batch(32, k, len, 1);
    let labels: Vec<Label> = (0..32).map(|i| Label::Class(i % 2)).collect();
    let refs: Vec<&Label> = labels.iter().collect();
    for mode in [WarpMode::Adaptive, WarpMode::Identity] {
        let (m, mut store) = model(mode, 16, k, len);
        group.bench_function(BenchmarkId::from_parameter(mode), |bench| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let out = m.forward(&mut tape, &store, &b, &mut ForwardCtx::eval()).unwrap();
                let loss = m.loss(&mut tape, &out, &refs).unwrap();
                store.zero_grad();
                tape.backward(loss, &mut store).unwrap();
            })
        });
    }
    group.finish();
}

fn warp_transform(c: &mut Criterion) {
    let lam: Vec<f64> = (1..=64).map(|i| i as f64 / 64.0).collect();
    let mut group = c.benchmark_group("transform_matrix");
    for ln in [8, 64, 128] {
        group.bench_function(BenchmarkId::from_parameter(ln), |bench| {
            bench.iter(|| transform_matrix(&lam, ln, TransformOptions::default()))
        });
    }
    group.finish();
}

fn metrics(c: &mut Criterion) {
    let (s, y) = scores(5000, 3);
    c.bench_function("auroc/5000", |bench| bench.iter(|| auroc(&s, &y)));
    c.bench_function("auprc/5000", |bench| bench.iter(|| auprc(&s, &y)));
}

criterion_group!(benches, train_step, warp_transform, metrics);
criterion_main!(benches);
