use binlite::quant::{quantize, InferenceEngine};
use binlite::{Arch, QuantMode};
use binlite_bench::{model, random_tensor};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

fn threads(c: &mut Criterion) {
    let graph = model(Arch::MobilenetV2, 0.5, 96);
    let x = random_tensor(&[1, 96, 96, 3], 1);
    let mut g = c.benchmark_group("mobilenet_v2_w0.5_96/threads");
    for threads in [1, 2, 4] {
        let engine = InferenceEngine::new(threads).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(threads), &threads, |bench, _| {
            bench.iter(|| engine.infer(&graph, black_box(&x)).unwrap())
        });
    }
    g.finish();
}

fn precision(c: &mut Criterion) {
    let f32_graph = model(Arch::ScratchCnn, 0.5, 64);
    let x = random_tensor(&[1, 64, 64, 3], 2);
    let engine = InferenceEngine::new(1).unwrap();
    let mut g = c.benchmark_group("scratch_w0.5_64/dtype");
    g.bench_function("f32", |bench| bench.iter(|| engine.infer(&f32_graph, black_box(&x)).unwrap()));
    for mode in [QuantMode::F16, QuantMode::I8Dynamic] {
        let q = quantize(&f32_graph, mode).unwrap();
        g.bench_function(mode.to_string(), |bench| bench.iter(|| engine.infer(&q, black_box(&x)).unwrap()));
    }
    g.finish();
}

criterion_group!(benches, threads, precision);
criterion_main!(benches);
