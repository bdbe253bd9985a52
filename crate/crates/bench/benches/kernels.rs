use binlite::tensor::{conv2d, depthwise_conv2d, matmul, pool2d, ConvSpec, Padding, PoolMode};
use binlite_bench::random_tensor;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

fn gemm(c: &mut Criterion) {
    let mut g = c.benchmark_group("matmul");
    for n in [64, 256] {
        let a = random_tensor(&[n, n], 1);
        let b = random_tensor(&[n, n], 2);
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| matmul(black_box(&a), black_box(&b)).unwrap())
        });
    }
    g.finish();
}

fn convolution(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv2d_3x3");
    for (side, cin, cout) in [(56, 16, 32), (28, 64, 64)] {
        let spec = ConvSpec::new(3, 1, Padding::Same, cin, cout);
        let x = random_tensor(&[side, side, cin], 3);
        let k = random_tensor(&[3, 3, cin, cout], 4);
        let bias = random_tensor(&[cout], 5);
        g.bench_function(format!("{side}x{side}x{cin}->{cout}"), |bench| {
            bench.iter(|| conv2d(black_box(&x), &spec, &k, &bias).unwrap())
        });
    }
    g.finish();

    let spec = ConvSpec::new(3, 1, Padding::Same, 96, 96);
    let x = random_tensor(&[56, 56, 96], 6);
    let k = random_tensor(&[3, 3, 96], 7);
    c.bench_function("depthwise_3x3/56x56x96", |bench| {
        bench.iter(|| depthwise_conv2d(black_box(&x), &spec, &k).unwrap())
    });

    let x = random_tensor(&[112, 112, 32], 8);
    c.bench_function("maxpool_2x2/112x112x32", |bench| {
        bench.iter(|| pool2d(black_box(&x), 2, 2, PoolMode::Max).unwrap())
    });
}

criterion_group!(benches, gemm, convolution);
criterion_main!(benches);
