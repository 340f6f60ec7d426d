use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use precm_bench::{conv_fixture, net_fixture};
use precm_core::conv::{conv_sigma, conv_via_matrix};
use precm_core::group::{rotate, R0, R90};

fn bench_conv_modes(c: &mut Criterion) {
    let (input, kernel, spec) = conv_fixture(64);
    let mut group = c.benchmark_group("conv_sigma_64x64");
    group.bench_function("sigma0", |b| {
        b.iter(|| conv_sigma(black_box(&input), &kernel, &spec, R0).unwrap())
    });
    let turned = rotate(R90, &input);
    let turned_kernel = kernel.rotated(R90);
    group.bench_function("sigma1", |b| {
        b.iter(|| conv_sigma(black_box(&turned), &turned_kernel, &spec, R90).unwrap())
    });
    group.finish();
}

fn bench_matrix_route(c: &mut Criterion) {
    let (input, kernel, spec) = conv_fixture(16);
    let mut group = c.benchmark_group("conv_routes_16x16");
    group.bench_function("direct", |b| {
        b.iter(|| conv_sigma(black_box(&input), &kernel, &spec, R0).unwrap())
    });
    group.bench_function("matrix", |b| {
        b.iter(|| conv_via_matrix(black_box(&input), &kernel, &spec).unwrap())
    });
    group.finish();
}

fn bench_rotate(c: &mut Criterion) {
    let (input, _, _) = conv_fixture(64);
    c.bench_function("rotate_64x64", |b| {
        b.iter(|| rotate(R90, black_box(&input)))
    });
}

fn bench_net_forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("net_forward_32x32");
    for flavor in ["precm", "baseline"] {
        let (net, x) = net_fixture(flavor, 32);
        group.bench_function(flavor, |b| b.iter(|| net.forward(black_box(&x)).unwrap()));
    }
    group.finish();
}

criterion_group!(
    benches,
    bench_conv_modes,
    bench_matrix_route,
    bench_rotate,
    bench_net_forward
);
criterion_main!(benches);
