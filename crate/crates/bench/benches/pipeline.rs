use criterion::{criterion_group, criterion_main, Criterion};
use shed::geometry::{backproject, chamfer_3d, Intrinsics};
use shed::loss_metrics::{canny_edges, ChamferMode, CANNY_HIGH, CANNY_LOW};
use shed::trainer::sample_gradients;
use shed_bench::desk_fixture;
use std::hint::black_box;

fn pipeline(c: &mut Criterion) {
    let f = desk_fixture();
    let (h, w) = (f.sample.depth.height, f.sample.depth.width);
    let mut g = c.benchmark_group("desk");
    g.sample_size(10);
    g.bench_function("superpixels", |b| b.iter(|| f.model.superpixels(black_box(&f.sample.image)).unwrap()));
    g.bench_function("forward", |b| b.iter(|| f.model.predict(black_box(&f.sample.image), &f.superpixels).unwrap()));
    g.bench_function("forward_backward", |b| {
        b.iter(|| sample_gradients(&f.model, black_box(&f.sample.image), &f.superpixels, &f.sample.depth, 0.85).unwrap())
    });
    g.bench_function("canny", |b| b.iter(|| canny_edges(black_box(&f.sample.depth), CANNY_LOW, CANNY_HIGH)));
    let k = Intrinsics::for_size(h, w);
    let cloud = backproject(&f.sample.depth, &k, 1.0);
    let shifted = cloud.translated([0.05, 0.0, 0.1]);
    g.bench_function("chamfer_3d", |b| {
        b.iter(|| chamfer_3d(black_box(&cloud), &shifted, ChamferMode::Squared).unwrap())
    });
    g.finish();
}

criterion_group!(benches, pipeline);
criterion_main!(benches);
