use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use fullpoint_bench::{attn_setup, conv_setup, fixture};
use fullpoint_core::cloud::{canonical_seed, farthest_point_sample, knn_self};
use fullpoint_core::fpconv::{fpconv_forward_efficient, fpconv_forward_naive, Aggregator};
use fullpoint_core::fptransformer::{fptransformer_forward_efficient, fptransformer_forward_naive};
use fullpoint_core::nn::Session;
use fullpoint_core::{PointCloud, Tape};

fn fpconv(c: &mut Criterion) {
    let mut g = c.benchmark_group("fpconv");
    for n in [256, 1024] {
        let f = fixture(n, 32, 16, 7);
        let (store, params, local) = conv_setup(&f, 32, 4);
        let params = params.with_aggregator(Aggregator::Sum);
        g.bench_with_input(BenchmarkId::new("efficient", n), &n, |b, _| {
            b.iter(|| {
                let tape = Tape::new();
                let s = Session::inference(&tape, &store);
                fpconv_forward_efficient(&s, tape.constant(f.features.clone()), &local, &f.nbr, &params).unwrap()
                    .to_tensor()
            })
        });
        g.bench_with_input(BenchmarkId::new("naive", n), &n, |b, _| {
            b.iter(|| {
                let tape = Tape::new();
                let s = Session::inference(&tape, &store);
                fpconv_forward_naive(&s, tape.constant(f.features.clone()), &local, &f.nbr, &params).unwrap()
                    .to_tensor()
            })
        });
    }
    g.finish();
}

fn fptransformer(c: &mut Criterion) {
    let mut g = c.benchmark_group("fptransformer");
    for n in [256, 1024] {
        let f = fixture(n, 32, 16, 8);
        let (store, params) = attn_setup(32, 4);
        g.bench_with_input(BenchmarkId::new("efficient", n), &n, |b, _| {
            b.iter(|| {
                let tape = Tape::new();
                let s = Session::inference(&tape, &store);
                fptransformer_forward_efficient(&s, tape.constant(f.features.clone()), &f.positions, &f.nbr, &params)
                    .unwrap()
                    .to_tensor()
            })
        });
        g.bench_with_input(BenchmarkId::new("naive", n), &n, |b, _| {
            b.iter(|| {
                let tape = Tape::new();
                let s = Session::inference(&tape, &store);
                fptransformer_forward_naive(&s, tape.constant(f.features.clone()), &f.positions, &f.nbr, &params)
                    .unwrap()
                    .to_tensor()
            })
        });
    }
    g.finish();
}

fn grouping(c: &mut Criterion) {
    let mut g = c.benchmark_group("grouping");
    for n in [1024, 4096] {
        let f = fixture(n, 1, 1, 9);
        let cloud = PointCloud::new(f.positions.clone()).unwrap();
        g.bench_with_input(BenchmarkId::new("knn16", n), &n, |b, _| b.iter(|| knn_self(&f.positions, 16, true).unwrap()));
        g.bench_with_input(BenchmarkId::new("fps_quarter", n), &n, |b, _| {
            b.iter(|| farthest_point_sample(&cloud, n / 4, canonical_seed(&cloud)).unwrap())
        });
    }
    g.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = fpconv, fptransformer, grouping
}
criterion_main!(benches);
