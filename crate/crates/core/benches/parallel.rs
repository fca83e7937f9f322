//! Sequential (1-thread pool) vs default rayon pool on the data-parallel
//! kernels. Build with `--no-default-features` to compare against the plain
//! sequential code paths.

use calibra_core::fusion::{fuse_jlf, Regularization};
use calibra_core::model::calibrate;
use calibra_core::synthgen::{generate, generate_fusion_bench, FusionSpec, Miscalibration, SpatialPreset, SynthSpec};
use calibra_core::tree_net::{predict, Mode, TreeNetParams};
use calibra_core::TemperatureField;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn pools() -> Vec<(&'static str, rayon::ThreadPool)> {
    vec![
        ("1-thread", rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap()),
        ("default", rayon::ThreadPoolBuilder::new().build().unwrap()),
    ]
}

fn bench(c: &mut Criterion) {
    let data = generate(&SynthSpec {
        miscalibration: Miscalibration::Spatial(SpatialPreset::Halves { left: 3.0, right: 0.5 }),
        train: 0,
        val: 0,
        test: 16,
        ..Default::default()
    })
    .unwrap()
    .test
    .unwrap()
    .dataset;
    let stack = generate_fusion_bench(&FusionSpec::default()).unwrap().stack;
    let temps = TemperatureField::global(2.0).unwrap();
    let params = TreeNetParams::zeros(data.classes(), 1, 1e-3).unwrap();

    let mut group = c.benchmark_group("parallel");
    group.sample_size(10);
    for (name, pool) in pools() {
        group.bench_with_input(BenchmarkId::new("jlf_64x64x5", name), &pool, |b, pool| {
            b.iter(|| pool.install(|| fuse_jlf(&stack, Regularization::default()).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("softmax_16x64x64", name), &pool, |b, pool| {
            b.iter(|| pool.install(|| calibrate(&data, &temps).unwrap()))
        });
        group.bench_with_input(BenchmarkId::new("tree_net_predict_16", name), &pool, |b, pool| {
            b.iter(|| pool.install(|| predict(&params, &data, Mode::Lts).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
