use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use cpme::data::{generate, stream_rng, ScenarioKind, ScenarioSpec};
use cpme::embedding::{dr_embedding, DrOptions};
use cpme::herding::{herd, Grid, HerdConfig};
use cpme::kernels::{gram_self, median_heuristic, KernelSpec, PointSet};
use cpme::nuisance::{fit_cme, median_kernels};
use cpme::testing::kpt_permutation;
use cpme::{dr_kpt, DrKptConfig, LambdaChoice};

fn bench_gram(c: &mut Criterion) {
    let mut group = c.benchmark_group("gram");
    for n in [200, 400, 800] {
        let sc = generate(&ScenarioSpec::new(ScenarioKind::TestI, n, 1)).unwrap();
        let k = KernelSpec::gaussian(median_heuristic(&sc.data.covariates).unwrap()).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n), &sc.data.covariates, |b, x| {
            b.iter(|| gram_self(&k, black_box(x)).unwrap())
        });
    }
    group.finish();
}

fn bench_fit(c: &mut Criterion) {
    let mut group = c.benchmark_group("fit_cme");
    for n in [200, 400, 800] {
        let sc = generate(&ScenarioSpec::new(ScenarioKind::TestII, n, 2)).unwrap();
        let k = median_kernels(&sc.data).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n), &sc.data, |b, d| {
            b.iter(|| fit_cme(black_box(d), k, 1e-2).unwrap())
        });
    }
    group.finish();
}

fn bench_tests(c: &mut Criterion) {
    let sc = generate(&ScenarioSpec::new(ScenarioKind::TestI, 400, 3)).unwrap();
    let pi2 = sc.alternative.clone().unwrap();
    let mut group = c.benchmark_group("test_n400");
    group.sample_size(10);
    let cfg = DrKptConfig {
        lambda: LambdaChoice::Fixed(1e-2),
        ..DrKptConfig::default()
    };
    group.bench_function("dr-kpt", |b| {
        b.iter(|| dr_kpt(&sc.data, &sc.target, &pi2, 0.05, &cfg).unwrap())
    });
    let ls = median_heuristic(&PointSet::from_scalars(&sc.data.outcomes)).unwrap();
    let ky = KernelSpec::gaussian(ls).unwrap();
    group.bench_function("kpt-1000-perms", |b| {
        b.iter(|| {
            let mut rng = stream_rng(0, 0);
            kpt_permutation(&sc.data, &sc.target, &pi2, 0.05, 1000, ky, &mut rng).unwrap()
        })
    });
    group.finish();
}

fn bench_herd(c: &mut Criterion) {
    let sc = generate(&ScenarioSpec::new(ScenarioKind::HerdLogisticNonlinear, 500, 4)).unwrap();
    let k = median_kernels(&sc.data).unwrap();
    let model = fit_cme(&sc.data, k, 1e-2).unwrap();
    let mut rng = stream_rng(4, 1);
    let chi = dr_embedding(&model, &sc.logging, &sc.target, DrOptions::default(), &mut rng).unwrap();
    let grid = Grid::around(&sc.data.outcomes).unwrap();
    let mut group = c.benchmark_group("herd");
    group.sample_size(10);
    for m in [100, 500] {
        let cfg = HerdConfig::new(m, grid.clone());
        group.bench_with_input(BenchmarkId::from_parameter(m), &cfg, |b, cfg| {
            b.iter(|| herd(black_box(&chi), cfg).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_gram, bench_fit, bench_tests, bench_herd);
criterion_main!(benches);
