use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use metapop::canonical::{canonical_ensemble_run, CanonicalConfig, CanonicalParticle, XiEnsemble};
use metapop::exec::Execution;
use metapop::kernels::{MutationFamily, MutationKind, RateFn, RateModel, Trait};
use metapop::tss::{tss_replicates, SiteConfiguration, TssConfig};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn tss_model() -> RateModel {
    RateModel::new(
        RateFn::parse("exp(0.5 * (y - x))").unwrap(),
        RateFn::Constant(1.0),
        RateFn::Constant(0.5),
        MutationFamily::new(MutationKind::IsotropicGaussian { std: 0.1 }, 1.0).unwrap(),
        20.0,
        1,
    )
    .unwrap()
}

fn bench_tss(c: &mut Criterion) {
    let model = tss_model();
    let init = SiteConfiguration::new(vec![Trait::scalar(0.0); 16]).unwrap();
    let cfg = TssConfig::new(5, 2.0);
    let mut group = c.benchmark_group("tss_replicates");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::new(name, 256), &exec, |b, &exec| {
            b.iter(|| black_box(tss_replicates(&model, &init, &cfg, 11, 256, exec).unwrap()))
        });
    }
    group.finish();
}

fn bench_canonical(c: &mut Criterion) {
    let model = RateModel::new(
        RateFn::parse("exp(sin(y - x))").unwrap(),
        RateFn::Constant(1.0),
        RateFn::Constant(0.0),
        MutationFamily::new(MutationKind::IsotropicGaussian { std: 1.0 }, 1.0).unwrap(),
        3.0,
        1,
    )
    .unwrap();
    let particles = (0..4096)
        .map(|i| CanonicalParticle {
            r: (i as f64 + 0.5) / 4096.0,
            x: Trait::scalar(0.0),
        })
        .collect();
    let ensemble = XiEnsemble::new(particles).unwrap();
    let cfg = CanonicalConfig::new(2, 1e-2, 1.0);
    let mut group = c.benchmark_group("canonical_ensemble");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_with_input(BenchmarkId::new(name, 4096), &exec, |b, &exec| {
            b.iter(|| black_box(canonical_ensemble_run(&model, &ensemble, &cfg, 5, exec).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_tss, bench_canonical);
criterion_main!(benches);
