//! Parallel vs single-threaded timings of the hot loops. Build with
//! `--no-default-features` to time the sequential fallback itself.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use flywheel_core::artifact::fit_artifact;
use flywheel_core::constraints::ConstraintSet;
use flywheel_core::heatmap::heatmap;
use flywheel_core::par;
use flywheel_core::scorer::{
    fit_ensemble, sample_negatives, NegativeConfig, ScorerKind, TrainConfig,
};
use flywheel_core::toyworld::{sample_expert, unsafe_reward_mass, WorldSpec};

fn kernels(c: &mut Criterion) {
    let world = WorldSpec::preset("two-ridges").unwrap();
    let data = sample_expert(&world, 200, 0.2, 7).unwrap();
    let neg = sample_negatives(&world.domain, &data, &NegativeConfig::default(), 7).unwrap();
    let cfg = TrainConfig {
        seed: 7,
        bandwidth: world.bandwidth(),
        ..TrainConfig::default()
    };
    let cset = ConstraintSet::default();
    let (artifact, _) =
        fit_artifact(ScorerKind::Rbf, &world.domain, &data, &neg, &cfg, &cset).unwrap();

    let one = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    let mode = if par::is_parallel() {
        "rayon"
    } else {
        "sequential-build"
    };
    let mut g = c.benchmark_group("kernels");
    g.sample_size(10);
    for (label, single) in [(mode, false), ("one-thread", true)] {
        let run = |f: &mut (dyn FnMut() + Send)| if single { one.install(f) } else { f() };
        g.bench_function(BenchmarkId::new("unsafe_mass_1e4", label), |b| {
            b.iter(|| {
                run(&mut || {
                    black_box(unsafe_reward_mass(&world, &artifact, 10_000, 7).unwrap());
                })
            })
        });
        g.bench_function(BenchmarkId::new("heatmap_128", label), |b| {
            b.iter(|| {
                run(&mut || {
                    black_box(heatmap(&artifact, 128, None).unwrap());
                })
            })
        });
        g.bench_function(BenchmarkId::new("rbf_ensemble_5", label), |b| {
            b.iter(|| {
                run(&mut || {
                    black_box(
                        fit_ensemble(ScorerKind::Rbf, &world.domain, &data, &neg, &cfg).unwrap(),
                    );
                })
            })
        });
    }
    g.finish();
}

criterion_group!(benches, kernels);
criterion_main!(benches);
