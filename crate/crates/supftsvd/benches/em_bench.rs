//! Benchmarks of the per-iteration EM workloads. Run with the default
//! `parallel` feature and again with `--no-default-features` to compare the
//! rayon path against the sequential fallback.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use supftsvd::em::{e_step, fit, FitConfig};
use supftsvd::simulate::{simulate, MRule, SimConfig};

fn bench_e_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("e_step_all_subjects");
    for &(n, p) in &[(50usize, 100usize), (100, 300)] {
        let mut config = SimConfig::rank1(n, p, 1.0, 1.0, 7);
        config.m_rule = MRule::Fixed(5);
        let (dataset, _) = simulate(&config).unwrap();
        let fitted = fit(
            &dataset,
            &FitConfig {
                rank: 1,
                eta_grid: vec![1e-2],
                max_iter: 3,
                ..FitConfig::default()
            },
        )
        .unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(format!("n{n}_p{p}")), &(), |b, _| {
            b.iter(|| {
                for s in &dataset.subjects {
                    std::hint::black_box(e_step(s, &fitted.components, fitted.sigma2).unwrap());
                }
            })
        });
    }
    group.finish();
}

fn bench_fit(c: &mut Criterion) {
    let mut group = c.benchmark_group("fit");
    group.sample_size(10);
    let mut config = SimConfig::rank1(40, 80, 1.0, 1.0, 11);
    config.m_rule = MRule::Fixed(5);
    let (dataset, _) = simulate(&config).unwrap();
    group.bench_function("rank1_n40_p80_10iter", |b| {
        b.iter(|| {
            std::hint::black_box(
                fit(
                    &dataset,
                    &FitConfig {
                        rank: 1,
                        eta_grid: vec![1e-2],
                        max_iter: 10,
                        delta_stop: 1e-12,
                        ..FitConfig::default()
                    },
                )
                .unwrap(),
            )
        })
    });
    group.finish();
}

criterion_group!(benches, bench_e_step, bench_fit);
criterion_main!(benches);
