//! Benchmarks for the hot path of one outer iteration: bundle sampling,
//! subproblem assembly, and the QP solve, plus a full adaptive solve.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use tbm_bench::stepped_window;
use tbm_core::bundle::build_bundles;
use tbm_core::orchestrator::{tbm_solve, SolveBudget};
use tbm_core::subproblem::{assemble, SolveSettings};
use tbm_core::AdaptConfig;

fn bench_bundle_build(c: &mut Criterion) {
    let mut group = c.benchmark_group("bundle_build");
    for n in [2usize, 6] {
        let (problem, _, z) = stepped_window(n);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| build_bundles(black_box(&z), 0.5, &problem, 7, true).unwrap());
        });
    }
    group.finish();
}

fn bench_subproblem_solve(c: &mut Criterion) {
    let mut group = c.benchmark_group("subproblem_solve");
    group.sample_size(10);
    for n in [2usize, 6] {
        let (problem, x0, z) = stepped_window(n);
        let bundles = build_bundles(&z, 0.5, &problem, 7, true).unwrap();
        let sp = assemble(&bundles, 10.0, &[100.0, 10.0], &x0).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| sp.solve(black_box(SolveSettings::default())).unwrap());
        });
    }
    group.finish();
}

fn bench_outer_solve(c: &mut Criterion) {
    let mut group = c.benchmark_group("outer_solve");
    group.sample_size(10);
    let (problem, x0, z) = stepped_window(6);
    let config = AdaptConfig::default();
    let budget = SolveBudget { max_iterations: 5 };
    group.bench_function("six_zone_five_iterations", |b| {
        b.iter(|| {
            tbm_solve(
                &problem,
                &x0,
                black_box(z.clone()),
                &config,
                budget,
                7,
                true,
                None,
                None,
            )
            .unwrap()
        });
    });
    group.finish();
}

criterion_group!(
    benches,
    bench_bundle_build,
    bench_subproblem_solve,
    bench_outer_solve
);
criterion_main!(benches);
