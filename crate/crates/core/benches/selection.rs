//! Row-wise selection: every strategy, single-threaded versus row-parallel.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mumoe::bench::cell_scores;
use mumoe::selection::{select, select_sequential, SelectionParams, Strategy, TieMode};

fn strategies(c: &mut Criterion) {
    let mut group = c.benchmark_group("select");
    group.sample_size(20);
    for &d in &[256usize, 1024, 4096] {
        let d_prime = 256;
        for &rho in &[0.25, 0.5, 0.75] {
            let scores = cell_scores(0, d, d_prime, rho);
            for strategy in Strategy::ALL {
                let p = SelectionParams::new(rho, d, strategy, TieMode::Canonical).unwrap();
                let label = format!("d={d}/rho={rho}");
                group.bench_with_input(
                    BenchmarkId::new(format!("{strategy}"), &label),
                    &scores,
                    |b, s| b.iter(|| select_sequential(s, &p)),
                );
                group.bench_with_input(
                    BenchmarkId::new(format!("{strategy}-par"), &label),
                    &scores,
                    |b, s| b.iter(|| select(s, &p)),
                );
            }
        }
    }
    group.finish();
}

criterion_group!(benches, strategies);
criterion_main!(benches);
