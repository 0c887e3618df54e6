//! Dense and sparse products on the default pool versus a one-thread pool.
//! Built without the `parallel` feature only the sequential path exists and
//! both variants measure the same code.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mumoe::linalg::{gram, matmul, Matrix};
use mumoe::selection::{select, SelectionParams, Strategy, TieMode};
use mumoe::scoring::{collect_stats, wanda_score, LambdaPolicy};
use mumoe::sparse::{compress, sparse_matmul};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[cfg(feature = "parallel")]
struct SinglePool(rayon::ThreadPool);

#[cfg(feature = "parallel")]
impl SinglePool {
    fn new() -> Self {
        Self(rayon::ThreadPoolBuilder::new().num_threads(1).build().expect("thread pool"))
    }

    fn run(&self, f: impl FnOnce() + Send) {
        self.0.install(f)
    }
}

#[cfg(not(feature = "parallel"))]
struct SinglePool;

#[cfg(not(feature = "parallel"))]
impl SinglePool {
    fn new() -> Self {
        Self
    }

    fn run(&self, f: impl FnOnce() + Send) {
        f()
    }
}

fn kernels(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (d, d_prime, t) = (512, 512, 128);
    let w = Matrix::random_normal(d_prime, d, 0.05, &mut rng);
    let x = Matrix::random_normal(d, t, 1.0, &mut rng);
    let stats = collect_stats(&x, false, LambdaPolicy::default()).unwrap();
    let scores = wanda_score(&w, &stats).unwrap();

    let pool = SinglePool::new();
    let mut group = c.benchmark_group("kernels");
    group.sample_size(20);
    for (variant, single) in [("par", false), ("seq", true)] {
        let time = |f: &mut (dyn FnMut() + Send)| if single { pool.run(f) } else { f() };
        group.bench_function(BenchmarkId::new("matmul", variant), |b| {
            b.iter(|| time(&mut || drop(matmul(&w, &x).unwrap())))
        });
        group.bench_function(BenchmarkId::new("gram", variant), |b| {
            b.iter(|| time(&mut || drop(gram(&x, 1e-2))))
        });
        for &rho in &[0.25, 0.5] {
            let p = SelectionParams::new(rho, d, Strategy::KthThreshold, TieMode::Canonical).unwrap();
            let ws = compress(&w, &select(&scores, &p)).unwrap();
            group.bench_function(BenchmarkId::new(format!("sparse_matmul/rho={rho}"), variant), |b| {
                b.iter(|| time(&mut || drop(sparse_matmul(&ws, &x).unwrap())))
            });
        }
    }
    group.finish();
}

criterion_group!(benches, kernels);
criterion_main!(benches);
