//! Timing sweep of the row-wise selection strategies.
//!
//! Each cell (d, d′, ρ) draws one random score matrix and hands the same
//! matrix to every strategy. Before anything is timed the canonical masks of
//! all strategies must agree; cells that fail this gate report no timing.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::hint::black_box;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scoring::ScoreMatrix;
use crate::selection::{self, SelectionParams, SparsityMask, Strategy, TieMode};

/// A strategy timed either on one thread or row-parallel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BenchStrategy {
    pub strategy: Strategy,
    pub parallel: bool,
}

impl BenchStrategy {
    pub fn sequential(strategy: Strategy) -> Self {
        Self {
            strategy,
            parallel: false,
        }
    }

    fn run(&self, scores: &ScoreMatrix, p: &SelectionParams) -> SparsityMask {
        let p = SelectionParams {
            strategy: self.strategy,
            ..*p
        };
        if self.parallel {
            selection::select(scores, &p)
        } else {
            selection::select_sequential(scores, &p)
        }
    }
}

impl fmt::Display for BenchStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.strategy, if self.parallel { "-par" } else { "" })
    }
}

impl FromStr for BenchStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, parallel) = match s.strip_suffix("-par") {
            Some(n) => (n, true),
            None => (s, false),
        };
        Ok(Self {
            strategy: name.parse()?,
            parallel,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSpec {
    pub d_values: Vec<usize>,
    pub d_prime_values: Vec<usize>,
    pub rhos: Vec<f64>,
    pub strategies: Vec<BenchStrategy>,
    pub repetitions: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            d_values: vec![256, 1024, 4096],
            d_prime_values: vec![256],
            rhos: vec![0.25, 0.5, 0.75],
            strategies: Strategy::ALL.into_iter().map(BenchStrategy::sequential).collect(),
            repetitions: 5,
            warmup: 1,
            seed: 0,
        }
    }
}

impl BenchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.repetitions < 3 {
            return Err(Error::Config(format!(
                "need at least 3 repetitions, got {}",
                self.repetitions
            )));
        }
        if self.strategies.is_empty() {
            return Err(Error::Config("strategy list is empty".into()));
        }
        if self.d_values.is_empty() || self.d_prime_values.is_empty() || self.rhos.is_empty() {
            return Err(Error::Config("every sweep list needs at least one value".into()));
        }
        if self.d_values.iter().chain(&self.d_prime_values).any(|&d| d == 0) {
            return Err(Error::Config("dimensions must be positive".into()));
        }
        if let Some(r) = self.rhos.iter().find(|&&r| !(r > 0.0 && r <= 1.0)) {
            return Err(Error::Config(format!("rho must lie in (0, 1], got {r}")));
        }
        Ok(())
    }

    pub fn cell_count(&self) -> usize {
        self.d_values.len() * self.d_prime_values.len() * self.rhos.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub strategy: String,
    pub d: usize,
    pub d_prime: usize,
    pub rho: f64,
    /// Median of three group means, in nanoseconds. `None` if the cell
    /// failed the mask-equivalence gate.
    pub mean_ns: Option<f64>,
    pub std_ns: Option<f64>,
    pub reps: usize,
    pub gate_passed: bool,
}

impl BenchRow {
    pub const CSV_HEADER: &'static str = "strategy,d,d_prime,rho,mean_ns,std_ns,reps,gate";

    pub fn to_csv(&self) -> String {
        let f = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.1}"));
        format!(
            "{},{},{},{},{},{},{},{}",
            self.strategy,
            self.d,
            self.d_prime,
            self.rho,
            f(self.mean_ns),
            f(self.std_ns),
            self.reps,
            if self.gate_passed { "pass" } else { "fail" }
        )
    }

    pub fn write_csv(rows: &[BenchRow]) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in rows {
            let _ = writeln!(out, "{}", r.to_csv());
        }
        out
    }
}

/// Scores for one cell. Depends only on the seed and the cell's dimensions.
pub fn cell_scores(seed: u64, d: usize, d_prime: usize, rho: f64) -> ScoreMatrix {
    let cell_seed = seed
        ^ (d as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (d_prime as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ rho.to_bits().rotate_left(17);
    let mut rng = ChaCha8Rng::seed_from_u64(cell_seed);
    let m = Matrix::from_fn(d_prime, d, |_, _| rng.gen::<f32>());
    ScoreMatrix::new(m).expect("uniform scores are valid")
}

/// Checks that every strategy yields the same canonical mask.
pub fn equivalence_gate(scores: &ScoreMatrix, p: &SelectionParams, strategies: &[BenchStrategy]) -> bool {
    let canonical = SelectionParams {
        tie_mode: TieMode::Canonical,
        ..*p
    };
    let reference = selection::select_sort(scores, &canonical);
    strategies.iter().all(|s| s.run(scores, &canonical) == reference)
}

fn median_of_means(samples: &[f64]) -> f64 {
    let groups = 3.min(samples.len());
    let size = samples.len() / groups;
    let mut means: Vec<f64> = (0..groups)
        .map(|g| {
            let end = if g + 1 == groups { samples.len() } else { (g + 1) * size };
            let part = &samples[g * size..end];
            part.iter().sum::<f64>() / part.len() as f64
        })
        .collect();
    means.sort_by(f64::total_cmp);
    means[groups / 2]
}

fn std_dev(samples: &[f64]) -> f64 {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    (samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt()
}

/// Runs the sweep. Row order: d, d′, ρ, then strategies as listed.
pub fn run_bench(spec: &BenchSpec) -> Result<Vec<BenchRow>> {
    spec.validate()?;
    let mut rows = Vec::with_capacity(spec.cell_count() * spec.strategies.len());
    for &d in &spec.d_values {
        for &d_prime in &spec.d_prime_values {
            for &rho in &spec.rhos {
                let scores = cell_scores(spec.seed, d, d_prime, rho);
                let params = SelectionParams::new(rho, d, Strategy::Sort, TieMode::Canonical)?;
                let gate = equivalence_gate(&scores, &params, &spec.strategies);
                for s in &spec.strategies {
                    let (mean_ns, std_ns) = if gate {
                        for _ in 0..spec.warmup {
                            black_box(s.run(black_box(&scores), &params));
                        }
                        let samples: Vec<f64> = (0..spec.repetitions)
                            .map(|_| {
                                let start = Instant::now();
                                black_box(s.run(black_box(&scores), &params));
                                start.elapsed().as_nanos() as f64
                            })
                            .collect();
                        (Some(median_of_means(&samples)), Some(std_dev(&samples)))
                    } else {
                        (None, None)
                    };
                    rows.push(BenchRow {
                        strategy: s.to_string(),
                        d,
                        d_prime,
                        rho,
                        mean_ns,
                        std_ns,
                        reps: spec.repetitions,
                        gate_passed: gate,
                    });
                }
            }
        }
    }
    Ok(rows)
}

/// Spread of one strategy's timing across ρ at fixed (d, d′).
#[derive(Clone, Debug, PartialEq)]
pub struct RhoSpread {
    pub strategy: String,
    pub d: usize,
    pub d_prime: usize,
    pub min_ns: f64,
    pub max_ns: f64,
}

impl RhoSpread {
    /// `(max − min) / min`.
    pub fn relative(&self) -> f64 {
        (self.max_ns - self.min_ns) / self.min_ns
    }
}

pub fn rho_spread(rows: &[BenchRow], strategy: &str) -> Vec<RhoSpread> {
    let mut cells: BTreeMap<(usize, usize), (f64, f64)> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.strategy == strategy) {
        if let Some(t) = r.mean_ns {
            let e = cells.entry((r.d, r.d_prime)).or_insert((f64::INFINITY, 0.0));
            e.0 = e.0.min(t);
            e.1 = e.1.max(t);
        }
    }
    cells
        .into_iter()
        .map(|((d, d_prime), (min_ns, max_ns))| RhoSpread {
            strategy: strategy.to_owned(),
            d,
            d_prime,
            min_ns,
            max_ns,
        })
        .collect()
}
