//! Per-weight pruning scores: magnitude, Wanda, and the SparseGPT saliency.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::par;

/// Non-negative per-weight scores, shaped like the scored weight matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix(Matrix);

impl ScoreMatrix {
    /// Wraps a matrix, rejecting negative entries. Finiteness is already
    /// guaranteed by [`Matrix::new`].
    pub fn new(scores: Matrix) -> Result<Self> {
        if let Some(index) = scores.data().iter().position(|&s| s < 0.0) {
            return Err(Error::shape(
                "ScoreMatrix::new",
                format!("negative score at flat index {index}"),
            ));
        }
        Ok(Self(scores))
    }

    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?)
    }

    fn from_checked(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(Matrix::new(rows, cols, data)?)
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn cols(&self) -> usize {
        self.0.cols()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        self.0.row(i)
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.0.get(i, j)
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }
}

/// How the Gram damping term is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum LambdaPolicy {
    /// `fraction × mean_j(Σ_t x[j,t]²) / T`, floored at [`LAMBDA_FLOOR`].
    Relative(f64),
    /// Fixed damping, used as given.
    Absolute(f64),
}

pub const LAMBDA_FLOOR: f64 = 1e-8;

impl Default for LambdaPolicy {
    fn default() -> Self {
        LambdaPolicy::Relative(0.01)
    }
}

impl LambdaPolicy {
    /// Resolves the damping for activations `x` (features × tokens).
    pub fn resolve(&self, x: &Matrix) -> f64 {
        match *self {
            LambdaPolicy::Absolute(v) => v,
            LambdaPolicy::Relative(frac) => {
                let d = x.rows().max(1) as f64;
                let t = x.cols().max(1) as f64;
                let mean_diag = x.frobenius_sq() / d;
                (frac * mean_diag / t).max(LAMBDA_FLOOR)
            }
        }
    }
}

/// Input-activation statistics of one linear layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationStats {
    /// `‖x[j,:]‖₂` for every input feature `j`.
    pub feature_norms: Vec<f32>,
    /// `x xᵀ + λI`, present only when SparseGPT scores were requested.
    pub gram: Option<Matrix>,
    pub token_count: usize,
    pub lambda_used: f64,
}

impl ActivationStats {
    /// Statistics from raw norms, e.g. for synthetic experiments.
    pub fn from_norms(feature_norms: Vec<f32>, token_count: usize) -> Self {
        Self {
            feature_norms,
            gram: None,
            token_count,
            lambda_used: 0.0,
        }
    }
}

/// Gathers norms (and optionally the damped Gram matrix) from activations
/// laid out as features × tokens.
pub fn collect_stats(x: &Matrix, need_gram: bool, policy: LambdaPolicy) -> Result<ActivationStats> {
    if x.cols() == 0 {
        return Err(Error::Empty("activation matrix has no tokens"));
    }
    let feature_norms = linalg::row_l2_norms(x);
    let (gram, lambda_used) = if need_gram {
        let lambda = policy.resolve(x);
        (Some(linalg::gram(x, lambda)), lambda)
    } else {
        (None, 0.0)
    };
    Ok(ActivationStats {
        feature_norms,
        gram,
        token_count: x.cols(),
        lambda_used,
    })
}

/// `|w[i,j]|`
pub fn magnitude_score(w: &Matrix) -> ScoreMatrix {
    let data = w.data().iter().map(|v| v.abs()).collect();
    ScoreMatrix(Matrix::from_raw(w.rows(), w.cols(), data))
}

/// `|w[i,j]| · ‖x[j,:]‖₂`
pub fn wanda_score(w: &Matrix, stats: &ActivationStats) -> Result<ScoreMatrix> {
    let norms = &stats.feature_norms;
    if norms.len() != w.cols() {
        return Err(Error::shape(
            "wanda_score",
            format!("{} feature norms for {} input columns", norms.len(), w.cols()),
        ));
    }
    let mut data = vec![0f32; w.rows() * w.cols()];
    par::for_each_row(&mut data, w.cols(), |i, dst| {
        for ((d, &v), &n) in dst.iter_mut().zip(w.row(i)).zip(norms) {
            *d = v.abs() * n;
        }
    });
    ScoreMatrix::from_checked(w.rows(), w.cols(), data)
}

/// `w[i,j]² / c_j²` where `c_j` is the `j`-th diagonal entry of the Cholesky
/// factor of the inverse damped Gram matrix.
pub fn sparsegpt_score(w: &Matrix, stats: &ActivationStats) -> Result<ScoreMatrix> {
    let gram = stats.gram.as_ref().ok_or_else(|| {
        Error::Config("SparseGPT scores need a Gram matrix in the activation stats".into())
    })?;
    if gram.rows() != w.cols() {
        return Err(Error::shape(
            "sparsegpt_score",
            format!("{}x{} gram for {} input columns", gram.rows(), gram.cols(), w.cols()),
        ));
    }
    let inverse = linalg::spd_inverse(gram)?;
    let chol_diag = linalg::cholesky(&inverse)?.diagonal();
    let denom: Vec<f64> = chol_diag.iter().map(|&c| f64::from(c) * f64::from(c)).collect();
    let mut data = vec![0f32; w.rows() * w.cols()];
    par::for_each_row(&mut data, w.cols(), |i, dst| {
        for ((d, &v), &c2) in dst.iter_mut().zip(w.row(i)).zip(&denom) {
            let v = f64::from(v);
            *d = (v * v / c2) as f32;
        }
    });
    ScoreMatrix::from_checked(w.rows(), w.cols(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rel(a: f32, b: f64) -> f64 {
        (f64::from(a) - b).abs() / b.abs().max(1e-30)
    }

    #[test]
    fn magnitude_cases() {
        let w = Matrix::from_rows(&[[-2.0, 1.0]]).unwrap();
        assert_eq!(magnitude_score(&w).row(0), &[2.0, 1.0]);
        let z = Matrix::zeros(3, 3);
        assert!(magnitude_score(&z).as_matrix().data().iter().all(|&s| s == 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Matrix::random_normal(4, 4, 1.0, &mut rng);
        let s = magnitude_score(&w);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(s.get(i, j), w.get(i, j).abs());
            }
        }
    }

    #[test]
    fn stats_without_gram() {
        let st = collect_stats(&Matrix::identity(2), false, LambdaPolicy::default()).unwrap();
        assert_eq!(st.feature_norms, vec![1.0, 1.0]);
        assert!(st.gram.is_none());
        assert_eq!(st.token_count, 2);
    }

    #[test]
    fn stats_relative_lambda_arithmetic() {
        // mean_j Σ_t x² = 1, T = 2 → λ = 0.01 · 1 / 2 = 0.005
        let st = collect_stats(&Matrix::identity(2), true, LambdaPolicy::default()).unwrap();
        assert!((st.lambda_used - 0.005).abs() < 1e-15);
        let g = st.gram.unwrap();
        assert_eq!(g.data(), &[1.005, 0.0, 0.0, 1.005]);
    }

    #[test]
    fn stats_lambda_floor() {
        let st = collect_stats(&Matrix::zeros(3, 4), true, LambdaPolicy::default()).unwrap();
        assert_eq!(st.lambda_used, LAMBDA_FLOOR);
        assert!(collect_stats(&Matrix::zeros(3, 0), false, LambdaPolicy::default()).is_err());
    }

    #[test]
    fn stats_norms_match_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Matrix::random_normal(8, 32, 1.0, &mut rng);
        let st = collect_stats(&x, false, LambdaPolicy::default()).unwrap();
        for j in 0..8 {
            let oracle = x.row(j).iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
            assert!(rel(st.feature_norms[j], oracle) < 1e-6);
        }
    }

    #[test]
    fn wanda_cases() {
        let w = Matrix::from_rows(&[[1.0, -2.0], [3.0, 0.5]]).unwrap();
        let st = ActivationStats::from_norms(vec![2.0, 1.0], 4);
        let s = wanda_score(&w, &st).unwrap();
        assert_eq!(s.as_matrix().data(), &[2.0, 2.0, 6.0, 0.5]);

        let unit = ActivationStats::from_norms(vec![1.0, 1.0], 4);
        assert_eq!(wanda_score(&w, &unit).unwrap(), magnitude_score(&w));

        let bad = ActivationStats::from_norms(vec![1.0], 4);
        assert!(matches!(wanda_score(&w, &bad), Err(Error::Shape { .. })));
    }

    #[test]
    fn sparsegpt_identity_gram_is_square() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = Matrix::random_normal(5, 6, 1.0, &mut rng);
        let st = ActivationStats {
            feature_norms: vec![1.0; 6],
            gram: Some(Matrix::identity(6)),
            token_count: 6,
            lambda_used: 0.0,
        };
        let s = sparsegpt_score(&w, &st).unwrap();
        for i in 0..5 {
            for j in 0..6 {
                let e = f64::from(w.get(i, j)).powi(2);
                assert!((f64::from(s.get(i, j)) - e).abs() <= 1e-6 * e.max(1e-30));
            }
        }
    }

    #[test]
    fn sparsegpt_diagonal_gram_hand_case() {
        let w = Matrix::from_rows(&[[1.0, 2.0], [-3.0, 0.5]]).unwrap();
        let st = ActivationStats {
            feature_norms: vec![2.0, 1.0],
            gram: Some(Matrix::diag(&[4.0, 1.0])),
            token_count: 1,
            lambda_used: 0.0,
        };
        let s = sparsegpt_score(&w, &st).unwrap();
        let expected = [4.0, 4.0, 36.0, 0.25];
        for (g, e) in s.as_matrix().data().iter().zip(expected) {
            assert!(rel(*g, e) < 1e-6, "{g} vs {e}");
        }
    }

    #[test]
    fn sparsegpt_requires_gram() {
        let w = Matrix::zeros(2, 2);
        let st = ActivationStats::from_norms(vec![1.0, 1.0], 1);
        assert!(matches!(sparsegpt_score(&w, &st), Err(Error::Config(_))));
        let st = ActivationStats {
            gram: Some(Matrix::zeros(2, 2)),
            ..st
        };
        assert!(matches!(
            sparsegpt_score(&w, &st),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }
}
