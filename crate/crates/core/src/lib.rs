//! Test-time activation-aware pruning of transformer linear layers.
//!
//! Each scalar weight acts as a single-parameter expert: for every prompt the
//! prefill activations pick, row by row, which weights of each linear layer
//! stay active. The crate provides the scoring rules (magnitude, Wanda,
//! SparseGPT saliency), three equivalent row-wise top-k kernels, a fixed-k
//! row-sparse format with a reduced-cost product, a small decoder-only
//! transformer to run it in, offline and online pruning drivers, and
//! analytical FLOP/MAC accounting.

pub mod bench;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod par;
pub mod pruner;
pub mod scoring;
pub mod selection;
pub mod sparse;

pub use error::{Error, Result};
pub use linalg::{LowerTriangular, Matrix};
pub use scoring::{ActivationStats, LambdaPolicy, ScoreMatrix};
pub use selection::{SelectionParams, SparsityMask, Strategy, TieMode};
pub use sparse::RowSparseMatrix;
