//! Analytical FLOP and MAC counts for dense and per-prompt pruned inference.
//!
//! Conventions: a multiply-add is 1 MAC and 2 FLOPs; a lone multiply is 1 MAC
//! and 1 FLOP; a comparison is 1 FLOP and 0 MACs. All counts are integers.

use std::fmt::Write as _;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::model::{LinearKind, ModelConfig};
use crate::selection::active_count;

/// `ρ + 3/T + 1/d′`: cost of online pruning plus the sparse product relative
/// to the dense product of one `d′ × d` layer over `T` tokens.
pub fn complexity_ratio(rho: f64, tokens: usize, d_out: usize) -> f64 {
    rho + 3.0 / tokens as f64 + 1.0 / d_out as f64
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cost {
    pub flops: u64,
    pub macs: u64,
}

impl Cost {
    pub const ZERO: Cost = Cost { flops: 0, macs: 0 };

    pub fn multiply_adds(n: u64) -> Self {
        Self { flops: 2 * n, macs: n }
    }

    pub fn multiplies(n: u64) -> Self {
        Self { flops: n, macs: n }
    }

    pub fn flops_only(n: u64) -> Self {
        Self { flops: n, macs: 0 }
    }
}

impl Add for Cost {
    type Output = Cost;

    fn add(self, o: Cost) -> Cost {
        Cost {
            flops: self.flops + o.flops,
            macs: self.macs + o.macs,
        }
    }
}

impl AddAssign for Cost {
    fn add_assign(&mut self, o: Cost) {
        *self = *self + o;
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Breakdown {
    pub dense_linear: Cost,
    pub sparse_linear: Cost,
    pub prune_norm: Cost,
    pub prune_score: Cost,
    pub prune_select: Cost,
    pub prune_compare: Cost,
    pub attention: Cost,
    pub other: Cost,
}

impl Breakdown {
    pub fn total(&self) -> Cost {
        self.dense_linear
            + self.sparse_linear
            + self.prune_overhead()
            + self.attention
            + self.other
    }

    pub fn prune_overhead(&self) -> Cost {
        self.prune_norm + self.prune_score + self.prune_select + self.prune_compare
    }

    fn entries(&self) -> [(&'static str, Cost); 8] {
        [
            ("dense_linear", self.dense_linear),
            ("sparse_linear", self.sparse_linear),
            ("prune_norm", self.prune_norm),
            ("prune_score", self.prune_score),
            ("prune_select", self.prune_select),
            ("prune_compare", self.prune_compare),
            ("attention", self.attention),
            ("other", self.other),
        ]
    }
}

impl Add for Breakdown {
    type Output = Breakdown;

    fn add(self, o: Breakdown) -> Breakdown {
        Breakdown {
            dense_linear: self.dense_linear + o.dense_linear,
            sparse_linear: self.sparse_linear + o.sparse_linear,
            prune_norm: self.prune_norm + o.prune_norm,
            prune_score: self.prune_score + o.prune_score,
            prune_select: self.prune_select + o.prune_select,
            prune_compare: self.prune_compare + o.prune_compare,
            attention: self.attention + o.attention,
            other: self.other + o.other,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostMode {
    Dense,
    /// Per-prompt pruning: selection overhead plus sparse products.
    MuMoe,
    /// Precomputed masks: sparse products only.
    Static,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub breakdown: Breakdown,
    pub total: Cost,
}

impl LayerCost {
    fn new(name: impl Into<String>, breakdown: Breakdown) -> Self {
        Self {
            name: name.into(),
            total: breakdown.total(),
            breakdown,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    pub mode: CostMode,
    pub rho: f64,
    pub tokens: usize,
    pub layers: Vec<LayerCost>,
    pub breakdown: Breakdown,
    pub total: Cost,
}

impl FlopReport {
    /// MACs of the prunable linear layers, overhead included; the head,
    /// attention products and elementwise work are left out.
    pub fn pruned_linear_macs(&self) -> u64 {
        self.layers
            .iter()
            .filter(|l| l.name.starts_with("layers."))
            .map(|l| {
                let b = &l.breakdown;
                b.sparse_linear.macs + b.prune_overhead().macs + b.dense_linear.macs
            })
            .sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `layer,category,flops,macs` rows, one per breakdown entry, plus a
    /// `total` row per layer and a final `all` section.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,category,flops,macs\n");
        let mut section = |name: &str, b: &Breakdown, total: Cost| {
            for (cat, c) in b.entries() {
                let _ = writeln!(out, "{name},{cat},{},{}", c.flops, c.macs);
            }
            let _ = writeln!(out, "{name},total,{},{}", total.flops, total.macs);
        };
        for l in &self.layers {
            section(&l.name, &l.breakdown, l.total);
        }
        section("all", &self.breakdown, self.total);
        out
    }
}

fn linear_cost(d_in: usize, d_out: usize, rho: f64, tokens: usize, mode: CostMode) -> Breakdown {
    let (d, dp, t) = (d_in as u64, d_out as u64, tokens as u64);
    match mode {
        CostMode::Dense => Breakdown {
            dense_linear: Cost::multiply_adds(d * dp * t),
            ..Breakdown::default()
        },
        CostMode::Static => Breakdown {
            sparse_linear: Cost::multiply_adds(active_count(rho, d_in) as u64 * dp * t),
            ..Breakdown::default()
        },
        CostMode::MuMoe => {
            let k = active_count(rho, d_in) as u64;
            Breakdown {
                sparse_linear: Cost::multiply_adds(k * dp * t),
                prune_norm: Cost::multiply_adds(d * t),
                prune_score: Cost::multiplies(d * dp),
                prune_select: Cost::flops_only(d * dp),
                prune_compare: Cost::flops_only(d * dp),
                ..Breakdown::default()
            }
        }
    }
}

/// Per-token elementwise FLOPs of a layer norm: mean, variance, normalize,
/// scale, shift.
const LAYER_NORM_FLOPS: u64 = 5;

/// Cost of one forward pass over `tokens` tokens. Attention products and
/// elementwise work are identical in both modes; only the six linear layers
/// of each block change.
pub fn count_costs(config: &ModelConfig, rho: f64, tokens: usize, mode: CostMode) -> FlopReport {
    let (d, di, h, v) = (config.hidden, config.ffn_dim, config.n_heads, config.vocab);
    let t = tokens as u64;
    let mut layers = Vec::new();

    layers.push(LayerCost::new(
        "embedding",
        Breakdown {
            other: Cost::flops_only(d as u64 * t),
            ..Breakdown::default()
        },
    ));
    for b in 0..config.n_layers {
        let mut block = Breakdown::default();
        for kind in LinearKind::ALL {
            let (d_in, d_out) = match kind {
                LinearKind::Up => (d, di),
                LinearKind::Down => (di, d),
                _ => (d, d),
            };
            block = block + linear_cost(d_in, d_out, rho, tokens, mode);
        }
        // QKᵀ and attention-weighted values over all heads.
        block.attention = Cost::multiply_adds(2 * t * t * d as u64);
        block.other = Cost::flops_only(
            2 * LAYER_NORM_FLOPS * d as u64 * t  // two norms
                + 3 * h as u64 * t * t          // softmax: exp, sum, divide
                + 2 * d as u64 * t              // residual adds
                + di as u64 * t,                // ReLU
        );
        layers.push(LayerCost::new(format!("layers.{b}"), block));
    }
    layers.push(LayerCost::new(
        "final_norm",
        Breakdown {
            other: Cost::flops_only(LAYER_NORM_FLOPS * d as u64 * t),
            ..Breakdown::default()
        },
    ));
    layers.push(LayerCost::new(
        "head",
        Breakdown {
            dense_linear: Cost::multiply_adds(v as u64 * d as u64 * t),
            ..Breakdown::default()
        },
    ));

    let breakdown = layers
        .iter()
        .fold(Breakdown::default(), |acc, l| acc + l.breakdown);
    FlopReport {
        mode,
        rho,
        tokens,
        total: breakdown.total(),
        layers,
        breakdown,
    }
}

/// `MACs(μ-MoE at ρ) / MACs(dense)` for the whole forward pass.
pub fn macs_ratio(config: &ModelConfig, rho: f64, tokens: usize) -> f64 {
    let sparse = count_costs(config, rho, tokens, CostMode::MuMoe).total.macs;
    let dense = count_costs(config, 1.0, tokens, CostMode::Dense).total.macs;
    sparse as f64 / dense as f64
}
