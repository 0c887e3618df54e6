//! Offline (calibration set) and online (per-prompt) pruning over the linear
//! layers of a [`Model`].
//!
//! Both modes run the same per-layer pipeline, front to back, inside a
//! forward pass: activation statistics of the layer's actual input, scores,
//! row-wise selection, compression, and the compressed product feeding the
//! next layer. Offline mode keeps the statistics in a [`CalibrationRecord`]
//! and installs the resulting masks for every later prompt; online mode
//! derives fresh masks from each prompt's prefill. The dense weights are
//! never modified.

pub mod shift;

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::model::{window_nlls, LayerId, LinearHook, LinearKind, Model, WindowNll};
use crate::scoring::{self, ActivationStats, LambdaPolicy, ScoreMatrix};
use crate::selection::{self, SelectionParams, SparsityMask, Strategy, TieMode};
use crate::sparse::{self, RowSparseMatrix};

pub use shift::{
    random_rotation, shift_experiment, summarize_shift, synthetic_shift_trial, ShiftRow,
    ShiftSpec, ShiftSummary, SyntheticDomain, SyntheticShift, SyntheticTrial,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Magnitude,
    Wanda,
    SparsegptScore,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Magnitude => "magnitude",
            Method::Wanda => "wanda",
            Method::SparsegptScore => "sparsegpt",
        }
    }

    fn needs_gram(self) -> bool {
        self == Method::SparsegptScore
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "magnitude" => Ok(Method::Magnitude),
            "wanda" => Ok(Method::Wanda),
            "sparsegpt" | "sparsegpt_score" => Ok(Method::SparsegptScore),
            other => Err(Error::Config(format!("unknown pruning method {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Offline,
    Online,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Offline => "offline",
            Mode::Online => "online",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "offline" => Ok(Mode::Offline),
            "online" => Ok(Mode::Online),
            other => Err(Error::Config(format!("unknown pruning mode {other:?}"))),
        }
    }
}

/// Which linear layers get pruned. Embeddings and the output head are never
/// candidates.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerFilter {
    pub kinds: Vec<LinearKind>,
    /// `None` selects every block.
    pub blocks: Option<Vec<usize>>,
}

impl Default for LayerFilter {
    fn default() -> Self {
        Self {
            kinds: LinearKind::ALL.to_vec(),
            blocks: None,
        }
    }
}

impl LayerFilter {
    pub fn includes(&self, id: LayerId) -> bool {
        self.kinds.contains(&id.kind) && self.blocks.as_ref().is_none_or(|b| b.contains(&id.block))
    }

    /// Filtered layers of `model` in forward order.
    pub fn layers(&self, model: &Model) -> Vec<LayerId> {
        model.linear_ids().into_iter().filter(|&id| self.includes(id)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub rho: f64,
    pub method: Method,
    pub strategy: Strategy,
    pub tie_mode: TieMode,
    pub mode: Mode,
    pub lambda_policy: LambdaPolicy,
    pub layer_filter: LayerFilter,
    /// Permit SparseGPT scores in online mode (cubic cost per prompt).
    pub allow_online_sparsegpt: bool,
    /// Recompute online masks at every decode step instead of reusing the
    /// prefill masks.
    pub refresh_per_token: bool,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            rho: 0.5,
            method: Method::Wanda,
            strategy: Strategy::KthThreshold,
            tie_mode: TieMode::Canonical,
            mode: Mode::Online,
            lambda_policy: LambdaPolicy::default(),
            layer_filter: LayerFilter::default(),
            allow_online_sparsegpt: false,
            refresh_per_token: false,
        }
    }
}

impl PruneConfig {
    pub fn online(rho: f64, method: Method) -> Self {
        Self {
            rho,
            method,
            mode: Mode::Online,
            ..Self::default()
        }
    }

    pub fn offline(rho: f64, method: Method) -> Self {
        Self {
            rho,
            method,
            mode: Mode::Offline,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::Config(format!("rho must lie in (0, 1], got {}", self.rho)));
        }
        if self.mode == Mode::Online
            && self.method == Method::SparsegptScore
            && !self.allow_online_sparsegpt
        {
            return Err(Error::Config(
                "online pruning with SparseGPT scores is disabled (cubic cost per prompt); \
                 set allow_online_sparsegpt to force it"
                    .into(),
            ));
        }
        match self.lambda_policy {
            LambdaPolicy::Relative(v) | LambdaPolicy::Absolute(v) if v.is_nan() || v < 0.0 => {
                Err(Error::Config(format!("damping must be non-negative, got {v}")))
            }
            _ => Ok(()),
        }
    }
}

/// Per-layer activation statistics from one calibration pass.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationRecord {
    pub source: String,
    pub token_count: usize,
    pub layers: BTreeMap<LayerId, ActivationStats>,
}

/// Mask and compressed weights of one pruned layer.
#[derive(Clone, Debug, PartialEq)]
pub struct PrunedLayer {
    pub mask: SparsityMask,
    pub weights: RowSparseMatrix,
}

/// Approximation loss `‖(W − Ŵ)X‖²` of one layer on the input it saw.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LayerLoss {
    pub id: LayerId,
    pub loss: f64,
    pub tokens: usize,
}

/// Scores one weight matrix and builds its mask and compressed form.
pub fn build_layer(w: &Matrix, stats: Option<&ActivationStats>, cfg: &PruneConfig) -> Result<PrunedLayer> {
    let scores: ScoreMatrix = match cfg.method {
        Method::Magnitude => scoring::magnitude_score(w),
        Method::Wanda => scoring::wanda_score(w, require_stats(stats)?)?,
        Method::SparsegptScore => scoring::sparsegpt_score(w, require_stats(stats)?)?,
    };
    let params = SelectionParams::new(cfg.rho, w.cols(), cfg.strategy, cfg.tie_mode)?;
    let mask = selection::select(&scores, &params);
    let weights = sparse::compress(w, &mask)?;
    Ok(PrunedLayer { mask, weights })
}

fn require_stats(stats: Option<&ActivationStats>) -> Result<&ActivationStats> {
    stats.ok_or(Error::Config("activation-aware scores need activation statistics".into()))
}

/// Prunes each filtered layer from its live input, then applies the
/// compressed layer.
struct PruningHook<'c> {
    cfg: &'c PruneConfig,
    layers: BTreeMap<LayerId, PrunedLayer>,
    stats: Option<BTreeMap<LayerId, ActivationStats>>,
    losses: Option<Vec<LayerLoss>>,
}

impl<'c> PruningHook<'c> {
    fn new(cfg: &'c PruneConfig, keep_stats: bool, track_loss: bool) -> Self {
        Self {
            cfg,
            layers: BTreeMap::new(),
            stats: keep_stats.then(BTreeMap::new),
            losses: track_loss.then(Vec::new),
        }
    }

    fn prune(&mut self, id: LayerId, weight: &Matrix, input: &Matrix) -> Result<Matrix> {
        let stats = scoring::collect_stats(input, self.cfg.method.needs_gram(), self.cfg.lambda_policy)?;
        let layer = build_layer(weight, Some(&stats), self.cfg)?;
        let out = sparse::sparse_matmul(&layer.weights, input)?;
        if let Some(losses) = &mut self.losses {
            losses.push(LayerLoss {
                id,
                loss: sparse::approx_loss(weight, &layer.weights, input)?,
                tokens: input.cols(),
            });
        }
        if let Some(all) = &mut self.stats {
            all.insert(id, stats);
        }
        self.layers.insert(id, layer);
        Ok(out)
    }
}

impl LinearHook for PruningHook<'_> {
    fn apply(&mut self, id: LayerId, weight: &Matrix, input: &Matrix) -> Result<Matrix> {
        if !self.cfg.layer_filter.includes(id) {
            return linalg::matmul(weight, input);
        }
        self.prune(id, weight, input)
            .map_err(|e| e.in_layer(id.to_string()))
    }
}

/// Applies installed masks; layers without one run dense.
struct StaticHook<'a> {
    layers: &'a BTreeMap<LayerId, PrunedLayer>,
    losses: Option<Vec<LayerLoss>>,
}

impl LinearHook for StaticHook<'_> {
    fn apply(&mut self, id: LayerId, weight: &Matrix, input: &Matrix) -> Result<Matrix> {
        match self.layers.get(&id) {
            None => linalg::matmul(weight, input),
            Some(layer) => {
                if let Some(losses) = &mut self.losses {
                    losses.push(LayerLoss {
                        id,
                        loss: sparse::approx_loss(weight, &layer.weights, input)?,
                        tokens: input.cols(),
                    });
                }
                sparse::sparse_matmul(&layer.weights, input)
            }
        }
    }
}

/// A view of a shared dense model with per-layer compressed weights.
#[derive(Clone, Debug)]
pub struct PrunedModel<'m> {
    model: &'m Model,
    layers: BTreeMap<LayerId, PrunedLayer>,
}

impl<'m> PrunedModel<'m> {
    pub fn model(&self) -> &'m Model {
        self.model
    }

    pub fn layers(&self) -> &BTreeMap<LayerId, PrunedLayer> {
        &self.layers
    }

    pub fn mask(&self, id: LayerId) -> Option<&SparsityMask> {
        self.layers.get(&id).map(|l| &l.mask)
    }

    pub fn masks(&self) -> BTreeMap<LayerId, SparsityMask> {
        self.layers.iter().map(|(id, l)| (*id, l.mask.clone())).collect()
    }

    /// Hash over every installed mask.
    pub fn mask_fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (id, layer) in &self.layers {
            id.hash(&mut h);
            layer.mask.hash(&mut h);
        }
        h.finish()
    }

    pub fn forward(&self, tokens: &[u32]) -> Result<Matrix> {
        let mut hook = StaticHook {
            layers: &self.layers,
            losses: None,
        };
        self.model.forward_with(tokens, &mut hook)
    }

    /// Logits plus each pruned layer's approximation loss on its input.
    pub fn forward_tracked(&self, tokens: &[u32]) -> Result<(Matrix, Vec<LayerLoss>)> {
        let mut hook = StaticHook {
            layers: &self.layers,
            losses: Some(Vec::new()),
        };
        let logits = self.model.forward_with(tokens, &mut hook)?;
        Ok((logits, hook.losses.unwrap_or_default()))
    }
}

/// Runs calibration `tokens` (split into `max_seq` chunks processed as one
/// batch) through the model, pruning front to back as configured, and
/// records every filtered layer's input statistics.
pub fn calibrate_offline(
    model: &Model,
    tokens: &[u32],
    cfg: &PruneConfig,
    source: &str,
) -> Result<CalibrationRecord> {
    cfg.validate()?;
    if tokens.is_empty() {
        return Err(Error::Empty("calibration tokens"));
    }
    let chunks: Vec<&[u32]> = tokens.chunks(model.config.max_seq).collect();
    let mut hook = PruningHook::new(cfg, true, false);
    model.forward_batch(&chunks, &mut hook)?;
    Ok(CalibrationRecord {
        source: source.to_owned(),
        token_count: tokens.len(),
        layers: hook.stats.unwrap_or_default(),
    })
}

/// Builds static masks for every filtered layer from recorded statistics.
pub fn prune_offline<'m>(
    model: &'m Model,
    record: &CalibrationRecord,
    cfg: &PruneConfig,
) -> Result<PrunedModel<'m>> {
    cfg.validate()?;
    let mut layers = BTreeMap::new();
    for id in cfg.layer_filter.layers(model) {
        let stats = record.layers.get(&id);
        if stats.is_none() && cfg.method != Method::Magnitude {
            return Err(Error::MissingStats(id.to_string()));
        }
        let layer = build_layer(model.linear(id), stats, cfg).map_err(|e| e.in_layer(id.to_string()))?;
        layers.insert(id, layer);
    }
    Ok(PrunedModel { model, layers })
}

/// Result of an online prefill: the prompt's masks and its logits.
#[derive(Clone, Debug)]
pub struct OnlinePrefill<'m> {
    pub pruned: PrunedModel<'m>,
    pub logits: Matrix,
    /// Filled only by [`prune_online_tracked`].
    pub losses: Vec<LayerLoss>,
}

fn online_prefill<'m>(
    model: &'m Model,
    prompt: &[u32],
    cfg: &PruneConfig,
    track: bool,
) -> Result<OnlinePrefill<'m>> {
    if cfg.mode != Mode::Online {
        return Err(Error::Config("prune_online needs mode = online".into()));
    }
    cfg.validate()?;
    if prompt.is_empty() {
        return Err(Error::Empty("prompt has no tokens to calibrate on"));
    }
    let mut hook = PruningHook::new(cfg, false, track);
    let logits = model.forward_with(prompt, &mut hook)?;
    Ok(OnlinePrefill {
        pruned: PrunedModel {
            model,
            layers: hook.layers,
        },
        logits,
        losses: hook.losses.unwrap_or_default(),
    })
}

/// Prefill of one prompt with masks derived from the prompt's own
/// activations.
pub fn prune_online<'m>(model: &'m Model, prompt: &[u32], cfg: &PruneConfig) -> Result<OnlinePrefill<'m>> {
    online_prefill(model, prompt, cfg, false)
}

/// [`prune_online`] that also reports each layer's approximation loss.
pub fn prune_online_tracked<'m>(
    model: &'m Model,
    prompt: &[u32],
    cfg: &PruneConfig,
) -> Result<OnlinePrefill<'m>> {
    online_prefill(model, prompt, cfg, true)
}

/// Greedy continuation of an online-pruned prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub tokens: Vec<u32>,
    /// Mask fingerprint used for the prefill and then for each decode step.
    pub mask_fingerprints: Vec<u64>,
}

fn argmax(row: &[f32]) -> u32 {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best as u32
}

/// Greedy decoding. Masks come from the prefill and are reused for every
/// step unless `cfg.refresh_per_token` is set. Stops at `max_seq`.
pub fn generate_greedy(model: &Model, prompt: &[u32], new_tokens: usize, cfg: &PruneConfig) -> Result<Generation> {
    let prefill = prune_online(model, prompt, cfg)?;
    let mut tokens = prompt.to_vec();
    let mut fingerprints = vec![prefill.pruned.mask_fingerprint()];
    let mut logits = prefill.logits;
    let mut pruned = prefill.pruned;
    for _ in 0..new_tokens {
        if tokens.len() >= model.config.max_seq {
            break;
        }
        tokens.push(argmax(logits.row(logits.rows() - 1)));
        if cfg.refresh_per_token {
            let step = prune_online(model, &tokens, cfg)?;
            pruned = step.pruned;
            logits = step.logits;
        } else {
            logits = pruned.forward(&tokens)?;
        }
        fingerprints.push(pruned.mask_fingerprint());
    }
    Ok(Generation {
        tokens,
        mask_fingerprints: fingerprints,
    })
}

/// How a model is run for evaluation.
#[derive(Clone, Copy, Debug)]
pub enum EvalMode<'a> {
    Dense,
    /// Fixed masks for every window.
    Static(&'a PrunedModel<'a>),
    /// Fresh masks from each window's own tokens.
    Online(&'a PruneConfig),
}

/// Per-window next-token NLL under `mode`.
pub fn evaluate(model: &Model, stream: &[u32], stride: usize, mode: EvalMode<'_>) -> Result<Vec<WindowNll>> {
    let max_seq = model.config.max_seq;
    match mode {
        EvalMode::Dense => window_nlls(stream, max_seq, stride, |w| model.forward(w)),
        EvalMode::Static(p) => window_nlls(stream, max_seq, stride, |w| p.forward(w)),
        EvalMode::Online(cfg) => {
            window_nlls(stream, max_seq, stride, |w| Ok(prune_online(model, w, cfg)?.logits))
        }
    }
}
