//! Minimal pre-LayerNorm decoder-only transformer (OPT-style block, ReLU MLP,
//! learned positions, tied output head) with pluggable linear layers.
//!
//! Hidden states are kept feature-major (`hidden × tokens`), the layout the
//! linear layers consume as `W · X`. Several sequences can be run together:
//! their token columns are concatenated and every linear layer sees the whole
//! batch at once, while attention stays within each sequence.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::par;

pub const MAGIC: &[u8; 4] = b"MUMO";
pub const FORMAT_VERSION: u32 = 1;
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub hidden: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub vocab: usize,
    pub max_seq: usize,
}

impl ModelConfig {
    /// Config with `head_dim = hidden / n_heads`, `ffn_dim = 4·hidden`, a
    /// byte vocabulary and `max_seq = 512`.
    pub fn new(n_layers: usize, n_heads: usize, hidden: usize) -> Self {
        Self {
            n_layers,
            n_heads,
            hidden,
            head_dim: hidden / n_heads.max(1),
            ffn_dim: 4 * hidden,
            vocab: 256,
            max_seq: 512,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("hidden", self.hidden),
            ("head_dim", self.head_dim),
            ("ffn_dim", self.ffn_dim),
            ("vocab", self.vocab),
            ("max_seq", self.max_seq),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.hidden != self.n_heads * self.head_dim {
            return Err(Error::Config(format!(
                "hidden {} != n_heads {} x head_dim {}",
                self.hidden, self.n_heads, self.head_dim
            )));
        }
        if self.ffn_dim < self.hidden {
            return Err(Error::Config(format!(
                "ffn_dim {} smaller than hidden {}",
                self.ffn_dim, self.hidden
            )));
        }
        Ok(())
    }
}

/// One of the six prunable linear layers of a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearKind {
    Q,
    K,
    V,
    O,
    Up,
    Down,
}

impl LinearKind {
    pub const ALL: [LinearKind; 6] = [
        LinearKind::Q,
        LinearKind::K,
        LinearKind::V,
        LinearKind::O,
        LinearKind::Up,
        LinearKind::Down,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LinearKind::Q => "q",
            LinearKind::K => "k",
            LinearKind::V => "v",
            LinearKind::O => "o",
            LinearKind::Up => "up",
            LinearKind::Down => "down",
        }
    }
}

impl FromStr for LinearKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LinearKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown linear layer kind {s:?}")))
    }
}

/// Address of a linear layer: block index and kind.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LayerId {
    pub block: usize,
    pub kind: LinearKind,
}

impl LayerId {
    pub fn new(block: usize, kind: LinearKind) -> Self {
        Self { block, kind }
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layers.{}.{}", self.block, self.kind.as_str())
    }
}

impl FromStr for LayerId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad layer name {s:?}, expected layers.N.kind"));
        let mut parts = s.split('.');
        if parts.next() != Some("layers") {
            return Err(bad());
        }
        let block = parts.next().and_then(|b| b.parse().ok()).ok_or_else(bad)?;
        let kind = parts.next().ok_or_else(bad)?.parse()?;
        if parts.next().is_some() {
            return Err(bad());
        }
        Ok(LayerId { block, kind })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: Vec<f32>,
    pub bias: Vec<f32>,
}

impl LayerNorm {
    fn identity(d: usize) -> Self {
        Self {
            gain: vec![1.0; d],
            bias: vec![0.0; d],
        }
    }

    /// Normalizes every column of `h` (features × tokens).
    fn apply(&self, h: &Matrix) -> Matrix {
        let (d, n) = h.shape();
        let mut mean = vec![0f64; n];
        let mut var = vec![0f64; n];
        for j in 0..d {
            for (m, &v) in mean.iter_mut().zip(h.row(j)) {
                *m += f64::from(v);
            }
        }
        mean.iter_mut().for_each(|m| *m /= d as f64);
        for j in 0..d {
            for ((s, &v), m) in var.iter_mut().zip(h.row(j)).zip(&mean) {
                let c = f64::from(v) - m;
                *s += c * c;
            }
        }
        let inv: Vec<f64> = var
            .iter()
            .map(|s| 1.0 / (s / d as f64 + LAYER_NORM_EPS).sqrt())
            .collect();
        let mut out = Matrix::zeros(d, n);
        for j in 0..d {
            let (g, b) = (f64::from(self.gain[j]), f64::from(self.bias[j]));
            let src = h.row(j);
            for (t, o) in out.row_mut(j).iter_mut().enumerate() {
                *o = ((f64::from(src[t]) - mean[t]) * inv[t] * g + b) as f32;
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub o: Matrix,
    /// `ffn_dim × hidden`
    pub up: Matrix,
    /// `hidden × ffn_dim`
    pub down: Matrix,
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
}

impl BlockWeights {
    pub fn linear(&self, kind: LinearKind) -> &Matrix {
        match kind {
            LinearKind::Q => &self.q,
            LinearKind::K => &self.k,
            LinearKind::V => &self.v,
            LinearKind::O => &self.o,
            LinearKind::Up => &self.up,
            LinearKind::Down => &self.down,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    /// `vocab × hidden`; also the output head.
    pub tok_emb: Matrix,
    /// `max_seq × hidden`
    pub pos_emb: Matrix,
    pub blocks: Vec<BlockWeights>,
    pub final_norm: LayerNorm,
}

/// Applies one linear layer during a forward pass. Implementations decide
/// whether the dense weights or a pruned version are used.
pub trait LinearHook {
    /// `input` is `in_features × tokens`; returns `out_features × tokens`.
    fn apply(&mut self, id: LayerId, weight: &Matrix, input: &Matrix) -> Result<Matrix>;
}

/// Plain dense product for every layer.
#[derive(Clone, Copy, Debug, Default)]
pub struct DenseLinear;

impl LinearHook for DenseLinear {
    fn apply(&mut self, _id: LayerId, weight: &Matrix, input: &Matrix) -> Result<Matrix> {
        linalg::matmul(weight, input)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub weights: ModelWeights,
    /// Optional token strings from the trailing vocab section.
    pub vocab: Option<Vec<String>>,
}

/// Column span of one sequence inside a batched activation matrix.
#[derive(Clone, Copy, Debug)]
struct Segment {
    start: usize,
    len: usize,
}

impl Model {
    /// Random weights for tests and synthetic experiments. Linear weights are
    /// `N(0, 1/fan_in)`, embeddings `N(0, 1)`, norms near identity.
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden;
        let di = config.ffn_dim;
        let lin = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            Matrix::random_normal(rows, cols, 1.0 / (cols as f32).sqrt(), rng)
        };
        let norm = |rng: &mut ChaCha8Rng| {
            let g = Matrix::random_normal(1, d, 0.1, rng);
            let b = Matrix::random_normal(1, d, 0.1, rng);
            LayerNorm {
                gain: g.data().iter().map(|v| 1.0 + v).collect(),
                bias: b.into_data(),
            }
        };
        let tok_emb = Matrix::random_normal(config.vocab, d, 1.0, &mut rng);
        let pos_emb = Matrix::random_normal(config.max_seq, d, 0.5, &mut rng);
        let blocks = (0..config.n_layers)
            .map(|_| BlockWeights {
                q: lin(d, d, &mut rng),
                k: lin(d, d, &mut rng),
                v: lin(d, d, &mut rng),
                o: lin(d, d, &mut rng),
                up: lin(di, d, &mut rng),
                down: lin(d, di, &mut rng),
                ln1: norm(&mut rng),
                ln2: norm(&mut rng),
            })
            .collect();
        Ok(Self {
            config,
            weights: ModelWeights {
                tok_emb,
                pos_emb,
                blocks,
                final_norm: LayerNorm::identity(d),
            },
            vocab: None,
        })
    }

    pub fn linear(&self, id: LayerId) -> &Matrix {
        self.weights.blocks[id.block].linear(id.kind)
    }

    /// Every linear layer in forward order.
    pub fn linear_ids(&self) -> Vec<LayerId> {
        (0..self.config.n_layers)
            .flat_map(|b| LinearKind::ALL.into_iter().map(move |k| LayerId::new(b, k)))
            .collect()
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Empty("token sequence"));
        }
        if tokens.len() > self.config.max_seq {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max_seq: self.config.max_seq,
            });
        }
        if let Some((pos, &id)) = tokens
            .iter()
            .enumerate()
            .find(|(_, &id)| id as usize >= self.config.vocab)
        {
            return Err(Error::UnknownToken {
                id,
                pos,
                vocab: self.config.vocab,
            });
        }
        Ok(())
    }

    /// Dense logits, `tokens × vocab`.
    pub fn forward(&self, tokens: &[u32]) -> Result<Matrix> {
        self.forward_with(tokens, &mut DenseLinear)
    }

    pub fn forward_with(&self, tokens: &[u32], hook: &mut dyn LinearHook) -> Result<Matrix> {
        Ok(self
            .forward_batch(&[tokens], hook)?
            .pop()
            .expect("one sequence in, one out"))
    }

    /// Logits for several independent sequences that share every linear
    /// layer call.
    pub fn forward_batch(&self, seqs: &[&[u32]], hook: &mut dyn LinearHook) -> Result<Vec<Matrix>> {
        if seqs.is_empty() {
            return Err(Error::Empty("no sequences"));
        }
        let mut segments = Vec::with_capacity(seqs.len());
        let mut start = 0;
        for s in seqs {
            self.check_tokens(s)?;
            segments.push(Segment { start, len: s.len() });
            start += s.len();
        }
        let mut h = self.embed(seqs, start);
        for (b, block) in self.weights.blocks.iter().enumerate() {
            h = self.block_forward(b, block, h, &segments, hook)?;
        }
        let f = self.weights.final_norm.apply(&h);
        let logits = linalg::matmul(&self.weights.tok_emb, &f)?;
        Ok(segments
            .iter()
            .map(|s| logits.columns(s.start, s.len).transpose())
            .collect())
    }

    fn embed(&self, seqs: &[&[u32]], total: usize) -> Matrix {
        let d = self.config.hidden;
        let mut h = Matrix::zeros(d, total);
        let mut col = 0;
        for s in seqs {
            for (pos, &tok) in s.iter().enumerate() {
                let e = self.weights.tok_emb.row(tok as usize);
                let p = self.weights.pos_emb.row(pos);
                for j in 0..d {
                    h.set(j, col, e[j] + p[j]);
                }
                col += 1;
            }
        }
        h
    }

    fn block_forward(
        &self,
        b: usize,
        w: &BlockWeights,
        mut h: Matrix,
        segments: &[Segment],
        hook: &mut dyn LinearHook,
    ) -> Result<Matrix> {
        let a = w.ln1.apply(&h);
        let q = hook.apply(LayerId::new(b, LinearKind::Q), &w.q, &a)?;
        let k = hook.apply(LayerId::new(b, LinearKind::K), &w.k, &a)?;
        let v = hook.apply(LayerId::new(b, LinearKind::V), &w.v, &a)?;
        let att = self.attention(&q, &k, &v, segments);
        let o = hook.apply(LayerId::new(b, LinearKind::O), &w.o, &att)?;
        add_in_place(&mut h, &o);

        let m = w.ln2.apply(&h);
        let mut u = hook.apply(LayerId::new(b, LinearKind::Up), &w.up, &m)?;
        relu_in_place(&mut u);
        let dn = hook.apply(LayerId::new(b, LinearKind::Down), &w.down, &u)?;
        add_in_place(&mut h, &dn);
        Ok(h)
    }

    /// Causal multi-head attention within each segment.
    fn attention(&self, q: &Matrix, k: &Matrix, v: &Matrix, segments: &[Segment]) -> Matrix {
        let dh = self.config.head_dim;
        let n_heads = self.config.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let jobs: Vec<(usize, usize)> = (0..segments.len())
            .flat_map(|s| (0..n_heads).map(move |hd| (s, hd)))
            .collect();
        // Each job yields the head's `dh × len` output block.
        let blocks = par::map_range(jobs.len(), |job| {
            let (si, hd) = jobs[job];
            let seg = segments[si];
            let rows = hd * dh..(hd + 1) * dh;
            let mut out = vec![0f64; dh * seg.len];
            let mut probs = vec![0f64; seg.len];
            for t in 0..seg.len {
                let qt = seg.start + t;
                let mut max = f64::NEG_INFINITY;
                for (s, p) in probs.iter_mut().enumerate().take(t + 1) {
                    let ks = seg.start + s;
                    let dot: f64 = rows
                        .clone()
                        .map(|r| f64::from(q.get(r, qt)) * f64::from(k.get(r, ks)))
                        .sum();
                    *p = dot * scale;
                    max = max.max(*p);
                }
                let mut z = 0.0;
                for p in probs.iter_mut().take(t + 1) {
                    *p = (*p - max).exp();
                    z += *p;
                }
                for (ri, r) in rows.clone().enumerate() {
                    let vr = &v.row(r)[seg.start..seg.start + t + 1];
                    let acc: f64 = probs.iter().zip(vr).map(|(p, &x)| p * f64::from(x)).sum();
                    out[ri * seg.len + t] = acc / z;
                }
            }
            out
        });
        let mut att = Matrix::zeros(self.config.hidden, q.cols());
        for (job, block) in blocks.iter().enumerate() {
            let (si, hd) = jobs[job];
            let seg = segments[si];
            for ri in 0..dh {
                let dst = &mut att.row_mut(hd * dh + ri)[seg.start..seg.start + seg.len];
                for (d, &s) in dst.iter_mut().zip(&block[ri * seg.len..(ri + 1) * seg.len]) {
                    *d = s as f32;
                }
            }
        }
        att
    }

    /// Dense perplexity of `stream` with windows of `max_seq` advanced by
    /// `stride`.
    pub fn perplexity(&self, stream: &[u32], stride: usize) -> Result<f64> {
        let nll = window_nlls(stream, self.config.max_seq, stride, |w| self.forward(w))?;
        Ok(perplexity_of(&nll))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for v in [c.n_layers, c.n_heads, c.hidden, c.head_dim, c.ffn_dim, c.vocab, c.max_seq] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        let mut put = |xs: &[f32]| xs.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        let w = &self.weights;
        put(w.tok_emb.data());
        put(w.pos_emb.data());
        for b in &w.blocks {
            for kind in LinearKind::ALL {
                put(b.linear(kind).data());
            }
            put(&b.ln1.gain);
            put(&b.ln1.bias);
            put(&b.ln2.gain);
            put(&b.ln2.bias);
        }
        put(&w.final_norm.gain);
        put(&w.final_norm.bias);
        if let Some(vocab) = &self.vocab {
            out.extend_from_slice(&(vocab.len() as u32).to_le_bytes());
            for tok in vocab {
                out.extend_from_slice(&(tok.len() as u32).to_le_bytes());
                out.extend_from_slice(tok.as_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
        if &magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let mut cfg = [0usize; 7];
        for v in cfg.iter_mut() {
            *v = r.u32("config")? as usize;
        }
        let config = ModelConfig {
            n_layers: cfg[0],
            n_heads: cfg[1],
            hidden: cfg[2],
            head_dim: cfg[3],
            ffn_dim: cfg[4],
            vocab: cfg[5],
            max_seq: cfg[6],
        };
        config.validate()?;
        let (d, di) = (config.hidden, config.ffn_dim);

        let tok_emb = r.matrix(config.vocab, d, "tok_emb")?;
        let pos_emb = r.matrix(config.max_seq, d, "pos_emb")?;
        let mut blocks = Vec::with_capacity(config.n_layers);
        for b in 0..config.n_layers {
            let name = |s: &str| format!("layers.{b}.{s}");
            let q = r.matrix(d, d, &name("q"))?;
            let k = r.matrix(d, d, &name("k"))?;
            let v = r.matrix(d, d, &name("v"))?;
            let o = r.matrix(d, d, &name("o"))?;
            let up = r.matrix(di, d, &name("up"))?;
            let down = r.matrix(d, di, &name("down"))?;
            let ln1 = LayerNorm {
                gain: r.vector(d, &name("ln1.gain"))?,
                bias: r.vector(d, &name("ln1.bias"))?,
            };
            let ln2 = LayerNorm {
                gain: r.vector(d, &name("ln2.gain"))?,
                bias: r.vector(d, &name("ln2.bias"))?,
            };
            blocks.push(BlockWeights {
                q,
                k,
                v,
                o,
                up,
                down,
                ln1,
                ln2,
            });
        }
        let final_norm = LayerNorm {
            gain: r.vector(d, "final_norm.gain")?,
            bias: r.vector(d, "final_norm.bias")?,
        };

        let vocab = if r.remaining() == 0 {
            None
        } else {
            let count = r.u32("vocab count")? as usize;
            if count != config.vocab {
                return Err(Error::Vocab(format!(
                    "{count} entries for a vocabulary of {}",
                    config.vocab
                )));
            }
            let mut toks = Vec::with_capacity(count);
            for i in 0..count {
                let len = r.u32("vocab entry length")? as usize;
                let raw = r.take(len, "vocab entry")?;
                let s = std::str::from_utf8(raw)
                    .map_err(|e| Error::Vocab(format!("entry {i} is not UTF-8: {e}")))?;
                toks.push(s.to_owned());
            }
            Some(toks)
        };
        if r.remaining() != 0 {
            return Err(Error::TrailingBytes(r.remaining()));
        }
        Ok(Self {
            config,
            weights: ModelWeights {
                tok_emb,
                pos_emb,
                blocks,
                final_norm,
            },
            vocab,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Truncated { tensor: what.into() });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn vector(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let raw = self.take(n * 4, what)?;
        let v: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if let Some(index) = v.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                what: what.into(),
                index,
            });
        }
        Ok(v)
    }

    fn matrix(&mut self, rows: usize, cols: usize, what: &str) -> Result<Matrix> {
        let v = self.vector(rows * cols, what)?;
        Ok(Matrix::from_raw(rows, cols, v))
    }
}

fn add_in_place(h: &mut Matrix, delta: &Matrix) {
    debug_assert_eq!(h.shape(), delta.shape());
    for i in 0..h.rows() {
        for (a, &b) in h.row_mut(i).iter_mut().zip(delta.row(i)) {
            *a += b;
        }
    }
}

fn relu_in_place(m: &mut Matrix) {
    for i in 0..m.rows() {
        for v in m.row_mut(i) {
            *v = v.max(0.0);
        }
    }
}

/// Softmax of each row in `f64`.
pub fn softmax_rows(logits: &Matrix) -> Vec<Vec<f64>> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
            let e: Vec<f64> = row.iter().map(|&v| (f64::from(v) - max).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|v| v / z).collect()
        })
        .collect()
}

/// `-log softmax(row)[target]` in `f64`.
pub fn token_nll(row: &[f32], target: u32) -> f64 {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let lse = row.iter().map(|&v| (f64::from(v) - max).exp()).sum::<f64>().ln() + max;
    lse - f64::from(row[target as usize])
}

/// One evaluation window: input tokens `begin..end`, scoring the targets
/// `first_target..end` (each predicted from the token before it).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub begin: usize,
    pub end: usize,
    pub first_target: usize,
}

/// Windows of at most `max_seq` tokens, starting every `stride` tokens.
/// Every target `1..n` is scored exactly once, except that with
/// `stride == max_seq` the first token of each window has no in-window
/// context and is skipped.
pub fn windows(n: usize, max_seq: usize, stride: usize) -> Result<Vec<Window>> {
    if n < 2 {
        return Err(Error::Empty("perplexity needs at least two tokens"));
    }
    if stride == 0 || stride > max_seq {
        return Err(Error::Config(format!(
            "stride must lie in 1..={max_seq}, got {stride}"
        )));
    }
    let mut out = Vec::new();
    let mut last = 0;
    let mut begin = 0;
    loop {
        let end = (begin + max_seq).min(n);
        let first_target = (last + 1).max(begin + 1);
        if first_target < end {
            out.push(Window {
                begin,
                end,
                first_target,
            });
            last = end - 1;
        }
        if end == n {
            break;
        }
        begin += stride;
    }
    Ok(out)
}

/// Summed next-token NLL of one window.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowNll {
    pub window: Window,
    pub sum: f64,
    pub count: usize,
}

impl WindowNll {
    pub fn perplexity(&self) -> f64 {
        (self.sum / self.count as f64).exp()
    }
}

/// Runs `logits_fn` on every window and collects the NLL of its scored
/// targets. `logits_fn` maps window tokens to `tokens × vocab` logits.
pub fn window_nlls(
    stream: &[u32],
    max_seq: usize,
    stride: usize,
    mut logits_fn: impl FnMut(&[u32]) -> Result<Matrix>,
) -> Result<Vec<WindowNll>> {
    windows(stream.len(), max_seq, stride)?
        .into_iter()
        .map(|w| {
            let logits = logits_fn(&stream[w.begin..w.end])?;
            let mut sum = 0.0;
            for target in w.first_target..w.end {
                sum += token_nll(logits.row(target - 1 - w.begin), stream[target]);
            }
            Ok(WindowNll {
                window: w,
                sum,
                count: w.end - w.first_target,
            })
        })
        .collect()
}

/// `exp(total NLL / total targets)`.
pub fn perplexity_of(nlls: &[WindowNll]) -> f64 {
    let sum: f64 = nlls.iter().map(|w| w.sum).sum();
    let count: usize = nlls.iter().map(|w| w.count).sum();
    (sum / count as f64).exp()
}

/// Byte-level tokenizer: token id = byte value.
pub fn encode_bytes(text: &[u8]) -> Vec<u32> {
    text.iter().map(|&b| u32::from(b)).collect()
}

pub fn decode_bytes(tokens: &[u32]) -> Vec<u8> {
    tokens.iter().map(|&t| t as u8).collect()
}

/// Reads a flat file of `u32` little-endian token ids.
pub fn load_token_ids(path: impl AsRef<Path>) -> Result<Vec<u32>> {
    let raw = fs::read(path)?;
    if raw.len() % 4 != 0 {
        return Err(Error::Truncated {
            tensor: format!("token id file of {} bytes", raw.len()),
        });
    }
    Ok(raw
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .collect())
}
