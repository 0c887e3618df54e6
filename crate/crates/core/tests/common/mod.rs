//! Fixtures and straight-line oracles shared by the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;

use mumoe::linalg::Matrix;
use mumoe::model::{encode_bytes, LayerId, LinearKind, Model, ModelConfig, LAYER_NORM_EPS};
use mumoe::selection::SparsityMask;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn tiny_lm() -> Model {
    Model::load(fixture("tiny_lm.mumo")).expect("fixture model loads")
}

pub fn text_tokens(name: &str) -> Vec<u32> {
    encode_bytes(&std::fs::read(fixture(name)).expect("fixture text"))
}

/// Random-weight model with `L` blocks of width `d`.
pub fn random_model(n_layers: usize, hidden: usize, max_seq: usize, seed: u64) -> Model {
    let mut cfg = ModelConfig::new(n_layers, 4, hidden);
    cfg.max_seq = max_seq;
    Model::random(cfg, seed).unwrap()
}

pub fn random_prompt(rng: &mut impl rand::Rng, len: usize, vocab: usize) -> Vec<u32> {
    (0..len).map(|_| rng.gen_range(0..vocab as u32)).collect()
}

/// `max |a − b| / max |b|`.
pub fn max_rel(a: &Matrix, b: &[Vec<f64>]) -> f64 {
    let mut diff = 0f64;
    let mut scale = 0f64;
    for (i, row) in b.iter().enumerate() {
        for (j, &r) in row.iter().enumerate() {
            diff = diff.max((f64::from(a.get(i, j)) - r).abs());
            scale = scale.max(r.abs());
        }
    }
    diff / scale
}

type Mat = Vec<Vec<f64>>;

fn to_f64(m: &Matrix) -> Mat {
    (0..m.rows()).map(|i| m.row(i).iter().map(|&v| f64::from(v)).collect()).collect()
}

/// Token-major `T × out` product `x · wᵀ` with an optional mask on `w`.
fn linear(x: &Mat, w: &Matrix, mask: Option<&SparsityMask>) -> Mat {
    x.iter()
        .map(|xt| {
            (0..w.rows())
                .map(|i| {
                    (0..w.cols())
                        .filter(|&j| mask.is_none_or(|m| m.is_active(i, j)))
                        .map(|j| f64::from(w.get(i, j)) * xt[j])
                        .sum()
                })
                .collect()
        })
        .collect()
}

fn layer_norm(x: &Mat, gain: &[f32], bias: &[f32]) -> Mat {
    x.iter()
        .map(|xt| {
            let n = xt.len() as f64;
            let mean = xt.iter().sum::<f64>() / n;
            let var = xt.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            xt.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) * inv * f64::from(gain[j]) + f64::from(bias[j]))
                .collect()
        })
        .collect()
}

/// Token-by-token forward pass in `f64`, written without any of the
/// library's kernels. `masks` zeroes pruned weights of the given layers.
pub fn reference_logits(model: &Model, tokens: &[u32], masks: &dyn Fn(LayerId) -> Option<SparsityMask>) -> Mat {
    let c = &model.config;
    let w = &model.weights;
    let mut h: Mat = tokens
        .iter()
        .enumerate()
        .map(|(p, &t)| {
            (0..c.hidden)
                .map(|j| f64::from(w.tok_emb.get(t as usize, j)) + f64::from(w.pos_emb.get(p, j)))
                .collect()
        })
        .collect();
    for (b, blk) in w.blocks.iter().enumerate() {
        let lin = |kind: LinearKind, x: &Mat| {
            let m = masks(LayerId::new(b, kind));
            linear(x, blk.linear(kind), m.as_ref())
        };
        let a = layer_norm(&h, &blk.ln1.gain, &blk.ln1.bias);
        let (q, k, v) = (lin(LinearKind::Q, &a), lin(LinearKind::K, &a), lin(LinearKind::V, &a));
        let dh = c.head_dim;
        let mut att = vec![vec![0f64; c.hidden]; tokens.len()];
        for hd in 0..c.n_heads {
            let r = hd * dh..(hd + 1) * dh;
            for t in 0..tokens.len() {
                let logits: Vec<f64> = (0..=t)
                    .map(|s| r.clone().map(|i| q[t][i] * k[s][i]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let z: f64 = e.iter().sum();
                for i in r.clone() {
                    att[t][i] = (0..=t).map(|s| e[s] / z * v[s][i]).sum();
                }
            }
        }
        let o = lin(LinearKind::O, &att);
        for (ht, ot) in h.iter_mut().zip(&o) {
            ht.iter_mut().zip(ot).for_each(|(x, y)| *x += y);
        }
        let m = layer_norm(&h, &blk.ln2.gain, &blk.ln2.bias);
        let mut u = lin(LinearKind::Up, &m);
        u.iter_mut().flatten().for_each(|x| *x = x.max(0.0));
        let dn = lin(LinearKind::Down, &u);
        for (ht, dt) in h.iter_mut().zip(&dn) {
            ht.iter_mut().zip(dt).for_each(|(x, y)| *x += y);
        }
    }
    let f = layer_norm(&h, &w.final_norm.gain, &w.final_norm.bias);
    linear(&f, &w.tok_emb, None)
}

pub fn dense_reference(model: &Model, tokens: &[u32]) -> Mat {
    reference_logits(model, tokens, &|_| None)
}

pub fn matrix_to_rows(m: &Matrix) -> Mat {
    to_f64(m)
}
