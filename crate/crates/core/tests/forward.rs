//! Model forward pass against an independent f64 oracle, the golden
//! perplexity of the trained fixture, and structural properties.

mod common;

use common::*;
use mumoe::model::{self, DenseLinear, Model};
use mumoe::pruner::{self, EvalMode, Method, PruneConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

#[test]
fn dense_forward_matches_reference_on_random_model() {
    let model = random_model(2, 32, 40, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for len in [1, 7, 40] {
        let tokens = random_prompt(&mut rng, len, model.config.vocab);
        let got = model.forward(&tokens).unwrap();
        let err = max_rel(&got, &dense_reference(&model, &tokens));
        assert!(err < 1e-5, "len {len}: rel err {err}");
    }
}

#[test]
fn dense_forward_matches_reference_on_fixture() {
    let model = tiny_lm();
    let tokens = &text_tokens("eval.txt")[..96];
    let err = max_rel(&model.forward(tokens).unwrap(), &dense_reference(&model, tokens));
    assert!(err < 1e-5, "rel err {err}");
}

#[test]
fn pruned_forward_matches_masked_reference() {
    let model = random_model(2, 32, 32, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let prompt = random_prompt(&mut rng, 24, model.config.vocab);
    for method in [Method::Magnitude, Method::Wanda] {
        let pre = pruner::prune_online(&model, &prompt, &PruneConfig::online(0.5, method)).unwrap();
        let masks = pre.pruned.masks();
        let reference = reference_logits(&model, &prompt, &|id| masks.get(&id).cloned());
        let err = max_rel(&pre.logits, &reference);
        assert!(err < 1e-5, "{method}: rel err {err}");
        // Reusing the installed masks reproduces the prefill exactly.
        assert_eq!(pre.pruned.forward(&prompt).unwrap(), pre.logits);
    }
}

#[test]
fn golden_perplexity() {
    let golden: Value =
        serde_json::from_str(&std::fs::read_to_string(fixture("golden.json")).unwrap()).unwrap();
    let model = tiny_lm();
    let stream = text_tokens(golden["text"].as_str().unwrap());
    let stride = golden["stride"].as_u64().unwrap() as usize;
    let nll = pruner::evaluate(&model, &stream, stride, EvalMode::Dense).unwrap();
    let targets: usize = nll.iter().map(|w| w.count).sum();
    assert_eq!(targets as u64, golden["targets"].as_u64().unwrap());
    let ppl = model::perplexity_of(&nll);
    let want = golden["perplexity"].as_f64().unwrap();
    assert!((ppl / want - 1.0).abs() < 1e-4, "perplexity {ppl} vs {want}");
}

#[test]
fn dense_and_static_forward_are_causal() {
    let model = random_model(2, 32, 32, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random_prompt(&mut rng, 20, model.config.vocab);
    let mut b = a.clone();
    b[12] = (b[12] + 1) % model.config.vocab as u32;
    let cfg = PruneConfig::offline(0.5, Method::Wanda);
    let record = pruner::calibrate_offline(&model, &random_prompt(&mut rng, 32, 256), &cfg, "rand").unwrap();
    let pruned = pruner::prune_offline(&model, &record, &cfg).unwrap();
    for (la, lb) in [
        (model.forward(&a).unwrap(), model.forward(&b).unwrap()),
        (pruned.forward(&a).unwrap(), pruned.forward(&b).unwrap()),
    ] {
        for t in 0..12 {
            assert_eq!(la.row(t), lb.row(t), "position {t} saw the future");
        }
        assert_ne!(la.row(12), lb.row(12));
    }
}

#[test]
fn batched_sequences_do_not_interact() {
    let model = random_model(2, 32, 32, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let seqs: Vec<Vec<u32>> = [5, 17, 32].iter().map(|&n| random_prompt(&mut rng, n, 256)).collect();
    let refs: Vec<&[u32]> = seqs.iter().map(Vec::as_slice).collect();
    let batch = model.forward_batch(&refs, &mut DenseLinear).unwrap();
    for (s, got) in seqs.iter().zip(&batch) {
        let single = model.forward(s).unwrap();
        let err = max_rel(got, &matrix_to_rows(&single));
        assert!(err < 1e-6, "rel err {err}");
    }
}

#[test]
fn save_load_round_trip_preserves_logits() {
    let model = tiny_lm();
    let bytes = model.to_bytes();
    assert_eq!(bytes, std::fs::read(fixture("tiny_lm.mumo")).unwrap());
    let again = Model::from_bytes(&bytes).unwrap();
    let tokens = &text_tokens("domain_a.txt")[..50];
    assert_eq!(model.forward(tokens).unwrap(), again.forward(tokens).unwrap());
}

#[test]
fn greedy_generation_reuses_prefill_masks() {
    let model = random_model(1, 32, 32, 7);
    let prompt = [1u32, 2, 3, 4, 5, 6];
    let cfg = PruneConfig::online(0.5, Method::Wanda);
    let g = pruner::generate_greedy(&model, &prompt, 8, &cfg).unwrap();
    assert_eq!(g.tokens.len(), 14);
    assert!(g.mask_fingerprints.iter().all(|&f| f == g.mask_fingerprints[0]));
    let refreshed = PruneConfig {
        refresh_per_token: true,
        ..cfg
    };
    let r = pruner::generate_greedy(&model, &prompt, 8, &refreshed).unwrap();
    assert_eq!(r.mask_fingerprints.len(), 9);
    assert!(r.mask_fingerprints.iter().any(|&f| f != r.mask_fingerprints[0]));
}
