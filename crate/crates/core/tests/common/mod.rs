#![allow(dead_code)]

use easyspec_core::draft::forward_sequential;
use easyspec_core::model::{init_model, make_truncated_draft};
use easyspec_core::rng::SeededRng;
use easyspec_core::tensor::{softmax_temp, Matrix, ProbVector};
use easyspec_core::{corpus, KvCache, ModelConfig, WeightStore};

/// Model seed of the 12-layer base / 8-layer drafter pair.
pub const PAIR_SEED: u64 = 7;

pub fn model_pair(base_layers: usize, keep: usize, seed: u64) -> (WeightStore, WeightStore) {
    let base = init_model(&ModelConfig::toy(base_layers, seed)).unwrap();
    let draft = make_truncated_draft(&base, keep).unwrap();
    (base, draft)
}

/// The 4 KiB probe corpus as 16 BOS-prefixed sequences of 256 bytes.
pub fn probe_corpus() -> Vec<Vec<u32>> {
    corpus::chunked(&corpus::synthetic_text(4096, 1), 256)
}

/// `count` prompts of 24 bytes each, BOS-prefixed.
pub fn prompts(count: usize) -> Vec<Vec<u32>> {
    corpus::synthetic_prompts(count, 24, 2)
}

/// Plain sequential prefill; returns the cache and the final hidden rows.
pub fn prefill(model: &WeightStore, tokens: &[u32]) -> (KvCache, Matrix) {
    let mut cache = KvCache::new(model.n_layers(), model.config.d_model);
    let rows = cache.extend_committed(tokens.len(), false).unwrap();
    let mask = cache.build_tree_mask();
    let h = model.embed(tokens).unwrap();
    let out = forward_sequential(model, &h, &mut cache, rows, &mask).unwrap();
    (cache, out)
}

/// Next-token distribution after `tokens` by a from-scratch prefill.
pub fn next_dist(model: &WeightStore, tokens: &[u32], temperature: f32) -> ProbVector {
    let (_, out) = prefill(model, tokens);
    let logits = model.lm_logits(&out.select_rows(&[out.rows() - 1])).unwrap();
    softmax_temp(logits.row(0), temperature).unwrap()
}

/// Largest absolute difference between two caches over their first `rows`
/// rows, keys and values of every layer.
pub fn cache_max_diff(a: &KvCache, b: &KvCache, rows: usize) -> f32 {
    let mut worst = 0.0f32;
    for l in 0..a.n_layers() {
        for r in 0..rows {
            let pairs = [(a.layer(l).key(r), b.layer(l).key(r)), (a.layer(l).value(r), b.layer(l).value(r))];
            for (x, y) in pairs {
                for (p, q) in x.iter().zip(y) {
                    worst = worst.max((p - q).abs());
                }
            }
        }
    }
    worst
}

/// Random probability vector with Exp(1) weights (flat Dirichlet).
pub fn random_dist(rng: &mut SeededRng, len: usize) -> Vec<f64> {
    use easyspec_core::rng::UniformSource;
    let w: Vec<f64> = (0..len).map(|_| -(1.0 - rng.next_uniform()).ln()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

pub fn to_prob(v: &[f64]) -> ProbVector {
    ProbVector::normalized(v, 0.0).unwrap()
}

pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}
