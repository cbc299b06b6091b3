//! Logit-level failure injection on top of the toy transformer.
//!
//! `final = base + β_p·b + β_v·γ^m·g(cache)` where `b` is a fixed per-seed
//! skew toward "popular" object words (and toward answering "yes"), and
//! `g_w` is the share of the image's patches that show `w` and are still
//! retained in the cache being decoded. `m` counts generated tokens, so
//! grounding fades as the output grows while the skew does not.

use super::config::Knobs;
use super::model::ToyCache;
use crate::model::{TokenId, Vocabulary};
use crate::prob::LogitVector;

#[derive(Debug, Clone)]
pub struct PathologyProfile {
    prior_bias: Vec<f64>,
    knobs: Knobs,
    popularity: Vec<TokenId>,
}

impl PathologyProfile {
    pub fn new(prior_bias: Vec<f64>, knobs: Knobs, vocab: &Vocabulary) -> Self {
        let mut popularity: Vec<TokenId> = vocab.object_words().iter().copied().collect();
        popularity.sort_by(|a, b| {
            prior_bias[b.index()]
                .total_cmp(&prior_bias[a.index()])
                .then(a.cmp(b))
        });
        Self {
            prior_bias,
            knobs,
            popularity,
        }
    }

    /// The skew `b`, one entry per vocabulary token.
    pub fn prior_bias(&self) -> &[f64] {
        &self.prior_bias
    }

    pub fn knobs(&self) -> Knobs {
        self.knobs
    }

    /// Object words ordered by decreasing skew.
    pub fn popularity(&self) -> &[TokenId] {
        &self.popularity
    }

    /// `g(cache)`: zero except on object words with retained patches.
    pub fn grounding(&self, cache: &ToyCache) -> Vec<f64> {
        let mut g = vec![0.0; self.prior_bias.len()];
        let total = cache.visual_total();
        if total == 0 {
            return g;
        }
        for id in cache.retained_patch_objects() {
            g[id.index()] += 1.0;
        }
        for x in &mut g {
            *x /= total as f64;
        }
        g
    }

    pub fn final_logits(&self, base: &LogitVector, cache: &ToyCache, m: usize) -> LogitVector {
        let k = self.knobs;
        let decay = k.gamma.powi(m.min(i32::MAX as usize) as i32);
        let g = self.grounding(cache);
        let values = base
            .as_slice()
            .iter()
            .zip(&self.prior_bias)
            .zip(&g)
            .map(|((x, b), g)| x + k.beta_p * b + k.beta_v * decay * g)
            .collect();
        LogitVector::new(values).expect("finite pathology terms keep logits finite")
    }
}
