use std::collections::BTreeSet;
use std::sync::atomic::{AtomicU64, Ordering};

use super::config::ToyConfig;
use super::layout::Layout;
use super::pathology::PathologyProfile;
use super::weights::{build_weights, ToyWeights};
use crate::model::{
    HeadValues, HiddenState, InputItem, KvCache, LanguageBackend, ModelDims, ModelError, PrefillResult,
    SequenceRole, StepResult, TokenId, Vocabulary,
};
use crate::prob::LogitVector;

static NEXT_MODEL_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone)]
struct Entry {
    position: usize,
    role: SequenceRole,
    token: Option<TokenId>,
    /// The object word an image patch depicts, if any.
    patch_object: Option<TokenId>,
    /// Per layer, the full-width key and value rows.
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

/// KV cache of the toy model. Entries keep their original sequence
/// positions; new tokens are placed after the highest position ever
/// allocated, so two branches selected from one prefill stay aligned.
#[derive(Debug, Clone)]
pub struct ToyCache {
    model_id: u64,
    entries: Vec<Entry>,
    next_position: usize,
    visual_total: usize,
}

impl ToyCache {
    /// Visual positions in the original prefill, retained or not.
    pub fn visual_total(&self) -> usize {
        self.visual_total
    }

    pub fn next_position(&self) -> usize {
        self.next_position
    }

    /// Object words depicted by the retained image patches, one per patch.
    pub fn retained_patch_objects(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.entries
            .iter()
            .filter(|e| e.role == SequenceRole::Visual)
            .filter_map(|e| e.patch_object)
    }

    /// Tokens of the retained text positions, in order.
    pub fn text_tokens(&self) -> Vec<TokenId> {
        self.entries.iter().filter_map(|e| e.token).collect()
    }

    /// Tokens of the retained `Generated` positions, in order.
    pub fn generated_tokens(&self) -> Vec<TokenId> {
        self.entries
            .iter()
            .filter(|e| e.role == SequenceRole::Generated)
            .filter_map(|e| e.token)
            .collect()
    }
}

impl KvCache for ToyCache {
    fn positions(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.position).collect()
    }

    fn role_at(&self, position: usize) -> Option<SequenceRole> {
        self.entries
            .binary_search_by_key(&position, |e| e.position)
            .ok()
            .map(|i| self.entries[i].role)
    }

    fn generated_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.role == SequenceRole::Generated)
            .count()
    }

    fn select(&self, keep: &BTreeSet<usize>) -> Result<Self, ModelError> {
        let entries: Vec<Entry> = self
            .entries
            .iter()
            .filter(|e| keep.contains(&e.position))
            .cloned()
            .collect();
        if entries.len() != keep.len() {
            let missing = keep
                .iter()
                .find(|p| self.role_at(**p).is_none())
                .copied()
                .unwrap_or_default();
            return Err(ModelError::PositionNotInCache(missing));
        }
        Ok(Self {
            model_id: self.model_id,
            entries,
            next_position: self.next_position,
            visual_total: self.visual_total,
        })
    }

    fn len(&self) -> usize {
        self.entries.len()
    }
}

/// The seeded toy vision-language model.
#[derive(Debug)]
pub struct ToyLvlm {
    id: u64,
    config: ToyConfig,
    layout: Layout,
    weights: ToyWeights,
    pathology: PathologyProfile,
}

impl ToyLvlm {
    pub fn new(config: ToyConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let weights = build_weights(&config);
        let pathology = PathologyProfile::new(weights.prior_bias.clone(), config.knobs, &config.vocab);
        Ok(Self {
            id: NEXT_MODEL_ID.fetch_add(1, Ordering::Relaxed),
            layout: Layout::new(config.vocab.object_words().len(), config.d_model),
            config,
            weights,
            pathology,
        })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    pub fn weights(&self) -> &ToyWeights {
        &self.weights
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn pathology(&self) -> &PathologyProfile {
        &self.pathology
    }

    /// Embedding of an image patch showing object word `id`: the token's own
    /// embedding row.
    pub fn object_patch(&self, id: TokenId) -> Result<Vec<f64>, ModelError> {
        if !self.config.vocab.is_object_word(id) {
            return Err(ModelError::Contract(format!(
                "{:?} is not an object word",
                self.config.vocab.word(id)
            )));
        }
        Ok(self.weights.token_embedding[id.index()].clone())
    }

    pub fn background_patch(&self) -> Vec<f64> {
        self.weights.background_embedding.clone()
    }

    /// `base + β_p·b + β_v·γ^m·g(cache)`.
    pub fn final_logits(&self, base: &LogitVector, cache: &ToyCache, m: usize) -> LogitVector {
        self.pathology.final_logits(base, cache, m)
    }

    fn check_cache(&self, cache: &ToyCache) -> Result<(), ModelError> {
        if cache.model_id == self.id {
            Ok(())
        } else {
            Err(ModelError::ForeignCache)
        }
    }

    fn embed(&self, item: &InputItem, role: SequenceRole) -> Result<(Entry, Vec<f64>), ModelError> {
        let d = self.config.d_model;
        let (mut x, token, patch_object) = match item {
            InputItem::Token(id) => {
                self.config.vocab.check(*id)?;
                let object =
                    (role == SequenceRole::Visual && self.config.vocab.is_object_word(*id)).then_some(*id);
                (
                    self.weights.token_embedding[id.index()].clone(),
                    Some(*id),
                    object,
                )
            }
            InputItem::Patch(v) => {
                if v.len() != d {
                    return Err(ModelError::Dimension {
                        expected: d,
                        got: v.len(),
                    });
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(ModelError::NonFinite("patch embedding".into()));
                }
                let object = self
                    .config
                    .vocab
                    .object_words()
                    .iter()
                    .copied()
                    .find(|id| self.weights.token_embedding[id.index()] == *v);
                (v.clone(), None, object)
            }
        };
        let role_vec = if role.is_text() {
            &self.weights.text_role
        } else {
            &self.weights.visual_role
        };
        for (a, b) in x.iter_mut().zip(role_vec) {
            *a += b;
        }
        let entry = Entry {
            position: 0,
            role,
            token,
            patch_object,
            keys: Vec::new(),
            values: Vec::new(),
        };
        Ok((entry, x))
    }

    /// Runs one new position through every layer against `context`, filling
    /// in its keys and values and returning its last-layer hidden state.
    fn forward(&self, context: &[Entry], entry: &mut Entry, input: Vec<f64>) -> Vec<f64> {
        let w = &self.weights;
        let d = w.d_model;
        let dh = d / w.heads;
        let scale = (dh as f64).sqrt();
        let mut h = input;
        for (l, layer) in w.layers.iter().enumerate() {
            let q = layer.wq.left_mul(&h);
            let k = layer.wk.left_mul(&h);
            let v = layer.wv.left_mul(&h);
            let mut mixed = vec![0.0; d];
            let mut scores = Vec::with_capacity(context.len() + 1);
            for head in 0..w.heads {
                let r = head * dh..(head + 1) * dh;
                let slope = w.alibi_slopes[head];
                scores.clear();
                for e in context {
                    let dot: f64 = q[r.clone()]
                        .iter()
                        .zip(&e.keys[l][r.clone()])
                        .map(|(a, b)| a * b)
                        .sum();
                    scores.push(dot / scale - slope * (entry.position - e.position) as f64);
                }
                let own: f64 = q[r.clone()].iter().zip(&k[r.clone()]).map(|(a, b)| a * b).sum();
                scores.push(own / scale);
                let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    total += *s;
                }
                let out = &mut mixed[r.clone()];
                for (e, s) in context.iter().zip(&scores) {
                    let a = s / total;
                    for (o, val) in out.iter_mut().zip(&e.values[l][r.clone()]) {
                        *o += a * val;
                    }
                }
                let a = scores[context.len()] / total;
                for (o, val) in out.iter_mut().zip(&v[r.clone()]) {
                    *o += a * val;
                }
            }
            for (x, o) in h.iter_mut().zip(layer.wo.left_mul(&mixed)) {
                *x += o;
            }
            let mut hidden = layer.w1.left_mul(&h);
            for (u, b) in hidden.iter_mut().zip(&layer.b1) {
                *u = (*u + b).max(0.0);
            }
            for ((x, o), b) in h.iter_mut().zip(layer.w2.left_mul(&hidden)).zip(&layer.b2) {
                *x += o + b;
            }
            entry.keys.push(k);
            entry.values.push(v);
        }
        h
    }
}

impl LanguageBackend for ToyLvlm {
    type Cache = ToyCache;

    fn vocab(&self) -> &Vocabulary {
        &self.config.vocab
    }

    fn dims(&self) -> ModelDims {
        ModelDims {
            layers: self.config.layers,
            heads: self.config.heads,
            d_model: self.config.d_model,
        }
    }

    fn prefill(
        &self,
        inputs: &[InputItem],
        roles: &[SequenceRole],
    ) -> Result<PrefillResult<ToyCache>, ModelError> {
        if inputs.len() != roles.len() {
            return Err(ModelError::LengthMismatch {
                what: "inputs vs roles",
                left: inputs.len(),
                right: roles.len(),
            });
        }
        if inputs.is_empty() {
            return Err(ModelError::Contract("prefill of an empty sequence".into()));
        }
        let mut entries: Vec<Entry> = Vec::with_capacity(inputs.len());
        let mut last_hidden = Vec::with_capacity(inputs.len());
        for (i, (item, role)) in inputs.iter().zip(roles).enumerate() {
            let (mut entry, x) = self.embed(item, *role)?;
            entry.position = i;
            let h = self.forward(&entries, &mut entry, x);
            last_hidden.push(HiddenState(h));
            entries.push(entry);
        }
        let cache = ToyCache {
            model_id: self.id,
            next_position: entries.len(),
            visual_total: roles.iter().filter(|r| **r == SequenceRole::Visual).count(),
            entries,
        };
        Ok(PrefillResult {
            last_hidden,
            cache,
            roles: roles.to_vec(),
        })
    }

    fn decode_step(
        &self,
        cache: &mut ToyCache,
        token: TokenId,
        role: SequenceRole,
    ) -> Result<StepResult, ModelError> {
        self.check_cache(cache)?;
        let (mut entry, x) = self.embed(&InputItem::Token(token), role)?;
        entry.position = cache.next_position;
        let h = self.forward(&cache.entries, &mut entry, x);
        let value_vectors = HeadValues::from_layers(&entry.values, self.config.heads);
        cache.entries.push(entry);
        cache.next_position += 1;
        let hidden = HiddenState(h);
        let base = self.lm_head(&hidden)?;
        let logits = self.final_logits(&base, cache, cache.generated_count());
        Ok(StepResult {
            logits,
            new_hidden: hidden,
            value_vectors,
        })
    }

    fn lm_head(&self, hidden: &HiddenState) -> Result<LogitVector, ModelError> {
        if hidden.dim() != self.config.d_model {
            return Err(ModelError::Dimension {
                expected: self.config.d_model,
                got: hidden.dim(),
            });
        }
        LogitVector::new(self.weights.unembed.right_mul(&hidden.0))
    }

    fn value_vectors(&self, cache: &ToyCache, positions: &[usize]) -> Result<Vec<HeadValues>, ModelError> {
        self.check_cache(cache)?;
        positions
            .iter()
            .map(|&p| {
                let i = cache
                    .entries
                    .binary_search_by_key(&p, |e| e.position)
                    .map_err(|_| ModelError::PositionNotInCache(p))?;
                Ok(HeadValues::from_layers(
                    &cache.entries[i].values,
                    self.config.heads,
                ))
            })
            .collect()
    }
}
