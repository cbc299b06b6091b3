//! Weight construction for the toy model.
//!
//! The network is an ordinary decoder (token + role embeddings, attention
//! with ALiBi position bias, ReLU MLP, residual stream, linear LM head, no
//! normalization layers) whose weights are a hand-built circuit plus small
//! seeded perturbations. The circuit gives the model just enough behavior to
//! exercise every part of the decoding pipeline:
//!
//! | layer.head | role |
//! |---|---|
//! | 0.0 | at `?`, copy the queried object word's semantics into place |
//! | 0.1 | at `?`, gather "there are object patches" evidence; elsewhere, measure attention mass on punctuation (end-of-text pressure that grows with length) |
//! | 1.0 | at punctuation, mirror recently mentioned object words into the history block (recency-weighted repetition penalty) |
//! | 1.1 | at `?`, look for a patch that matches the copied semantics |
//!
//! Every head falls back to the `<s>` sink, whose value is zero on every
//! channel the head writes. Object words and their image patches share one
//! embedding row, and `W_V` is the identity plus noise, so value vectors of
//! a text word and its patches line up.
//!
//! Random stream layout, all children of `Stream::new(seed)` forked in this
//! order: 1 semantic basis, 2 token-embedding noise, 3 background noise,
//! 4 prior-bias ranking, `16 + layer` for each layer's perturbations, and
//! last 8 for the LM-head perturbation.

use serde::{Deserialize, Serialize};

use super::config::{ToyConfig, NO, QUESTION, SINK, YES};
use super::layout::Layout;
use super::rng::Stream;
use crate::model::TokenId;

/// Tunable strengths of the hand-built circuits. Routing scores that only
/// need to be "large enough" are fixed constants below.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Circuit {
    /// Norm of an object word's semantic direction.
    pub sem_scale: f64,
    /// An object patch predicts its own word with this logit margin.
    pub lm_gain: f64,
    /// Logit penalty on a word holding all of the history attention.
    pub history_penalty: f64,
    /// Attention bonus of earlier object words in the history head.
    pub history_focus: f64,
    /// Logit of every object word right after punctuation.
    pub object_after_punct: f64,
    /// Logit of `.` right after a text object word.
    pub period_after_object: f64,
    /// Termination logit after punctuation, before length pressure.
    pub eos_after_punct: f64,
    /// Extra termination logit at full punctuation attention mass.
    pub eos_pressure: f64,
    /// Termination logit right after a yes/no answer.
    pub eos_after_answer: f64,
    /// Logit of both answer words right after `?`.
    pub answer_base: f64,
    /// Extra logit for `yes` when a matching patch is found.
    pub yes_evidence: f64,
    /// Extra logit for `no` when object patches are visible at all.
    pub no_evidence: f64,
    /// Pressure head: attention score of the sink and of punctuation.
    pub pressure_sink: f64,
    pub pressure_punct: f64,
    /// ALiBi slopes, one per head.
    pub alibi_slopes: [f64; 2],
}

impl Default for Circuit {
    fn default() -> Self {
        Self {
            sem_scale: 5.0,
            lm_gain: 10.0,
            history_penalty: 15.0,
            history_focus: 4.0,
            object_after_punct: 50.0,
            period_after_object: 100.0,
            eos_after_punct: 48.0,
            eos_pressure: 4.0,
            eos_after_answer: 100.0,
            answer_base: 100.0,
            yes_evidence: 4.0,
            no_evidence: 2.0,
            pressure_sink: 10.0,
            pressure_punct: 6.0,
            alibi_slopes: [0.25, 0.0625],
        }
    }
}

const SINK_SCORE: f64 = 200.0;
const COPY_SCORE: f64 = 30.0;
const PATCH_SCORE: f64 = 30.0;
const PATCH_SINK_SCORE: f64 = 15.0;
const TEXT_EXCLUSION: f64 = 60.0;

const QK_NOISE: f64 = 1e-4;
const WEIGHT_NOISE: f64 = 1e-3;
const EMBED_NOISE: f64 = 2e-2;
const MLP_NOISE: f64 = 2e-2;

/// Row-major dense matrix used as `x · W`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn add(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] += v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `x · W` for a row vector `x` of length `rows`.
    pub fn left_mul(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &xr) in x.iter().enumerate() {
            if xr == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(self.row(r)) {
                *o += xr * w;
            }
        }
        out
    }

    /// `W · x` for a column vector `x` of length `cols`.
    pub fn right_mul(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|r| self.row(r).iter().zip(x).map(|(w, v)| w * v).sum())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyWeights {
    /// One row per vocabulary token; object-word rows double as the
    /// embeddings of their image patches.
    pub token_embedding: Vec<Vec<f64>>,
    pub background_embedding: Vec<f64>,
    /// Added to every text position (system, instruction, generated).
    pub text_role: Vec<f64>,
    /// Added to every image-patch position.
    pub visual_role: Vec<f64>,
    pub layers: Vec<LayerWeights>,
    /// `|Φ| × d`; logits are `unembed · h`.
    pub unembed: Matrix,
    pub alibi_slopes: Vec<f64>,
    pub heads: usize,
    pub d_model: usize,
    /// Fixed per-seed skew added by the prior-bias pathology.
    pub prior_bias: Vec<f64>,
}

/// Attention pattern builder for one head: each call adds one coordinate of
/// the head's query/key space with the given query and key read-outs, scaled
/// so the attention logit equals the designed score.
struct HeadBuilder<'a> {
    wq: &'a mut Matrix,
    wk: &'a mut Matrix,
    base: usize,
    next: usize,
    scale: f64,
}

impl<'a> HeadBuilder<'a> {
    fn new(layer: &'a mut LayerWeights, head: usize, head_dim: usize) -> Self {
        Self {
            wq: &mut layer.wq,
            wk: &mut layer.wk,
            base: head * head_dim,
            next: 0,
            scale: (head_dim as f64).sqrt(),
        }
    }

    fn coord(&mut self, query: &[(usize, f64)], key: &[(usize, f64)]) {
        let c = self.base + self.next;
        self.next += 1;
        for &(dim, w) in query {
            self.wq.add(dim, c, w * self.scale);
        }
        for &(dim, w) in key {
            self.wk.add(dim, c, w);
        }
    }
}

fn orthonormal_basis(n: usize, rng: &mut Stream) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(n);
    while basis.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= dot * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

pub fn build_weights(config: &ToyConfig) -> ToyWeights {
    let vocab = &config.vocab;
    let c = &config.circuit;
    let d = config.d_model;
    let dh = d / config.heads;
    let objects: Vec<TokenId> = vocab.object_words().iter().copied().collect();
    let lay = Layout::new(objects.len(), d);
    let mut root = Stream::new(config.seed);

    // Embeddings.
    let mut basis_rng = root.fork(1);
    let basis = orthonormal_basis(objects.len(), &mut basis_rng);
    let mut embed_rng = root.fork(2);
    let sink = vocab.id(SINK).unwrap();
    let question = vocab.id(QUESTION).unwrap();
    let answers = [vocab.id(YES).unwrap(), vocab.id(NO).unwrap()];
    let mut token_embedding = Vec::with_capacity(vocab.len());
    for i in 0..vocab.len() {
        let id = TokenId(i as u32);
        let mut e = vec![0.0; d];
        e[lay.one()] = 1.0;
        if let Some(k) = objects.iter().position(|&o| o == id) {
            for (j, b) in basis[k].iter().enumerate() {
                e[lay.sem(j)] = c.sem_scale * b;
            }
            e[lay.obj()] = 1.0;
            e[lay.obj_mirror()] = 1.0;
        } else {
            for j in lay.noisy() {
                e[j] = EMBED_NOISE * embed_rng.normal();
            }
            if vocab.is_punctuation(id) {
                e[lay.punct()] = 1.0;
                e[lay.punct_mirror()] = 1.0;
            } else if id == question {
                e[lay.question()] = 1.0;
            } else if id == sink {
                e[lay.sink()] = 1.0;
                e[lay.sink_mirror()] = 1.0;
            } else if answers.contains(&id) {
                e[lay.answer()] = 1.0;
            }
        }
        token_embedding.push(e);
    }
    let mut bg_rng = root.fork(3);
    let mut background_embedding = vec![0.0; d];
    background_embedding[lay.one()] = 1.0;
    background_embedding[lay.background()] = 1.0;
    for j in lay.spare() {
        background_embedding[j] = EMBED_NOISE * bg_rng.normal();
    }
    let mut text_role = vec![0.0; d];
    text_role[lay.text()] = 1.0;
    let visual_role = vec![0.0; d];

    // Prior skew: a random popularity ranking over object words with weight
    // 1 / (rank + 1), plus an affirmative skew toward "yes".
    let mut bias_rng = root.fork(4);
    let mut ranking = objects.clone();
    bias_rng.shuffle(&mut ranking);
    let mut prior_bias = vec![0.0; vocab.len()];
    for (rank, id) in ranking.iter().enumerate() {
        prior_bias[id.index()] = 1.0 / (rank as f64 + 1.0);
    }
    prior_bias[answers[0].index()] = 1.0;

    let ffn = 4 * d;
    let mut layers = Vec::with_capacity(config.layers);
    for l in 0..config.layers {
        let mut rng = root.fork(16 + l as u64);
        let mut layer = LayerWeights {
            wq: Matrix::zeros(d, d),
            wk: Matrix::zeros(d, d),
            wv: Matrix::identity(d),
            wo: Matrix::zeros(d, d),
            w1: Matrix::zeros(d, ffn),
            b1: vec![0.0; ffn],
            w2: Matrix::zeros(ffn, d),
            b2: vec![0.0; d],
        };
        match l {
            0 => build_first_layer(&mut layer, &lay, dh, c),
            1 => build_second_layer(&mut layer, &lay, dh, c),
            _ => build_idle_layer(&mut layer, &lay, dh),
        }
        perturb_layer(&mut layer, &lay, &mut rng, l == 0);
        layers.push(layer);
    }

    // LM head.
    let mut unembed = Matrix::zeros(vocab.len(), d);
    for (k, id) in objects.iter().enumerate() {
        for (j, b) in basis[k].iter().enumerate() {
            unembed.set(id.index(), lay.sem(j), c.lm_gain / c.sem_scale * b);
            unembed.set(id.index(), lay.hist(j), -c.history_penalty / c.sem_scale * b);
        }
    }
    for id in &objects {
        unembed.set(id.index(), lay.punct(), c.object_after_punct);
    }
    let period = vocab
        .id(".")
        .unwrap_or_else(|| *vocab.punctuation().iter().next().unwrap());
    unembed.set(period.index(), lay.object_text(), c.period_after_object);
    let eos = vocab.eos();
    unembed.set(eos.index(), lay.punct(), c.eos_after_punct);
    unembed.set(eos.index(), lay.eos_pressure(), c.eos_pressure);
    unembed.set(eos.index(), lay.answer(), c.eos_after_answer);
    unembed.set(answers[0].index(), lay.question(), c.answer_base);
    unembed.set(answers[0].index(), lay.yes_evidence(), c.yes_evidence);
    unembed.set(answers[1].index(), lay.question(), c.answer_base);
    unembed.set(answers[1].index(), lay.no_evidence(), c.no_evidence);
    let mut head_rng = root.fork(8);
    for v in unembed.data.iter_mut() {
        *v += WEIGHT_NOISE * head_rng.normal();
    }

    ToyWeights {
        token_embedding,
        background_embedding,
        text_role,
        visual_role,
        layers,
        unembed,
        alibi_slopes: c.alibi_slopes.to_vec(),
        heads: config.heads,
        d_model: d,
        prior_bias,
    }
}

fn sink_fallback(h: &mut HeadBuilder<'_>, lay: &Layout, score: f64, off_when: &[(usize, f64)]) {
    let mut query = vec![(lay.one(), score)];
    query.extend(off_when.iter().map(|&(dim, s)| (dim, s - score)));
    h.coord(&query, &[(lay.sink(), 1.0)]);
}

fn build_first_layer(layer: &mut LayerWeights, lay: &Layout, dh: usize, c: &Circuit) {
    // Head 0: at `?`, attend to the text object word and copy its semantics.
    {
        let mut h = HeadBuilder::new(layer, 0, dh);
        h.coord(
            &[(lay.question(), COPY_SCORE)],
            &[(lay.obj(), 1.0), (lay.text(), 1.0)],
        );
        sink_fallback(&mut h, lay, SINK_SCORE, &[(lay.question(), 0.0)]);
    }
    for k in 0..lay.n_obj {
        layer.wo.set(lay.sem(k), lay.sem(k), 1.0);
    }

    // Head 1: at `?`, attend to object patches (sink when there are none);
    // elsewhere, split attention between the sink and punctuation.
    {
        let mut h = HeadBuilder::new(layer, 1, dh);
        sink_fallback(
            &mut h,
            lay,
            c.pressure_sink,
            &[(lay.question(), PATCH_SINK_SCORE)],
        );
        h.coord(
            &[(lay.one(), c.pressure_punct), (lay.question(), -c.pressure_punct)],
            &[(lay.punct(), 1.0)],
        );
        h.coord(
            &[(lay.question(), PATCH_SCORE)],
            &[(lay.obj(), 1.0), (lay.text(), -1.0)],
        );
    }
    layer.wo.set(lay.punct_mirror(), lay.eos_pressure(), 1.0);
    layer.wo.set(lay.obj_mirror(), lay.no_evidence(), 1.0);

    // MLP unit 0: object word AND text role.
    layer.w1.set(lay.obj(), 0, 1.0);
    layer.w1.set(lay.text(), 0, 1.0);
    layer.b1[0] = -1.0;
    layer.w2.set(0, lay.object_text(), 1.0);
}

fn build_second_layer(layer: &mut LayerWeights, lay: &Layout, dh: usize, c: &Circuit) {
    // Head 0: at punctuation, attend to earlier text object words (recency
    // via ALiBi) and mirror their semantics into the history block.
    {
        let mut h = HeadBuilder::new(layer, 0, dh);
        h.coord(&[(lay.punct(), c.history_focus)], &[(lay.object_text(), 1.0)]);
        sink_fallback(&mut h, lay, SINK_SCORE, &[(lay.punct(), 0.0)]);
    }
    for k in 0..lay.n_obj {
        layer.wo.set(lay.sem(k), lay.hist(k), 1.0);
    }

    // Head 1: match the semantics present at the query against image
    // patches; text positions are excluded, the sink catches misses.
    {
        let mut h = HeadBuilder::new(layer, 1, dh);
        let gain = PATCH_SCORE / (c.sem_scale * c.sem_scale);
        for k in 0..lay.n_obj {
            h.coord(&[(lay.sem(k), gain)], &[(lay.sem(k), 1.0)]);
        }
        h.coord(
            &[(lay.one(), -TEXT_EXCLUSION)],
            &[(lay.text(), 1.0), (lay.sink(), -1.0)],
        );
        h.coord(&[(lay.one(), PATCH_SINK_SCORE)], &[(lay.sink(), 1.0)]);
    }
    layer.wo.set(lay.obj_mirror(), lay.yes_evidence(), 1.0);
}

fn build_idle_layer(layer: &mut LayerWeights, lay: &Layout, dh: usize) {
    for head in 0..2 {
        let mut h = HeadBuilder::new(layer, head, dh);
        sink_fallback(&mut h, lay, SINK_SCORE, &[]);
    }
}

fn perturb_layer(layer: &mut LayerWeights, lay: &Layout, rng: &mut Stream, first: bool) {
    for v in layer.wq.data.iter_mut() {
        *v += QK_NOISE * rng.normal();
    }
    for v in layer.wk.data.iter_mut() {
        *v += QK_NOISE * rng.normal();
    }
    for v in layer.wv.data.iter_mut() {
        *v += WEIGHT_NOISE * rng.normal();
    }
    let noisy: Vec<usize> = lay.noisy().collect();
    for r in 0..layer.wo.rows {
        for &c in &noisy {
            layer.wo.add(r, c, WEIGHT_NOISE * rng.normal());
        }
    }
    // Random MLP units; unit 0 of the first layer is reserved.
    let start = usize::from(first);
    for u in start..layer.w1.cols {
        for r in 0..layer.w1.rows {
            layer.w1.set(r, u, MLP_NOISE * rng.normal());
        }
        for &c in &noisy {
            layer.w2.set(u, c, MLP_NOISE * rng.normal());
        }
    }
}
