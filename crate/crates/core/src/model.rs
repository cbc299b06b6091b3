//! The contract a language backend satisfies so the decoding engine can run
//! prefill, two independent decode branches over subsets of one KV cache,
//! LM-head projection and value-projection lookups without knowing anything
//! else about the model.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prob::LogitVector;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("length mismatch: {what} ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },
    #[error("token id {0} is outside the vocabulary")]
    InvalidToken(u32),
    #[error("unknown word {0:?}")]
    UnknownWord(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("cache handle belongs to a different model instance")]
    ForeignCache,
    #[error("position {0} is not retained in this cache")]
    PositionNotInCache(usize),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Index into the vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// The discrete symbol space, with the termination token, punctuation marks
/// and the object-word subset the evaluation harness scores against.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    eos: TokenId,
    punctuation: BTreeSet<TokenId>,
    object_words: BTreeSet<TokenId>,
}

impl Vocabulary {
    pub fn new(
        tokens: Vec<String>,
        eos: TokenId,
        punctuation: BTreeSet<TokenId>,
        object_words: BTreeSet<TokenId>,
    ) -> Result<Self, ModelError> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), TokenId(i as u32)).is_some() {
                return Err(ModelError::Config(format!("duplicate token string {t:?}")));
            }
        }
        let vocab = Self {
            tokens,
            index,
            eos,
            punctuation,
            object_words,
        };
        for id in std::iter::once(&vocab.eos)
            .chain(&vocab.punctuation)
            .chain(&vocab.object_words)
        {
            vocab.check(*id)?;
        }
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn check(&self, id: TokenId) -> Result<TokenId, ModelError> {
        if id.index() < self.tokens.len() {
            Ok(id)
        } else {
            Err(ModelError::InvalidToken(id.0))
        }
    }

    pub fn word(&self, id: TokenId) -> &str {
        &self.tokens[id.index()]
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn require(&self, word: &str) -> Result<TokenId, ModelError> {
        self.id(word)
            .ok_or_else(|| ModelError::UnknownWord(word.to_string()))
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    pub fn is_punctuation(&self, id: TokenId) -> bool {
        self.punctuation.contains(&id)
    }

    pub fn is_object_word(&self, id: TokenId) -> bool {
        self.object_words.contains(&id)
    }

    pub fn punctuation(&self) -> &BTreeSet<TokenId> {
        &self.punctuation
    }

    pub fn object_words(&self) -> &BTreeSet<TokenId> {
        &self.object_words
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Whitespace tokenization; every piece must be a vocabulary entry.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>, ModelError> {
        text.split_whitespace().map(|w| self.require(w)).collect()
    }

    /// Joins words with single spaces, skipping the termination token.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .filter(|&&id| id != self.eos)
            .map(|&id| self.word(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// What a cached position is. Every position carries exactly one role.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SequenceRole {
    System,
    Visual,
    Instruction,
    Generated,
}

impl SequenceRole {
    pub fn is_text(self) -> bool {
        !matches!(self, SequenceRole::Visual)
    }
}

/// One prefill input: a vocabulary token or an already-embedded image patch.
#[derive(Debug, Clone, PartialEq)]
pub enum InputItem {
    Token(TokenId),
    Patch(Vec<f64>),
}

/// A full prompt: items and their roles, aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub inputs: Vec<InputItem>,
    pub roles: Vec<SequenceRole>,
}

impl Prompt {
    pub fn new(inputs: Vec<InputItem>, roles: Vec<SequenceRole>) -> Result<Self, ModelError> {
        if inputs.len() != roles.len() {
            return Err(ModelError::LengthMismatch {
                what: "inputs vs roles",
                left: inputs.len(),
                right: roles.len(),
            });
        }
        Ok(Self { inputs, roles })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Positions with role `Visual`.
    pub fn visual_positions(&self) -> Vec<usize> {
        self.roles
            .iter()
            .enumerate()
            .filter(|(_, r)| **r == SequenceRole::Visual)
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState(pub Vec<f64>);

impl HiddenState {
    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

/// Shape of a backend, as far as the engine needs to know.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
}

impl ModelDims {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Value projections `h W_V` of one position, for every layer and head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadValues {
    layers: usize,
    heads: usize,
    head_dim: usize,
    data: Vec<f64>,
}

impl HeadValues {
    /// `per_layer[l]` is the full `d_model` value row of layer `l`; heads are
    /// contiguous slices of it.
    pub fn from_layers(per_layer: &[Vec<f64>], heads: usize) -> Self {
        let layers = per_layer.len();
        let d = per_layer.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(layers * d);
        for row in per_layer {
            data.extend_from_slice(row);
        }
        Self {
            layers,
            heads,
            head_dim: d / heads.max(1),
            data,
        }
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn get(&self, layer: usize, head: usize) -> &[f64] {
        let start = (layer * self.heads + head) * self.head_dim;
        &self.data[start..start + self.head_dim]
    }
}

#[derive(Debug, Clone)]
pub struct PrefillResult<C> {
    /// Last-layer hidden state of every input position.
    pub last_hidden: Vec<HiddenState>,
    pub cache: C,
    pub roles: Vec<SequenceRole>,
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub logits: LogitVector,
    pub new_hidden: HiddenState,
    pub value_vectors: HeadValues,
}

/// A KV cache whose entries remember their original sequence position.
pub trait KvCache: Clone + Send + Sync {
    /// Original indices of the retained positions, ascending.
    fn positions(&self) -> Vec<usize>;

    fn role_at(&self, position: usize) -> Option<SequenceRole>;

    /// Number of retained `Generated` positions.
    fn generated_count(&self) -> usize;

    /// A new cache holding only `keep`; nothing is recomputed and positions
    /// keep their original indices.
    fn select(&self, keep: &BTreeSet<usize>) -> Result<Self, ModelError>;

    fn len(&self) -> usize {
        self.positions().len()
    }

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A language backend the engine can drive. Weights are immutable after
/// construction, so one backend may serve any number of caches concurrently.
pub trait LanguageBackend: Sync {
    type Cache: KvCache;

    fn vocab(&self) -> &Vocabulary;

    fn dims(&self) -> ModelDims;

    /// Processes the whole input in one pass.
    fn prefill(
        &self,
        inputs: &[InputItem],
        roles: &[SequenceRole],
    ) -> Result<PrefillResult<Self::Cache>, ModelError>;

    /// Runs `token` against the retained positions of `cache`, appends it
    /// and returns the next-token logits.
    fn decode_step(
        &self,
        cache: &mut Self::Cache,
        token: TokenId,
        role: SequenceRole,
    ) -> Result<StepResult, ModelError>;

    fn lm_head(&self, hidden: &HiddenState) -> Result<LogitVector, ModelError>;

    fn value_vectors(&self, cache: &Self::Cache, positions: &[usize]) -> Result<Vec<HeadValues>, ModelError>;
}

/// Splits a prompt into the prefill part and its final token, which is fed
/// through `decode_step` to produce the first next-token distribution.
/// Prompt head plus the final token and its role.
pub type PromptSplit<'a> = (&'a [InputItem], &'a [SequenceRole], TokenId, SequenceRole);

pub fn split_prompt<'a>(
    inputs: &'a [InputItem],
    roles: &'a [SequenceRole],
) -> Result<PromptSplit<'a>, ModelError> {
    if inputs.len() != roles.len() {
        return Err(ModelError::LengthMismatch {
            what: "inputs vs roles",
            left: inputs.len(),
            right: roles.len(),
        });
    }
    match inputs.split_last() {
        Some((InputItem::Token(last), head)) if !head.is_empty() => {
            Ok((head, &roles[..head.len()], *last, roles[head.len()]))
        }
        Some((InputItem::Token(_), _)) => Err(ModelError::Contract(
            "prompt needs at least one position before its final token".into(),
        )),
        Some((InputItem::Patch(_), _)) => {
            Err(ModelError::Contract("prompt must end with a text token".into()))
        }
        None => Err(ModelError::Contract("empty prompt".into())),
    }
}

/// Plain greedy decoding on the unmodified sequence: the reference every
/// mitigated run is compared against.
pub fn greedy_decode<B: LanguageBackend>(
    backend: &B,
    inputs: &[InputItem],
    roles: &[SequenceRole],
    max_new_tokens: usize,
) -> Result<Vec<TokenId>, ModelError> {
    let (head, head_roles, last, last_role) = split_prompt(inputs, roles)?;
    let mut cache = backend.prefill(head, head_roles)?.cache;
    let eos = backend.vocab().eos();
    let mut out = Vec::new();
    let mut token = last;
    let mut role = last_role;
    while out.len() < max_new_tokens {
        let step = backend.decode_step(&mut cache, token, role)?;
        let next = step.logits.softmax().argmax();
        out.push(next);
        if next == eos {
            break;
        }
        token = next;
        role = SequenceRole::Generated;
    }
    Ok(out)
}
