use std::collections::BTreeSet;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::weights::Circuit;
use crate::model::{ModelError, TokenId, Vocabulary};

/// Object words, in the order their semantic basis vectors are drawn.
pub const OBJECT_WORDS: [&str; 24] = [
    "cat", "dog", "bottle", "person", "chair", "table", "car", "bicycle", "bird", "horse", "cup", "book",
    "clock", "bench", "couch", "bed", "tv", "laptop", "phone", "umbrella", "bowl", "pizza", "kite", "boat",
];

const FILLER_WORDS: [&str; 22] = [
    "and", "with", "of", "on", "near", "next", "to", "large", "small", "red", "blue", "white", "black",
    "green", "sitting", "standing", "room", "street", "left", "right", "front", "behind",
];

/// Words the prompts are built from.
pub const INSTRUCTION_WORDS: [&str; 11] = [
    "please", "help", "me", "describe", "the", "image", "in", "detail", "is", "there", "a",
];

pub const SINK: &str = "<s>";
pub const EOS: &str = "<eos>";
pub const QUESTION: &str = "?";
pub const YES: &str = "yes";
pub const NO: &str = "no";
pub const PUNCTUATION: [&str; 2] = [".", ","];

/// The 64-token default vocabulary.
pub fn default_vocabulary() -> Vocabulary {
    let mut tokens: Vec<String> = vec![SINK.into(), EOS.into()];
    tokens.extend(PUNCTUATION.iter().map(|s| s.to_string()));
    tokens.extend([QUESTION, YES, NO].iter().map(|s| s.to_string()));
    tokens.extend(INSTRUCTION_WORDS.iter().map(|s| s.to_string()));
    let first_object = tokens.len();
    tokens.extend(OBJECT_WORDS.iter().map(|s| s.to_string()));
    tokens.extend(FILLER_WORDS.iter().map(|s| s.to_string()));
    let objects: BTreeSet<TokenId> = (first_object..first_object + OBJECT_WORDS.len())
        .map(|i| TokenId(i as u32))
        .collect();
    Vocabulary::new(tokens, TokenId(1), [TokenId(2), TokenId(3)].into(), objects)
        .expect("default vocabulary is well formed")
}

/// Strength of the three injected failure modes, plus the scene generator's
/// background ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Knobs {
    /// Weight of the fixed language-prior skew (`β_p ≥ 0`).
    pub beta_p: f64,
    /// Per-generated-token decay of visual grounding (`γ ∈ (0, 1]`).
    pub gamma: f64,
    /// Expected fraction of background cells in generated scenes (`ρ`).
    pub rho: f64,
    /// Weight of visual grounding on object words (`β_v ≥ 0`).
    pub beta_v: f64,
}

impl Default for Knobs {
    /// Documented defaults: strong enough to make vanilla decoding answer
    /// "yes" to absent objects and drift into hallucinated objects in long
    /// captions.
    fn default() -> Self {
        Self {
            beta_p: 3.0,
            gamma: 0.95,
            rho: 0.4,
            beta_v: 60.0,
        }
    }
}

impl Knobs {
    /// No prior skew, no grounding, no decay.
    pub fn off() -> Self {
        Self {
            beta_p: 0.0,
            gamma: 1.0,
            rho: Knobs::default().rho,
            beta_v: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.beta_p >= 0.0 && self.beta_p.is_finite()) {
            return Err(ModelError::Config(format!(
                "beta_p must be >= 0, got {}",
                self.beta_p
            )));
        }
        if !(self.beta_v >= 0.0 && self.beta_v.is_finite()) {
            return Err(ModelError::Config(format!(
                "beta_v must be >= 0, got {}",
                self.beta_v
            )));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(ModelError::Config(format!(
                "gamma must be in (0, 1], got {}",
                self.gamma
            )));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(ModelError::Config(format!(
                "rho must be in [0, 1], got {}",
                self.rho
            )));
        }
        Ok(())
    }

    /// Applies `key=value` overrides separated by commas, e.g.
    /// `beta_p=2,gamma=0.9`.
    pub fn with_overrides(mut self, spec: &str) -> Result<Self, ModelError> {
        for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| ModelError::Config(format!("expected key=value, got {part:?}")))?;
            let value: f64 = value
                .trim()
                .parse()
                .map_err(|_| ModelError::Config(format!("bad number in {part:?}")))?;
            match key.trim() {
                "beta_p" => self.beta_p = value,
                "gamma" => self.gamma = value,
                "rho" => self.rho = value,
                "beta_v" => self.beta_v = value,
                other => return Err(ModelError::Config(format!("unknown knob {other:?}"))),
            }
        }
        self.validate()?;
        Ok(self)
    }
}

impl FromStr for Knobs {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Knobs::default().with_overrides(s)
    }
}

#[derive(Debug, Clone)]
pub struct ToyConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub vocab: Vocabulary,
    pub seed: u64,
    pub knobs: Knobs,
    pub circuit: Circuit,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 2,
            d_model: 64,
            vocab: default_vocabulary(),
            seed: 0,
            knobs: Knobs::default(),
            circuit: Circuit::default(),
        }
    }
}

impl ToyConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn with_knobs(mut self, knobs: Knobs) -> Self {
        self.knobs = knobs;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.knobs.validate()?;
        if self.layers == 0 {
            return Err(ModelError::Config("at least one layer is required".into()));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(ModelError::Config(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        // The hand-built circuits live in two head-sized halves of the
        // residual stream: semantics plus token features in the first,
        // history plus derived channels in the second.
        if self.heads != 2 {
            return Err(ModelError::Config(format!(
                "the toy circuits need exactly 2 heads, got {}",
                self.heads
            )));
        }
        let needed = self.vocab.object_words().len() + super::layout::FEATURES_PER_HALF;
        if self.d_model / 2 < needed {
            return Err(ModelError::Config(format!(
                "d_model {} too small: each half needs {} channels",
                self.d_model, needed
            )));
        }
        for word in [SINK, QUESTION, YES, NO] {
            self.vocab.require(word)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_vocabulary_has_64_tokens() {
        let v = default_vocabulary();
        assert_eq!(v.len(), 64);
        assert_eq!(v.word(v.eos()), EOS);
        assert_eq!(v.object_words().len(), 24);
        assert!(v.is_punctuation(v.require(".").unwrap()));
    }

    #[test]
    fn knob_overrides_parse_and_validate() {
        let k: Knobs = "beta_p=1.5, gamma=0.9".parse().unwrap();
        assert_eq!(k.beta_p, 1.5);
        assert_eq!(k.gamma, 0.9);
        assert!("gamma=0".parse::<Knobs>().is_err());
        assert!("rho=1.5".parse::<Knobs>().is_err());
        assert!("alpha=1".parse::<Knobs>().is_err());
    }

    #[test]
    fn config_rejects_bad_shapes() {
        for c in [
            ToyConfig {
                d_model: 63,
                ..ToyConfig::default()
            },
            ToyConfig {
                d_model: 32,
                ..ToyConfig::default()
            },
            ToyConfig {
                layers: 0,
                ..ToyConfig::default()
            },
        ] {
            assert!(c.validate().is_err());
        }
        assert!(ToyConfig::default().validate().is_ok());
    }
}
