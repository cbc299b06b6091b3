//! Watching for the point where generation stops using the image.
//!
//! A generated token is visually relevant when its value-value attention
//! over the clear image tokens is markedly sharper than its predecessor's.
//! For each relevant word the tracker keeps the posterior/prior JS
//! divergence at its first and latest emission; a shrinking divergence means
//! the grounded distribution is collapsing onto the prior, and the
//! termination logit is boosted in proportion.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::{HeadValues, TokenId};
use crate::prob::{entropy, softmax, LogitVector, ProbVector};

/// Zero-denominator guard inside the KL terms.
pub const JS_EPSILON: f64 = 1e-12;
pub const DEFAULT_DELTA: f64 = 0.05;
pub const DEFAULT_LAMBDA: f64 = 1.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionProfile {
    /// One weight per clear visual position, in the order given.
    pub weights: ProbVector,
    pub entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceEvent {
    pub token_word: String,
    pub step: usize,
    pub delta_e: f64,
    pub relevant: bool,
}

/// Value-value attention of one text token over the clear visual tokens:
/// per layer and head `softmax(v_t · v_j / √d_head)`, averaged over all
/// layers and heads. `None` when there are no visual tokens.
pub fn vv_attention(text: &HeadValues, visual: &[HeadValues]) -> Option<AttentionProfile> {
    if visual.is_empty() {
        return None;
    }
    let (layers, heads) = (text.layers(), text.heads());
    let scale = (text.head_dim() as f64).sqrt();
    let mut avg = vec![0.0; visual.len()];
    let mut scores = vec![0.0; visual.len()];
    for l in 0..layers {
        for h in 0..heads {
            let t = text.get(l, h);
            for (s, v) in scores.iter_mut().zip(visual) {
                *s = t.iter().zip(v.get(l, h)).map(|(a, b)| a * b).sum::<f64>() / scale;
            }
            for (a, w) in avg.iter_mut().zip(softmax(&scores)) {
                *a += w;
            }
        }
    }
    let total: f64 = avg.iter().sum();
    for a in &mut avg {
        *a /= total;
    }
    let entropy = entropy(&avg);
    Some(AttentionProfile {
        weights: ProbVector::new(avg).expect("averaged softmax rows form a distribution"),
        entropy,
    })
}

/// `ΔE = cur − prev`; relevant iff `ΔE < −δ`.
pub fn relevance_step(
    word: &str,
    step: usize,
    prev_entropy: f64,
    cur_entropy: f64,
    delta: f64,
) -> RelevanceEvent {
    let delta_e = cur_entropy - prev_entropy;
    RelevanceEvent {
        token_word: word.to_string(),
        step,
        delta_e,
        relevant: delta_e < -delta,
    }
}

fn kl_guarded(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .filter(|(x, _)| **x > 0.0)
        .map(|(x, y)| x * (x / y.max(JS_EPSILON)).ln())
        .sum()
}

/// Jensen–Shannon divergence in nats against the midpoint mixture; always
/// within `[0, ln 2]`.
pub fn js_divergence(a: &ProbVector, b: &ProbVector) -> f64 {
    let (a, b) = (a.as_slice(), b.as_slice());
    assert_eq!(
        a.len(),
        b.len(),
        "js_divergence of vectors with different lengths"
    );
    let m: Vec<f64> = a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect();
    let js = 0.5 * (kl_guarded(a, &m) + kl_guarded(b, &m));
    js.clamp(0.0, std::f64::consts::LN_2)
}

/// `½KL(A‖B) + ½KL(B‖A)` with zero denominators replaced by
/// [`JS_EPSILON`]. Unbounded; for disjoint supports it grows like
/// `ln(1/ε)`.
pub fn symmetric_kl(a: &ProbVector, b: &ProbVector) -> f64 {
    let (a, b) = (a.as_slice(), b.as_slice());
    assert_eq!(a.len(), b.len(), "symmetric_kl of vectors with different lengths");
    (0.5 * (kl_guarded(a, b) + kl_guarded(b, a))).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JsRecord {
    pub first: f64,
    pub last: f64,
}

impl JsRecord {
    pub fn delta(&self) -> f64 {
        (self.first - self.last).max(0.0)
    }
}

/// Per-word first/latest divergence, keyed by the decoded word.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CollapseTracker {
    entries: BTreeMap<String, JsRecord>,
}

impl CollapseTracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, word: &str, js: f64) {
        self.entries
            .entry(word.to_string())
            .and_modify(|r| r.last = js)
            .or_insert(JsRecord { first: js, last: js });
    }

    pub fn get(&self, word: &str) -> Option<JsRecord> {
        self.entries.get(word).copied()
    }

    pub fn entries(&self) -> &BTreeMap<String, JsRecord> {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Mean of `max(JS_f − JS_l, 0)` over all entries; 0 when empty.
    pub fn mean_delta_js(&self) -> f64 {
        if self.entries.is_empty() {
            return 0.0;
        }
        self.entries.values().map(JsRecord::delta).sum::<f64>() / self.entries.len() as f64
    }
}

/// Scales the termination logit by `1 + λ·ΔJS̄` when `gate` holds. With
/// `monotone`, the scaling applies to `exp(logit)` instead, so a negative
/// logit still gains probability.
pub fn scale_eos(
    logits: &LogitVector,
    eos: TokenId,
    lambda: f64,
    mean_delta_js: f64,
    gate: bool,
    monotone: bool,
) -> LogitVector {
    let mut out = logits.clone();
    if gate {
        let factor = 1.0 + lambda * mean_delta_js;
        let l = &mut out.as_mut_slice()[eos.index()];
        if monotone {
            *l += factor.ln();
        } else {
            *l *= factor;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn tracker_example() {
        let mut t = CollapseTracker::new();
        t.record("cat", 0.5);
        assert_eq!(t.get("cat").unwrap().delta(), 0.0);
        t.record("cat", 0.2);
        assert_eq!(t.get("cat").unwrap().delta(), 0.5 - 0.2);
        t.record("dog", 0.3);
        t.record("dog", 0.4);
        assert_eq!(t.get("dog").unwrap().delta(), 0.0);
        assert_eq!(t.mean_delta_js(), 0.15);
        assert_eq!(CollapseTracker::new().mean_delta_js(), 0.0);
    }

    #[test]
    fn eos_scaling() {
        let l = LogitVector::new(vec![2.0, 1.0]).unwrap();
        let s = scale_eos(&l, TokenId(0), 1.5, 0.2, true, false);
        assert_eq!(s.as_slice(), &[2.6, 1.0]);
        assert_eq!(scale_eos(&l, TokenId(0), 1.5, 0.2, false, false), l);
        assert_eq!(scale_eos(&l, TokenId(0), 1.5, 0.0, true, false), l);
        let neg = LogitVector::new(vec![-2.0, 1.0]).unwrap();
        assert!(scale_eos(&neg, TokenId(0), 1.5, 0.2, true, false).as_slice()[0] < -2.0);
        assert!(scale_eos(&neg, TokenId(0), 1.5, 0.2, true, true).as_slice()[0] > -2.0);
    }

    #[test]
    fn js_values() {
        let a = pv(&[0.5, 0.5]);
        assert_eq!(js_divergence(&a, &a), 0.0);
        let x = pv(&[1.0, 0.0]);
        let y = pv(&[0.0, 1.0]);
        assert!((js_divergence(&x, &y) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(symmetric_kl(&x, &y) > 20.0);
        let b = pv(&[0.25, 0.75]);
        let m = [0.375, 0.625];
        let want = 0.5 * (0.5 * (0.5f64 / m[0]).ln() + 0.5 * (0.5f64 / m[1]).ln())
            + 0.5 * (0.25 * (0.25f64 / m[0]).ln() + 0.75 * (0.75f64 / m[1]).ln());
        assert!((js_divergence(&a, &b) - want).abs() < 1e-15);
    }

    #[test]
    fn relevance_is_strict() {
        assert!(relevance_step("cat", 1, 2.0, 1.9, 0.05).relevant);
        assert!(!relevance_step("cat", 1, 2.0, 2.0, 0.05).relevant);
        let boundary = relevance_step("cat", 1, 0.05, 0.0, 0.05);
        assert_eq!(boundary.delta_e, -0.05);
        assert!(!boundary.relevant);
    }

    #[test]
    fn vv_attention_basics() {
        let t = HeadValues::from_layers(&[vec![1.0, 0.0, 0.0, 1.0]], 2);
        let one = vv_attention(&t, std::slice::from_ref(&t)).unwrap();
        assert_eq!(one.weights.as_slice(), &[1.0]);
        assert_eq!(one.entropy, 0.0);
        let two = vv_attention(&t, &[t.clone(), t.clone()]).unwrap();
        assert_eq!(two.weights.as_slice(), &[0.5, 0.5]);
        assert!((two.entropy - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(vv_attention(&t, &[]).is_none());
    }
}
