use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::engine::{GenerationResult, StopReason};
use crate::model::{TokenId, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Answer {
    Yes,
    No,
}

impl Answer {
    pub fn from_present(present: bool) -> Self {
        if present {
            Answer::Yes
        } else {
            Answer::No
        }
    }

    /// Case-insensitive match against "yes" / "no".
    pub fn parse(word: &str) -> Option<Self> {
        if word.eq_ignore_ascii_case("yes") {
            Some(Answer::Yes)
        } else if word.eq_ignore_ascii_case("no") {
            Some(Answer::No)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub scene_id: usize,
    pub word: String,
    pub expected: Answer,
    /// `None` when the first generated token is neither yes nor no.
    pub answer: Option<Answer>,
    pub first_word: String,
    pub correct: bool,
    pub flagged: bool,
}

impl ProbeRecord {
    pub fn new(scene_id: usize, word: &str, expected: Answer, result: &GenerationResult) -> Self {
        let first_word = result.trace.first().map(|t| t.word.clone()).unwrap_or_default();
        let answer = Answer::parse(&first_word);
        Self {
            scene_id,
            word: word.to_string(),
            expected,
            answer,
            first_word,
            correct: answer == Some(expected),
            flagged: answer.is_none(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub scene_id: usize,
    pub caption: String,
    pub mentioned: BTreeSet<String>,
    pub hallucinated: BTreeSet<String>,
    pub ground_truth: BTreeSet<String>,
    /// Generated tokens, not counting a final end-of-sequence token.
    pub length: usize,
    pub stop_reason: StopReason,
}

impl CaptionRecord {
    pub fn new(
        scene_id: usize,
        vocab: &Vocabulary,
        ground_truth: &BTreeSet<TokenId>,
        result: &GenerationResult,
    ) -> Self {
        let words = |ids: &mut dyn Iterator<Item = TokenId>| -> BTreeSet<String> {
            ids.map(|t| vocab.word(t).to_string()).collect()
        };
        let mentioned_ids: BTreeSet<TokenId> = result
            .tokens
            .iter()
            .copied()
            .filter(|t| vocab.is_object_word(*t))
            .collect();
        let eos = vocab.eos();
        let length = result.tokens.iter().filter(|t| **t != eos).count();
        Self {
            scene_id,
            caption: result.text.clone(),
            mentioned: words(&mut mentioned_ids.iter().copied()),
            hallucinated: words(&mut mentioned_ids.difference(ground_truth).copied()),
            ground_truth: words(&mut ground_truth.iter().copied()),
            length,
            stop_reason: result.stop_reason,
        }
    }
}

/// Yes is the positive class. An unparseable answer counts as incorrect:
/// on a yes-probe it is a false negative, on a no-probe it is neither a
/// true negative nor a false positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeMetrics {
    pub probes: usize,
    pub true_positive: usize,
    pub false_positive: usize,
    pub true_negative: usize,
    pub false_negative: usize,
    pub flagged: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub yes_ratio: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn probe_metrics(records: &[ProbeRecord]) -> ProbeMetrics {
    let (mut tp, mut fp, mut tn, mut fneg, mut flagged) = (0, 0, 0, 0, 0);
    for r in records {
        match (r.expected, r.answer) {
            (Answer::Yes, Some(Answer::Yes)) => tp += 1,
            (Answer::No, Some(Answer::Yes)) => fp += 1,
            (Answer::No, Some(Answer::No)) => tn += 1,
            (Answer::Yes, _) => fneg += 1,
            (Answer::No, None) => {}
        }
        flagged += r.flagged as usize;
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fneg);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    ProbeMetrics {
        probes: records.len(),
        true_positive: tp,
        false_positive: fp,
        true_negative: tn,
        false_negative: fneg,
        flagged,
        accuracy: ratio(tp + tn, records.len()),
        precision,
        recall,
        f1,
        yes_ratio: ratio(tp + fp, records.len()),
    }
}

/// Object sets are per caption, so a word repeated within one caption is a
/// single mention.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CaptionMetrics {
    pub captions: usize,
    pub chair_s: f64,
    pub chair_i: f64,
    pub recall: f64,
    pub mean_length: f64,
    pub eos_stops: usize,
}

pub fn caption_metrics(records: &[CaptionRecord]) -> CaptionMetrics {
    let with_hallucination = records.iter().filter(|r| !r.hallucinated.is_empty()).count();
    let hallucinated: usize = records.iter().map(|r| r.hallucinated.len()).sum();
    let mentioned: usize = records.iter().map(|r| r.mentioned.len()).sum();
    let covered: usize = records
        .iter()
        .map(|r| r.mentioned.intersection(&r.ground_truth).count())
        .sum();
    let truth: usize = records.iter().map(|r| r.ground_truth.len()).sum();
    let length: usize = records.iter().map(|r| r.length).sum();
    CaptionMetrics {
        captions: records.len(),
        chair_s: ratio(with_hallucination, records.len()),
        chair_i: ratio(hallucinated, mentioned),
        recall: ratio(covered, truth),
        mean_length: ratio(length, records.len()),
        eos_stops: records
            .iter()
            .filter(|r| r.stop_reason == StopReason::Eos)
            .count(),
    }
}
