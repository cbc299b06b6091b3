//! The decoding pipeline: one prefill, an entropy audit of the visual
//! tokens, two decode branches over complementary views of the KV cache,
//! per-step rectification, collapse monitoring and greedy selection.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::audit::{audit_prefill, Threshold, VisualAuditReport};
use crate::collapse::{
    js_divergence, relevance_step, scale_eos, vv_attention, CollapseTracker, RelevanceEvent, DEFAULT_DELTA,
    DEFAULT_LAMBDA,
};
use crate::error::EvrbError;
use crate::model::{
    split_prompt, HeadValues, KvCache, LanguageBackend, ModelError, Prompt, SequenceRole, StepResult, TokenId,
};
use crate::prob::{LogitVector, ProbVector};
use crate::rectify::{greedy_select, rectify_with, RectifiedStep, RectifyMode, DEFAULT_EPSILON, PROBE_MU};

pub const DEFAULT_MAX_NEW_TOKENS: usize = 512;

/// Which mitigation stages run. All off is plain greedy decoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Components {
    pub pruning: bool,
    pub rectification: bool,
    pub early_stop: bool,
}

impl Components {
    pub const NONE: Components = Components {
        pruning: false,
        rectification: false,
        early_stop: false,
    };
    pub const ALL: Components = Components {
        pruning: true,
        rectification: true,
        early_stop: true,
    };

    /// The rows of the component ablation table.
    pub fn ablation_rows() -> [Components; 6] {
        let c = |p, r, s| Components {
            pruning: p,
            rectification: r,
            early_stop: s,
        };
        [
            c(false, false, false),
            c(true, false, false),
            c(false, true, false),
            c(false, false, true),
            c(true, true, false),
            c(true, true, true),
        ]
    }
}

impl fmt::Display for Components {
    /// `none`, or the enabled stages as letters, e.g. `P+R+S`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if self.pruning {
            parts.push("P");
        }
        if self.rectification {
            parts.push("R");
        }
        if self.early_stop {
            parts.push("S");
        }
        if parts.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&parts.join("+"))
        }
    }
}

impl FromStr for Components {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut c = Components::NONE;
        let s = s.trim();
        if s.eq_ignore_ascii_case("none") || s.is_empty() {
            return Ok(c);
        }
        for part in s.split(['+', ',']).map(str::trim) {
            match part.to_ascii_lowercase().as_str() {
                "p" | "pruning" => c.pruning = true,
                "r" | "rectification" => c.rectification = true,
                "s" | "early_stop" => c.early_stop = true,
                other => return Err(format!("unknown component {other:?}")),
            }
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub threshold: Threshold,
    pub mu: f64,
    pub epsilon: f64,
    pub delta: f64,
    pub lambda: f64,
    pub max_new_tokens: usize,
    pub components: Components,
    pub rectify_mode: RectifyMode,
    /// Scale `exp(logit_eos)` rather than the raw logit.
    pub eos_monotone: bool,
    /// Also scale the prior branch's termination logit.
    pub scale_both_branches: bool,
    /// The prior branch keeps the redundant visual tokens; otherwise it is
    /// text only.
    pub prior_keeps_redundant: bool,
    /// Step the two branches on separate threads.
    pub concurrent_branches: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self::evrb(PROBE_MU)
    }
}

impl EngineConfig {
    pub fn evrb(mu: f64) -> Self {
        Self {
            threshold: Threshold::default(),
            mu,
            epsilon: DEFAULT_EPSILON,
            delta: DEFAULT_DELTA,
            lambda: DEFAULT_LAMBDA,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
            components: Components::ALL,
            rectify_mode: RectifyMode::Divide,
            eos_monotone: false,
            scale_both_branches: false,
            prior_keeps_redundant: true,
            concurrent_branches: true,
        }
    }

    pub fn vanilla() -> Self {
        Self::evrb(PROBE_MU).ablate(Components::NONE)
    }

    /// Keeps only the stages in `mask`: no pruning means `τ = +∞`, no early
    /// stopping means `λ = 0`, no rectification means `p′ = posterior`.
    pub fn ablate(&self, mask: Components) -> Self {
        let mut c = self.clone();
        c.components = mask;
        if !mask.pruning {
            c.threshold = Threshold::off();
        }
        if !mask.early_stop {
            c.lambda = 0.0;
        }
        c
    }

    pub fn validate(&self) -> Result<(), EvrbError> {
        let bad = |m: String| Err(EvrbError::Config(m));
        if self.max_new_tokens == 0 {
            return bad("max_new_tokens must be >= 1".into());
        }
        if !(self.mu > 0.0 && self.mu <= 1.0) {
            return bad(format!("mu must be in (0, 1], got {}", self.mu));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon must be >= 0, got {}", self.epsilon));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return bad(format!("delta must be > 0, got {}", self.delta));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        let (Threshold::Nats(t) | Threshold::Relative(t)) = self.threshold;
        if t.is_nan() {
            return bad("threshold is NaN".into());
        }
        if let RectifyMode::LogitAdjust { alpha } = self.rectify_mode {
            if !(alpha >= 0.0 && alpha.is_finite()) {
                return bad(format!("logit-adjust alpha must be >= 0, got {alpha}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Posterior,
    Prior,
}

/// One branch's view of the prefill cache.
#[derive(Debug, Clone)]
pub struct BranchCache<C> {
    pub branch: Branch,
    pub cache: C,
}

impl<C: KvCache> BranchCache<C> {
    /// Retained positions with their roles, ascending.
    pub fn retained(&self) -> Vec<(usize, SequenceRole)> {
        self.cache
            .positions()
            .into_iter()
            .map(|p| (p, self.cache.role_at(p).expect("listed position")))
            .collect()
    }

    /// Original positions of retained `Generated` entries.
    pub fn generated_positions(&self) -> Vec<usize> {
        self.retained()
            .into_iter()
            .filter(|(_, r)| *r == SequenceRole::Generated)
            .map(|(p, _)| p)
            .collect()
    }
}

/// Result of the shared prefill: audit plus both branch caches. The final
/// prompt token is not in the caches yet; it is the first decode input.
#[derive(Debug, Clone)]
pub struct PrefillOutcome<C> {
    pub audit: VisualAuditReport,
    pub posterior: BranchCache<C>,
    pub prior: BranchCache<C>,
    pub last_token: TokenId,
    pub last_role: SequenceRole,
    pub prefill_secs: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Eos,
    MaxTokens,
}

/// Everything recorded about one generated token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: usize,
    pub token: TokenId,
    pub word: String,
    /// Present when rectification ran at this step.
    pub rectification: Option<RectifiedStep>,
    /// Relevance of this token, known once it is fed back as input; absent
    /// for the first and the final token and when monitoring is off.
    pub relevance: Option<RelevanceEvent>,
    /// Posterior/prior divergence at this step.
    pub js: Option<f64>,
    pub mean_delta_js: f64,
    pub tracker_size: usize,
    pub gated: bool,
    pub eos_logit_before: f64,
    pub eos_logit_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub prefill_secs: f64,
    pub token_secs: Vec<f64>,
}

impl Timing {
    pub fn total_secs(&self) -> f64 {
        self.prefill_secs + self.token_secs.iter().sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub tokens: Vec<TokenId>,
    pub text: String,
    pub trace: Vec<StepTrace>,
    pub stop_reason: StopReason,
    pub timing: Timing,
    pub audit: Option<VisualAuditReport>,
    pub tracker: CollapseTracker,
    /// Why a stage was switched off for this sample, if one was.
    pub degraded: Option<String>,
}

pub struct Engine<'a, B: LanguageBackend> {
    backend: &'a B,
    config: EngineConfig,
}

fn visual_span(roles: &[SequenceRole]) -> Result<(usize, usize), EvrbError> {
    let visual: Vec<usize> = roles
        .iter()
        .enumerate()
        .filter(|(_, r)| **r == SequenceRole::Visual)
        .map(|(i, _)| i)
        .collect();
    match (visual.first(), visual.last()) {
        (Some(&a), Some(&b)) if b - a + 1 == visual.len() => Ok((a, b + 1)),
        (Some(_), Some(_)) => Err(EvrbError::Config("visual positions are not contiguous".into())),
        _ => Err(EvrbError::Config("prompt has no visual span".into())),
    }
}

impl<'a, B: LanguageBackend> Engine<'a, B> {
    pub fn new(backend: &'a B, config: EngineConfig) -> Result<Self, EvrbError> {
        config.validate()?;
        Ok(Self { backend, config })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn backend(&self) -> &B {
        self.backend
    }

    /// Prefills everything but the final prompt token, audits the visual
    /// span and splits the cache into the two branch views.
    pub fn run_prefill(&self, prompt: &Prompt) -> Result<PrefillOutcome<B::Cache>, EvrbError> {
        let (head, head_roles, last_token, last_role) = split_prompt(&prompt.inputs, &prompt.roles)?;
        visual_span(head_roles)?;
        let start = Instant::now();
        let prefill = self.backend.prefill(head, head_roles)?;
        let tau = self.config.threshold.resolve(self.backend.vocab().len());
        let audit = audit_prefill(self.backend, &prefill, tau)?;
        let mut post_keep = BTreeSet::new();
        let mut prior_keep = BTreeSet::new();
        for (pos, role) in head_roles.iter().enumerate() {
            if role.is_text() {
                post_keep.insert(pos);
                prior_keep.insert(pos);
            }
        }
        post_keep.extend(&audit.clear_positions);
        if self.config.prior_keeps_redundant {
            prior_keep.extend(&audit.redundant_positions);
        }
        let posterior = prefill.cache.select(&post_keep)?;
        let prior = prefill.cache.select(&prior_keep)?;
        Ok(PrefillOutcome {
            audit,
            posterior: BranchCache {
                branch: Branch::Posterior,
                cache: posterior,
            },
            prior: BranchCache {
                branch: Branch::Prior,
                cache: prior,
            },
            last_token,
            last_role,
            prefill_secs: start.elapsed().as_secs_f64(),
        })
    }

    pub fn generate(&self, prompt: &Prompt) -> Result<GenerationResult, EvrbError> {
        match visual_span(&prompt.roles[..prompt.len().saturating_sub(1)]) {
            Ok(_) => {
                let outcome = self.run_prefill(prompt)?;
                self.decode_loop(outcome)
            }
            Err(EvrbError::Config(reason)) => {
                warn!("{reason}; decoding without mitigation");
                self.generate_text_only(prompt, reason)
            }
            Err(e) => Err(e),
        }
    }

    fn generate_text_only(&self, prompt: &Prompt, reason: String) -> Result<GenerationResult, EvrbError> {
        let (head, head_roles, last_token, last_role) = split_prompt(&prompt.inputs, &prompt.roles)?;
        let start = Instant::now();
        let cache = self.backend.prefill(head, head_roles)?.cache;
        let prefill_secs = start.elapsed().as_secs_f64();
        let all: BTreeSet<usize> = cache.positions().into_iter().collect();
        let outcome = PrefillOutcome {
            audit: VisualAuditReport {
                entropies: Vec::new(),
                clear_positions: BTreeSet::new(),
                redundant_positions: BTreeSet::new(),
                threshold: f64::INFINITY,
            },
            prior: BranchCache {
                branch: Branch::Prior,
                cache: cache.select(&all)?,
            },
            posterior: BranchCache {
                branch: Branch::Posterior,
                cache,
            },
            last_token,
            last_role,
            prefill_secs,
        };
        let vanilla = Engine {
            backend: self.backend,
            config: self.config.ablate(Components::NONE),
        };
        let mut result = vanilla.decode_loop(outcome)?;
        result.audit = None;
        result.degraded = Some(reason);
        Ok(result)
    }

    fn step_branches(
        &self,
        post: &mut B::Cache,
        prior: Option<&mut B::Cache>,
        token: TokenId,
        role: SequenceRole,
    ) -> Result<(StepResult, Option<StepResult>), ModelError> {
        let backend = self.backend;
        match prior {
            None => Ok((backend.decode_step(post, token, role)?, None)),
            Some(prior) if self.config.concurrent_branches => {
                let (a, b) = rayon::join(
                    || backend.decode_step(post, token, role),
                    || backend.decode_step(prior, token, role),
                );
                Ok((a?, Some(b?)))
            }
            Some(prior) => {
                let a = backend.decode_step(post, token, role)?;
                let b = backend.decode_step(prior, token, role)?;
                Ok((a, Some(b)))
            }
        }
    }

    /// Runs the per-step pipeline from a prefill outcome until EOS or the
    /// token budget.
    pub fn decode_loop(&self, outcome: PrefillOutcome<B::Cache>) -> Result<GenerationResult, EvrbError> {
        let cfg = &self.config;
        let vocab = self.backend.vocab();
        let eos = vocab.eos();
        let PrefillOutcome {
            audit,
            posterior,
            prior,
            last_token,
            last_role,
            prefill_secs,
        } = outcome;
        let mut post_cache = posterior.cache;
        let mut degraded = None;
        let clear: Vec<usize> = audit.clear_positions.iter().copied().collect();
        let mut comps = cfg.components;
        if clear.is_empty() && (comps.rectification || comps.early_stop) && !audit.entropies.is_empty() {
            let reason = "no clear visual tokens; rectification and collapse monitoring disabled".to_string();
            warn!("{reason}");
            comps.rectification = false;
            comps.early_stop = false;
            degraded = Some(reason);
        }
        let use_prior = comps.rectification || comps.early_stop;
        let mut prior_cache = use_prior.then_some(prior.cache);
        let clear_values: Vec<HeadValues> = if comps.early_stop {
            self.backend.value_vectors(&post_cache, &clear)?
        } else {
            Vec::new()
        };

        let mut tracker = CollapseTracker::new();
        let mut tokens = Vec::new();
        let mut trace: Vec<StepTrace> = Vec::new();
        let mut token_secs = Vec::new();
        let mut token = last_token;
        let mut role = last_role;
        let mut prev_entropy: Option<f64> = None;
        let mut stop_reason = StopReason::MaxTokens;

        while tokens.len() < cfg.max_new_tokens {
            let step = tokens.len();
            let started = Instant::now();
            let (post_step, prior_step) = self
                .step_branches(&mut post_cache, prior_cache.as_mut(), token, role)
                .map_err(|e| EvrbError::from(e).at_step(step))?;

            // The token just fed back was emitted at `step - 1`; its
            // relevance is only measurable now.
            if comps.early_stop && role == SequenceRole::Generated {
                if let Some(profile) = vv_attention(&post_step.value_vectors, &clear_values) {
                    if let Some(prev) = prev_entropy {
                        let word = vocab.word(token);
                        let event = relevance_step(word, step - 1, prev, profile.entropy, cfg.delta);
                        let record = &mut trace[step - 1];
                        if event.relevant {
                            if let Some(js) = record.js {
                                tracker.record(word, js);
                            }
                        }
                        record.relevance = Some(event);
                    }
                    prev_entropy = Some(profile.entropy);
                }
            }

            let gated = role == SequenceRole::Generated && vocab.is_punctuation(token);
            let eos_logit_before = post_step.logits.get(eos);
            let mean = tracker.mean_delta_js();
            let (post_logits, prior_logits) = if comps.early_stop {
                let post = scale_eos(&post_step.logits, eos, cfg.lambda, mean, gated, cfg.eos_monotone);
                let prior = prior_step.map(|p| {
                    if cfg.scale_both_branches {
                        scale_eos(&p.logits, eos, cfg.lambda, mean, gated, cfg.eos_monotone)
                    } else {
                        p.logits
                    }
                });
                (post, prior)
            } else {
                (post_step.logits, prior_step.map(|p| p.logits))
            };
            let eos_logit_after = post_logits.get(eos);

            let posterior = post_logits.softmax();
            let prior_dist: Option<ProbVector> = prior_logits.as_ref().map(LogitVector::softmax);
            let js = match (&prior_dist, comps.early_stop) {
                (Some(p), true) => Some(js_divergence(&posterior, p)),
                _ => None,
            };
            let (next, rectification) = match (&prior_dist, comps.rectification) {
                (Some(p), true) => {
                    let r = rectify_with(&posterior, p, cfg.mu, cfg.epsilon, cfg.rectify_mode)
                        .map_err(|e| EvrbError::from(e).at_step(step))?;
                    (greedy_select(&r.rectified), Some(r))
                }
                _ => (greedy_select(&posterior), None),
            };

            tokens.push(next);
            trace.push(StepTrace {
                step,
                token: next,
                word: vocab.word(next).to_string(),
                rectification,
                relevance: None,
                js,
                mean_delta_js: mean,
                tracker_size: tracker.len(),
                gated,
                eos_logit_before,
                eos_logit_after,
            });
            token_secs.push(started.elapsed().as_secs_f64());
            if next == eos {
                stop_reason = StopReason::Eos;
                break;
            }
            token = next;
            role = SequenceRole::Generated;
        }

        Ok(GenerationResult {
            text: vocab.decode(&tokens),
            tokens,
            trace,
            stop_reason,
            timing: Timing {
                prefill_secs,
                token_secs,
            },
            audit: Some(audit),
            tracker,
            degraded,
        })
    }
}

/// One JSON object per generated token, tagged with `sample`.
pub fn write_trace_jsonl<'r>(
    path: &Path,
    results: impl IntoIterator<Item = (&'r str, &'r GenerationResult)>,
) -> Result<(), EvrbError> {
    #[derive(Serialize)]
    struct Line<'a> {
        sample: &'a str,
        #[serde(flatten)]
        step: &'a StepTrace,
    }
    let file = std::fs::File::create(path).map_err(EvrbError::io(path))?;
    let mut w = std::io::BufWriter::new(file);
    for (sample, result) in results {
        for step in &result.trace {
            serde_json::to_writer(&mut w, &Line { sample, step }).map_err(EvrbError::json(path))?;
            w.write_all(b"\n").map_err(EvrbError::io(path))?;
        }
    }
    w.flush().map_err(EvrbError::io(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn components_round_trip() {
        for c in Components::ablation_rows() {
            assert_eq!(c.to_string().parse::<Components>().unwrap(), c);
        }
        assert_eq!("P,R,S".parse::<Components>().unwrap(), Components::ALL);
        assert!("X".parse::<Components>().is_err());
    }

    #[test]
    fn ablate_sets_documented_values() {
        let full = EngineConfig::default();
        let none = full.ablate(Components::NONE);
        assert_eq!(none.threshold.resolve(64), f64::INFINITY);
        assert_eq!(none.lambda, 0.0);
        assert!(!none.components.rectification);
        assert_eq!(full.ablate(Components::ALL), full);
    }

    #[test]
    fn config_validation() {
        for c in [
            EngineConfig {
                max_new_tokens: 0,
                ..EngineConfig::default()
            },
            EngineConfig {
                mu: 0.0,
                ..EngineConfig::default()
            },
            EngineConfig {
                delta: 0.0,
                ..EngineConfig::default()
            },
        ] {
            assert!(c.validate().is_err());
        }
        assert!(EngineConfig::default().validate().is_ok());
    }
}
