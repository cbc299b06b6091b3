//! Dividing the grounded next-token distribution by a language-prior
//! estimate, restricted to the tokens the grounded distribution already
//! finds plausible.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::TokenId;
use crate::prob::{argmax, ProbVector};

/// Default guard added to prior probabilities.
pub const DEFAULT_EPSILON: f64 = 1e-9;
/// Default plausibility cutoff for yes/no probing.
pub const PROBE_MU: f64 = 0.1;
/// Default plausibility cutoff for free-form captioning.
pub const CAPTION_MU: f64 = 0.9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RectifyError {
    #[error("mu must be in (0, 1], got {0}")]
    Mu(f64),
    #[error("epsilon must be finite and >= 0, got {0}")]
    Epsilon(f64),
    #[error("posterior has {posterior} entries but prior has {prior}")]
    Length { posterior: usize, prior: usize },
    #[error("rectified mass on the plausible set is {0}; a zero prior needs epsilon > 0")]
    Degenerate(f64),
}

/// How posterior and prior are combined on the plausible set.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RectifyMode {
    /// `posterior / (prior + ε)`, renormalized.
    #[default]
    Divide,
    /// Contrastive logit adjustment on the plausible set:
    /// `softmax((1 + α)·ln posterior − α·ln(prior + ε))`. `α = 0` is the
    /// truncated posterior.
    LogitAdjust { alpha: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RectifiedStep {
    pub posterior: ProbVector,
    pub prior: ProbVector,
    pub plausible_set: BTreeSet<TokenId>,
    pub rectified: ProbVector,
    pub mu: f64,
    pub epsilon: f64,
}

/// `{t : posterior(t) > μ·max} ∪ {argmax}`.
pub fn plausible_set(posterior: &ProbVector, mu: f64) -> Result<BTreeSet<TokenId>, RectifyError> {
    if !(mu > 0.0 && mu <= 1.0) {
        return Err(RectifyError::Mu(mu));
    }
    let p = posterior.as_slice();
    let best = argmax(p);
    let cutoff = mu * p[best];
    let mut set: BTreeSet<TokenId> = p
        .iter()
        .enumerate()
        .filter(|(_, &x)| x > cutoff)
        .map(|(i, _)| TokenId(i as u32))
        .collect();
    set.insert(TokenId(best as u32));
    Ok(set)
}

pub fn rectify(
    posterior: &ProbVector,
    prior: &ProbVector,
    mu: f64,
    epsilon: f64,
) -> Result<RectifiedStep, RectifyError> {
    rectify_with(posterior, prior, mu, epsilon, RectifyMode::Divide)
}

pub fn rectify_with(
    posterior: &ProbVector,
    prior: &ProbVector,
    mu: f64,
    epsilon: f64,
    mode: RectifyMode,
) -> Result<RectifiedStep, RectifyError> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(RectifyError::Epsilon(epsilon));
    }
    if posterior.len() != prior.len() {
        return Err(RectifyError::Length {
            posterior: posterior.len(),
            prior: prior.len(),
        });
    }
    let plausible = plausible_set(posterior, mu)?;
    let post = posterior.as_slice();
    let pri = prior.as_slice();
    let mut weights = vec![0.0; post.len()];
    match mode {
        RectifyMode::Divide => {
            for t in &plausible {
                let i = t.index();
                weights[i] = post[i] / (pri[i] + epsilon);
            }
        }
        RectifyMode::LogitAdjust { alpha } => {
            let scores: Vec<(usize, f64)> = plausible
                .iter()
                .map(|t| {
                    let i = t.index();
                    (i, (1.0 + alpha) * post[i].ln() - alpha * (pri[i] + epsilon).ln())
                })
                .collect();
            let max = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
            if max.is_finite() {
                for (i, s) in scores {
                    weights[i] = (s - max).exp();
                }
            } else if max == f64::INFINITY {
                for (i, s) in scores {
                    weights[i] = if s == f64::INFINITY { 1.0 } else { 0.0 };
                }
            }
        }
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(RectifyError::Degenerate(total));
    }
    for w in &mut weights {
        *w /= total;
    }
    let rectified = ProbVector::new(weights).map_err(|_| RectifyError::Degenerate(total))?;
    Ok(RectifiedStep {
        posterior: posterior.clone(),
        prior: prior.clone(),
        plausible_set: plausible,
        rectified,
        mu,
        epsilon,
    })
}

/// Greedy choice; ties go to the lowest token id.
pub fn greedy_select(p: &ProbVector) -> TokenId {
    p.argmax()
}
