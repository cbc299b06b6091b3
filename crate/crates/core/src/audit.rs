//! Scoring visual tokens by how confidently the LM head reads them, and
//! splitting them into clear (informative) and redundant positions.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::EvrbError;
use crate::model::{LanguageBackend, ModelError, PrefillResult, SequenceRole};
use crate::prob::{entropy, ProbVector};

/// Default clear/redundant threshold as a fraction of `ln |Φ|`: 7.48 nats
/// relative to a 32000-token vocabulary.
pub const DEFAULT_RELATIVE_TAU: f64 = 0.721;

/// The entropy threshold τ, either in nats or relative to `ln |Φ|`.
/// Serialized in its command-line form so that `inf` survives JSON.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Threshold {
    Nats(f64),
    Relative(f64),
}

impl Default for Threshold {
    fn default() -> Self {
        Threshold::Relative(DEFAULT_RELATIVE_TAU)
    }
}

impl Threshold {
    /// Pruning disabled: every visual token is clear.
    pub fn off() -> Self {
        Threshold::Nats(f64::INFINITY)
    }

    pub fn resolve(self, vocab_len: usize) -> f64 {
        match self {
            Threshold::Nats(t) => t,
            Threshold::Relative(f) => f * (vocab_len as f64).ln(),
        }
    }
}

impl FromStr for Threshold {
    type Err = String;

    /// `7.48`, `inf`, or `rel:0.721`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let (rel, num) = match s.strip_prefix("rel:") {
            Some(rest) => (true, rest),
            None => (false, s),
        };
        let v: f64 = num
            .trim()
            .parse()
            .map_err(|_| format!("bad threshold {s:?}: expected <nats>, inf or rel:<fraction>"))?;
        if v.is_nan() {
            return Err(format!("bad threshold {s:?}"));
        }
        Ok(if rel {
            Threshold::Relative(v)
        } else {
            Threshold::Nats(v)
        })
    }
}

impl From<Threshold> for String {
    fn from(t: Threshold) -> String {
        t.to_string()
    }
}

impl TryFrom<String> for Threshold {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl fmt::Display for Threshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Threshold::Nats(v) => write!(f, "{v}"),
            Threshold::Relative(v) => write!(f, "rel:{v}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualAuditReport {
    /// `(position, entropy in nats)` for every visual position, in order.
    pub entropies: Vec<(usize, f64)>,
    pub clear_positions: BTreeSet<usize>,
    pub redundant_positions: BTreeSet<usize>,
    pub threshold: f64,
}

/// Softmax of the LM head applied to a visual position's last hidden state.
pub fn visual_next_token_dist<B: LanguageBackend>(
    backend: &B,
    prefill: &PrefillResult<B::Cache>,
    position: usize,
) -> Result<ProbVector, ModelError> {
    match prefill.roles.get(position) {
        Some(SequenceRole::Visual) => {}
        Some(role) => {
            return Err(ModelError::Contract(format!(
                "position {position} has role {role:?}, not Visual"
            )))
        }
        None => return Err(ModelError::PositionNotInCache(position)),
    }
    Ok(backend.lm_head(&prefill.last_hidden[position])?.softmax())
}

/// Shannon entropy in nats.
pub fn token_entropy(p: &ProbVector) -> f64 {
    entropy(p.as_slice())
}

/// Clear iff `E < τ`; everything else is redundant.
pub fn partition_visual(entropies: &[(usize, f64)], tau: f64) -> (BTreeSet<usize>, BTreeSet<usize>) {
    let mut clear = BTreeSet::new();
    let mut redundant = BTreeSet::new();
    for &(pos, e) in entropies {
        if e < tau {
            clear.insert(pos);
        } else {
            redundant.insert(pos);
        }
    }
    (clear, redundant)
}

/// Scores every visual position of a prefill and partitions at `tau` nats.
pub fn audit_prefill<B: LanguageBackend>(
    backend: &B,
    prefill: &PrefillResult<B::Cache>,
    tau: f64,
) -> Result<VisualAuditReport, ModelError> {
    let mut entropies = Vec::new();
    for (pos, role) in prefill.roles.iter().enumerate() {
        if *role == SequenceRole::Visual {
            let p = visual_next_token_dist(backend, prefill, pos)?;
            entropies.push((pos, token_entropy(&p)));
        }
    }
    let (clear_positions, redundant_positions) = partition_visual(&entropies, tau);
    Ok(VisualAuditReport {
        entropies,
        clear_positions,
        redundant_positions,
        threshold: tau,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinStats {
    pub lo: f64,
    pub hi: f64,
    pub total: usize,
    pub mean: f64,
    pub median: f64,
    pub p25: f64,
    pub p75: f64,
}

/// Per-image entropy histograms with boxplot statistics across images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyHistogram {
    pub bin_edges: Vec<f64>,
    /// `per_image_counts[image][bin]`.
    pub per_image_counts: Vec<Vec<usize>>,
    pub bins: Vec<BinStats>,
}

/// Linear-interpolation percentile of sorted data, `q ∈ [0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = q * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64)
}

/// Bins of width `bin_width` covering `[0, max_entropy]` (the last bin is
/// closed and may be narrower). Entropies outside the range are clamped
/// into the first or last bin.
pub fn build_histogram(
    reports: &[VisualAuditReport],
    bin_width: f64,
    max_entropy: f64,
) -> Result<EntropyHistogram, EvrbError> {
    if !(bin_width > 0.0 && bin_width.is_finite()) {
        return Err(EvrbError::Config(format!(
            "bin width must be > 0, got {bin_width}"
        )));
    }
    if !(max_entropy > 0.0 && max_entropy.is_finite()) {
        return Err(EvrbError::Config(format!(
            "entropy range must be > 0, got {max_entropy}"
        )));
    }
    let n_bins = ((max_entropy / bin_width).ceil() as usize).max(1);
    let bin_edges: Vec<f64> = (0..=n_bins)
        .map(|i| (i as f64 * bin_width).min(max_entropy))
        .collect();
    let per_image_counts: Vec<Vec<usize>> = reports
        .iter()
        .map(|r| {
            let mut counts = vec![0; n_bins];
            for &(_, e) in &r.entropies {
                let bin = ((e / bin_width).floor().max(0.0) as usize).min(n_bins - 1);
                counts[bin] += 1;
            }
            counts
        })
        .collect();
    let bins = (0..n_bins)
        .map(|b| {
            let mut col: Vec<f64> = per_image_counts.iter().map(|c| c[b] as f64).collect();
            col.sort_by(f64::total_cmp);
            let total: usize = per_image_counts.iter().map(|c| c[b]).sum();
            BinStats {
                lo: bin_edges[b],
                hi: bin_edges[b + 1],
                total,
                mean: if col.is_empty() {
                    0.0
                } else {
                    total as f64 / col.len() as f64
                },
                median: percentile(&col, 0.5),
                p25: percentile(&col, 0.25),
                p75: percentile(&col, 0.75),
            }
        })
        .collect();
    Ok(EntropyHistogram {
        bin_edges,
        per_image_counts,
        bins,
    })
}

/// Fractions of all visual tokens with entropy `< below` and `> above`.
pub fn entropy_mass(reports: &[VisualAuditReport], below: f64, above: f64) -> (f64, f64) {
    let all: Vec<f64> = reports
        .iter()
        .flat_map(|r| r.entropies.iter().map(|e| e.1))
        .collect();
    if all.is_empty() {
        return (0.0, 0.0);
    }
    let n = all.len() as f64;
    let lo = all.iter().filter(|&&e| e < below).count() as f64;
    let hi = all.iter().filter(|&&e| e > above).count() as f64;
    (lo / n, hi / n)
}

impl EntropyHistogram {
    /// Long format: `bin_lo, bin_hi, image_id, count`.
    pub fn write_csv(&self, path: &Path) -> Result<(), EvrbError> {
        let mut w = csv::Writer::from_path(path).map_err(EvrbError::csv(path))?;
        w.write_record(["bin_lo", "bin_hi", "image_id", "count"])
            .map_err(EvrbError::csv(path))?;
        for (image, counts) in self.per_image_counts.iter().enumerate() {
            for (b, count) in counts.iter().enumerate() {
                w.write_record([
                    self.bin_edges[b].to_string(),
                    self.bin_edges[b + 1].to_string(),
                    image.to_string(),
                    count.to_string(),
                ])
                .map_err(EvrbError::csv(path))?;
            }
        }
        w.flush().map_err(EvrbError::io(path))
    }

    /// Per-bin statistics as pretty JSON.
    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(&self.bins).expect("histogram stats serialize")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(entropies: &[f64]) -> VisualAuditReport {
        let e: Vec<(usize, f64)> = entropies.iter().copied().enumerate().collect();
        let (c, r) = partition_visual(&e, 1.0);
        VisualAuditReport {
            entropies: e,
            clear_positions: c,
            redundant_positions: r,
            threshold: 1.0,
        }
    }

    #[test]
    fn partition_is_strict() {
        let e = [(0, 1.0), (1, 8.0)];
        let (c, r) = partition_visual(&e, 7.48);
        assert_eq!(c, [0].into());
        assert_eq!(r, [1].into());
        let (c, r) = partition_visual(&e, 8.0);
        assert_eq!(c, [0].into());
        assert_eq!(r, [1].into());
        let (c, r) = partition_visual(&e, f64::INFINITY);
        assert_eq!(c.len(), 2);
        assert!(r.is_empty());
        let (c, _) = partition_visual(&e, 0.0);
        assert!(c.is_empty());
    }

    #[test]
    fn threshold_parsing() {
        assert_eq!("7.48".parse::<Threshold>().unwrap(), Threshold::Nats(7.48));
        assert_eq!("rel:0.5".parse::<Threshold>().unwrap(), Threshold::Relative(0.5));
        assert_eq!("inf".parse::<Threshold>().unwrap().resolve(64), f64::INFINITY);
        assert!("rel:".parse::<Threshold>().is_err());
        assert!("nan".parse::<Threshold>().is_err());
        let t = Threshold::Relative(0.5).resolve(64);
        assert!((t - 0.5 * 64f64.ln()).abs() < 1e-15);
        for t in [Threshold::off(), Threshold::Nats(-1.5), Threshold::default()] {
            let json = serde_json::to_string(&t).unwrap();
            assert_eq!(serde_json::from_str::<Threshold>(&json).unwrap(), t);
        }
        assert_eq!(serde_json::to_string(&Threshold::off()).unwrap(), "\"inf\"");
    }

    #[test]
    fn histogram_single_bin() {
        let h = build_histogram(&[report(&[0.1, 0.2, 0.3])], 0.5, 64f64.ln()).unwrap();
        assert_eq!(h.per_image_counts[0][0], 3);
        assert!(h.per_image_counts[0][1..].iter().all(|&c| c == 0));
        assert_eq!(*h.bin_edges.last().unwrap(), 64f64.ln());
    }

    #[test]
    fn histogram_identical_images() {
        let r = report(&[0.1, 2.2, 4.0]);
        let h = build_histogram(&[r.clone(), r], 0.5, 64f64.ln()).unwrap();
        for (b, s) in h.bins.iter().enumerate() {
            let c = h.per_image_counts[0][b] as f64;
            assert_eq!(s.mean, c);
            assert_eq!(s.median, c);
            assert_eq!(s.p25, c);
            assert_eq!(s.p75, c);
        }
        assert!(build_histogram(&[], 0.0, 1.0).is_err());
    }

    #[test]
    fn percentile_interpolates() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile(&v, 0.5), 2.5);
        assert_eq!(percentile(&v, 0.25), 1.75);
        assert_eq!(percentile(&v, 1.0), 4.0);
    }
}
