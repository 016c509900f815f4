//! Construction and validation of the effective vocabulary V*.
//!
//! Three steps: drop tokens that can never be natural-language continuations
//! (structural), drop tokens that never clear a probability floor on a
//! held-out validation split (empirical), then check that the ground-truth
//! tokens of a split all survive.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distribution::masked_temperature_softmax;
use crate::error::{Error, Result};
use crate::types::{ExclusionReason, LogitRecord, MaskBuildConfig, TokenMetadata, VocabMask};

/// Default floor for the empirical filter.
pub const DEFAULT_EMPIRICAL_THRESHOLD: f64 = 1e-5;

/// Excludes special, reserved and non-printable tokens.
///
/// `metadata` must cover `0..vocab_size` exactly once, in any order.
pub fn structural_filter(metadata: &[TokenMetadata]) -> Result<VocabMask> {
    let mut exclusions: Vec<Option<Option<ExclusionReason>>> = vec![None; metadata.len()];
    for token in metadata {
        let slot = exclusions.get_mut(token.token_id as usize).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "token_id {} out of range for {} metadata entries",
                token.token_id,
                metadata.len()
            ))
        })?;
        if slot.is_some() {
            return Err(Error::InvalidArgument(format!(
                "duplicate token_id {}",
                token.token_id
            )));
        }
        *slot = Some(
            token
                .is_structurally_excluded()
                .then_some(ExclusionReason::Structural),
        );
    }
    // Dense and duplicate-free implies every slot is filled.
    let exclusions = exclusions.into_iter().map(Option::flatten).collect();
    VocabMask::from_exclusions(exclusions, MaskBuildConfig::default())
}

/// Elementwise maximum of `softmax(z / tau)` over the validation records.
pub fn empirical_max_probs(records: &[LogitRecord], tau: f64) -> Result<Vec<f64>> {
    let first = records.first().ok_or(Error::NoValidationData)?;
    let vocab = first.vocab_size();
    if let Some(bad) = records.iter().find(|r| r.vocab_size() != vocab) {
        return Err(Error::LengthMismatch {
            expected: vocab,
            found: bad.vocab_size(),
        });
    }
    records
        .par_iter()
        .map(|r| masked_temperature_softmax(r.logits(), tau, None).map(|p| p.probs().to_vec()))
        .try_reduce(
            || vec![0.0; vocab],
            |mut acc, probs| {
                for (a, p) in acc.iter_mut().zip(probs) {
                    *a = a.max(p);
                }
                Ok(acc)
            },
        )
}

/// Keeps a token only if it is in `base` and its max probability is strictly
/// above `threshold`. Newly excluded tokens are tagged empirical.
pub fn empirical_filter(base: &VocabMask, max_probs: &[f64], threshold: f64) -> Result<VocabMask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "empirical threshold {threshold} must lie in (0, 1)"
        )));
    }
    if max_probs.len() != base.vocab_size() {
        return Err(Error::LengthMismatch {
            expected: base.vocab_size(),
            found: max_probs.len(),
        });
    }
    let exclusions = base
        .exclusions()
        .iter()
        .zip(max_probs)
        .map(|(reason, &p)| match reason {
            Some(r) => Some(*r),
            None if p > threshold => None,
            None => Some(ExclusionReason::Empirical),
        })
        .collect();
    let config = MaskBuildConfig {
        empirical_threshold: Some(threshold),
        ..base.build_config().clone()
    };
    VocabMask::from_exclusions(exclusions, config)
}

/// Fraction of records whose target lies in the mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskValidationReport {
    pub n_samples: usize,
    pub n_hits: usize,
    pub hit_rate: f64,
    /// Distinct excluded target ids, ascending.
    pub missing_token_ids: Vec<u32>,
    /// Samples whose target was excluded, in input order.
    pub missing_sample_ids: Vec<String>,
}

impl MaskValidationReport {
    /// Whether the mask contains every observed target, the precondition for
    /// claiming the full `1 - alpha` guarantee over the masked vocabulary.
    pub fn full_guarantee(&self) -> bool {
        self.n_samples > 0 && self.n_hits == self.n_samples
    }
}

pub fn validate_mask(mask: &VocabMask, records: &[LogitRecord]) -> Result<MaskValidationReport> {
    if records.is_empty() {
        return Err(Error::NoValidationData);
    }
    let mut missing_token_ids = Vec::new();
    let mut missing_sample_ids = Vec::new();
    for rec in records {
        if !mask.is_included(rec.target_id()) {
            missing_token_ids.push(rec.target_id());
            missing_sample_ids.push(rec.sample_id().to_owned());
        }
    }
    let n_samples = records.len();
    let n_hits = n_samples - missing_sample_ids.len();
    missing_token_ids.sort_unstable();
    missing_token_ids.dedup();
    Ok(MaskValidationReport {
        n_samples,
        n_hits,
        hit_rate: n_hits as f64 / n_samples as f64,
        missing_token_ids,
        missing_sample_ids,
    })
}

/// Structural then empirical filtering, recording provenance.
pub fn build_mask(
    metadata: &[TokenMetadata],
    validation: &[LogitRecord],
    threshold: f64,
    tau: f64,
) -> Result<VocabMask> {
    let structural = structural_filter(metadata)?;
    let max_probs = empirical_max_probs(validation, tau)?;
    let mask = empirical_filter(&structural, &max_probs, threshold)?;
    let config = MaskBuildConfig {
        empirical_threshold: Some(threshold),
        empirical_tau: Some(tau),
        validation_sample_ids: validation
            .iter()
            .map(|r| r.sample_id().to_owned())
            .collect(),
    };
    Ok(mask.with_build_config(config))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(id: u32, surface: &str) -> TokenMetadata {
        TokenMetadata::plain(id, surface)
    }

    fn record(id: &str, probs: &[f64], target: u32) -> LogitRecord {
        let logits = probs
            .iter()
            .map(|&p| if p > 0.0 { p.ln() } else { f64::NEG_INFINITY })
            .collect();
        LogitRecord::new(id, logits, target).unwrap()
    }

    #[test]
    fn structural_examples() {
        let pad = TokenMetadata {
            is_special: true,
            ..meta(0, "<pad>")
        };
        let unused = TokenMetadata {
            is_reserved: true,
            ..meta(1, "<unused42>")
        };
        let bell = TokenMetadata {
            is_printable: false,
            ..meta(2, "\u{7}")
        };
        let mask = structural_filter(&[pad, unused, bell, meta(3, "hello")]).unwrap();
        assert!(!mask.is_included(0));
        assert!(!mask.is_included(1));
        assert!(!mask.is_included(2));
        assert!(mask.is_included(3));
        assert_eq!(mask.excluded_count(ExclusionReason::Structural), 3);
    }

    #[test]
    fn structural_requires_dense_ids() {
        assert!(structural_filter(&[meta(0, "a"), meta(0, "b")]).is_err());
        assert!(structural_filter(&[meta(0, "a"), meta(2, "b")]).is_err());
    }

    #[test]
    fn max_probs_examples() {
        let one = empirical_max_probs(&[record("a", &[0.5, 0.3, 0.2], 0)], 1.0).unwrap();
        for (x, y) in one.iter().zip([0.5, 0.3, 0.2]) {
            assert!((x - y).abs() < 1e-12);
        }
        let two = empirical_max_probs(
            &[
                record("a", &[0.9, 0.1, 0.0], 0),
                record("b", &[0.2, 0.3, 0.5], 2),
            ],
            1.0,
        )
        .unwrap();
        for (x, y) in two.iter().zip([0.9, 0.3, 0.5]) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(matches!(
            empirical_max_probs(&[], 1.0),
            Err(Error::NoValidationData)
        ));
    }

    #[test]
    fn empirical_examples() {
        let full = VocabMask::full(3).unwrap();
        let m = empirical_filter(&full, &[0.5, 1e-6, 0.2], 1e-5).unwrap();
        assert_eq!(m.exclusion_reason(1), Some(ExclusionReason::Empirical));
        assert!(m.is_included(0) && m.is_included(2));

        let boundary = empirical_filter(&full, &[0.5, 1e-5, 0.2], 1e-5).unwrap();
        assert!(!boundary.is_included(1));

        let base = VocabMask::from_included_ids(2, [1], ExclusionReason::Structural).unwrap();
        let m = empirical_filter(&base, &[0.9, 0.9], 1e-5).unwrap();
        assert_eq!(m.exclusion_reason(0), Some(ExclusionReason::Structural));
    }

    #[test]
    fn empirical_can_empty_the_mask() {
        let full = VocabMask::full(2).unwrap();
        assert!(matches!(
            empirical_filter(&full, &[1e-9, 1e-9], 1e-5),
            Err(Error::EmptySupport)
        ));
    }

    #[test]
    fn validate_examples() {
        let recs: Vec<_> = (0..4)
            .map(|i| record(&format!("r{i}"), &[0.25; 4], i))
            .collect();
        let full = validate_mask(&VocabMask::full(4).unwrap(), &recs).unwrap();
        assert_eq!(full.hit_rate, 1.0);
        assert!(full.missing_token_ids.is_empty());
        assert!(full.full_guarantee());

        let drop3 = VocabMask::from_included_ids(4, [0, 1, 2], ExclusionReason::Empirical).unwrap();
        let r = validate_mask(&drop3, &recs).unwrap();
        assert_eq!(r.hit_rate, 0.75);
        assert_eq!(r.missing_token_ids, vec![3]);
        assert_eq!(r.missing_sample_ids, vec!["r3".to_string()]);
        assert!(!r.full_guarantee());

        let only0 = VocabMask::from_included_ids(4, [0], ExclusionReason::Empirical).unwrap();
        let zeros: Vec<_> = (0..3)
            .map(|i| record(&format!("z{i}"), &[0.25; 4], 0))
            .collect();
        assert_eq!(validate_mask(&only0, &zeros).unwrap().hit_rate, 1.0);
    }

    #[test]
    fn build_records_provenance() {
        let metadata = vec![
            TokenMetadata {
                is_special: true,
                ..meta(0, "<eos>")
            },
            meta(1, "a"),
            meta(2, "b"),
            meta(3, "c"),
        ];
        let val = vec![
            record("v0", &[0.2, 0.7, 0.1 - 1e-7, 1e-7], 1),
            record("v1", &[0.2, 0.1, 0.7 - 1e-7, 1e-7], 2),
        ];
        let mask = build_mask(&metadata, &val, 1e-5, 1.0).unwrap();
        assert_eq!(mask.exclusion_reason(0), Some(ExclusionReason::Structural));
        assert_eq!(mask.exclusion_reason(3), Some(ExclusionReason::Empirical));
        assert_eq!(mask.included_ids().collect::<Vec<_>>(), vec![1, 2]);
        let cfg = mask.build_config();
        assert_eq!(cfg.empirical_threshold, Some(1e-5));
        assert_eq!(cfg.empirical_tau, Some(1.0));
        assert_eq!(cfg.validation_sample_ids, vec!["v0", "v1"]);
    }
}
