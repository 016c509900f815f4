//! Masked temperature softmax, canonical token ordering, and
//! vocabulary-structure statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::VocabMask;

/// A probability vector over the full vocabulary.
///
/// Entries outside the support are exactly zero. Entries inside the support
/// may also underflow to zero at extreme temperatures; they remain admissible.
/// When built from logits, the logits are kept to order tokens whose
/// probabilities collapsed to the same float.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVector {
    probs: Vec<f64>,
    support: Vec<bool>,
    logits: Option<Vec<f64>>,
}

impl ProbabilityVector {
    /// Wraps an explicit probability vector. Used by tests and by callers that
    /// already hold normalized probabilities. Support is every entry > 0.
    pub fn from_probs(probs: Vec<f64>) -> Result<Self> {
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidArgument(
                "probabilities must lie in [0, 1]".into(),
            ));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "probabilities sum to {total}, expected 1"
            )));
        }
        let support = probs.iter().map(|&p| p > 0.0).collect();
        Ok(Self {
            probs,
            support,
            logits: None,
        })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, token_id: u32) -> f64 {
        self.probs[token_id as usize]
    }

    pub fn in_support(&self, token_id: u32) -> bool {
        self.support
            .get(token_id as usize)
            .copied()
            .unwrap_or(false)
    }

    pub fn support_size(&self) -> usize {
        self.support.iter().filter(|s| **s).count()
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// `softmax(z / tau)` restricted to the tokens included by `mask`.
///
/// Excluded tokens (and `-inf` logits) get probability exactly zero. The
/// largest included logit is subtracted before exponentiation.
pub fn masked_temperature_softmax(
    logits: &[f64],
    tau: f64,
    mask: Option<&VocabMask>,
) -> Result<ProbabilityVector> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::InvalidTemperature(tau));
    }
    if let Some(mask) = mask {
        if mask.vocab_size() != logits.len() {
            return Err(Error::LengthMismatch {
                expected: mask.vocab_size(),
                found: logits.len(),
            });
        }
    }
    if let Some((index, &value)) = logits
        .iter()
        .enumerate()
        .find(|(_, v)| v.is_nan() || **v == f64::INFINITY)
    {
        return Err(Error::NonFiniteLogit { index, value });
    }

    let support: Vec<bool> = logits
        .iter()
        .enumerate()
        .map(|(i, z)| z.is_finite() && mask.is_none_or(|m| m.is_included(i as u32)))
        .collect();

    let max = logits
        .iter()
        .zip(&support)
        .filter(|(_, s)| **s)
        .map(|(z, _)| *z)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::EmptySupport);
    }

    let mut probs: Vec<f64> = logits
        .iter()
        .zip(&support)
        .map(|(z, s)| if *s { ((z - max) / tau).exp() } else { 0.0 })
        .collect();
    let total: f64 = probs.iter().sum();
    for p in &mut probs {
        *p /= total;
    }
    Ok(ProbabilityVector {
        probs,
        support,
        logits: Some(logits.to_vec()),
    })
}

/// Token ids sorted by descending probability, ties broken by ascending id.
/// Covers every token, including those outside the support.
///
/// Probabilities that are equal only because they rounded to the same float
/// (typically underflow to zero at small temperatures) are ordered by their
/// logits first, so the order is the same at every temperature.
pub fn canonical_order(p: &ProbabilityVector) -> Vec<u32> {
    let mut order: Vec<u32> = (0..p.len() as u32).collect();
    sort_canonical(&mut order, p);
    order
}

/// Canonical order restricted to the support.
pub(crate) fn support_order(p: &ProbabilityVector) -> Vec<u32> {
    let mut order: Vec<u32> = (0..p.len() as u32).filter(|&t| p.in_support(t)).collect();
    sort_canonical(&mut order, p);
    order
}

fn sort_canonical(order: &mut [u32], p: &ProbabilityVector) {
    let probs = &p.probs;
    match &p.logits {
        Some(z) => order.sort_unstable_by(|&a, &b| {
            let (a, b) = (a as usize, b as usize);
            probs[b]
                .total_cmp(&probs[a])
                .then(z[b].total_cmp(&z[a]))
                .then(a.cmp(&b))
        }),
        None => order.sort_unstable_by(|&a, &b| {
            probs[b as usize]
                .total_cmp(&probs[a as usize])
                .then(a.cmp(&b))
        }),
    }
}

/// Parameters for [`distribution_stats`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatsParams {
    pub eff_threshold: f64,
    pub tail_rank_cutoff: usize,
    pub conc_k1: usize,
    pub conc_k2: usize,
}

impl Default for StatsParams {
    fn default() -> Self {
        Self {
            eff_threshold: 1e-5,
            tail_rank_cutoff: 1000,
            conc_k1: 10,
            conc_k2: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistributionStats {
    /// Tokens with probability strictly above the threshold.
    pub effective_vocab_size: usize,
    /// Mass at canonical rank > cutoff (1-based).
    pub tail_mass: f64,
    /// Mass of the top `k1` over mass of the top `k2`.
    pub concentration: f64,
}

pub fn distribution_stats(p: &ProbabilityVector, params: StatsParams) -> Result<DistributionStats> {
    let n = p.len();
    if !(params.eff_threshold > 0.0 && params.eff_threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "eff_threshold {} must lie in (0, 1)",
            params.eff_threshold
        )));
    }
    if params.conc_k1 == 0 || params.conc_k1 > params.conc_k2 || params.conc_k2 > n {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= k1 <= k2 <= vocab_size, got k1={} k2={} vocab={n}",
            params.conc_k1, params.conc_k2
        )));
    }
    if params.tail_rank_cutoff > n {
        return Err(Error::InvalidArgument(format!(
            "tail_rank_cutoff {} exceeds vocab_size {n}",
            params.tail_rank_cutoff
        )));
    }

    let sorted: Vec<f64> = canonical_order(p)
        .into_iter()
        .map(|t| p.probs[t as usize])
        .collect();
    let effective_vocab_size = sorted.iter().filter(|&&x| x > params.eff_threshold).count();
    let tail_mass: f64 = sorted[params.tail_rank_cutoff..].iter().rev().sum();
    let top_k1: f64 = sorted[..params.conc_k1].iter().sum();
    let top_k2: f64 = sorted[..params.conc_k2].iter().sum();

    Ok(DistributionStats {
        effective_vocab_size,
        tail_mass: tail_mass.clamp(0.0, 1.0),
        concentration: (top_k1 / top_k2).clamp(0.0, 1.0),
    })
}
