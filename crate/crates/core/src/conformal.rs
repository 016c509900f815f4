//! APS non-conformity scoring, split-conformal calibration and
//! prediction-set construction.
//!
//! Scores carry two views of the same quantity: the cumulative mass `score`
//! (the usual APS value, summed from the most probable token down) and the
//! complementary `tail`, the mass beyond the score, summed from the least
//! probable token up. The two are equal up to rounding (`score + tail = 1`),
//! but only the tail keeps full relative precision when the score is within
//! an ulp of 1. Ordering and set construction therefore run on the tail;
//! `score` is what gets reported.

use std::cmp::Ordering;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::distribution::{masked_temperature_softmax, support_order, ProbabilityVector};
use crate::error::{Error, Result};
use crate::types::{
    derive_sample_rng, CalibrationResult, ConformalConfig, LogitRecord, PredictionSet, ScoreMode,
    VocabMask,
};

/// A non-conformity score (or threshold) in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ApsScore {
    score: f64,
    tail: f64,
}

impl ApsScore {
    /// Builds a score from its cumulative value alone.
    pub fn from_score(score: f64) -> Self {
        let score = score.clamp(0.0, 1.0);
        Self {
            score,
            tail: 1.0 - score,
        }
    }

    /// Builds a score from both views. Callers must keep them consistent.
    pub fn from_parts(score: f64, tail: f64) -> Self {
        Self {
            score: score.clamp(0.0, 1.0),
            tail: tail.clamp(0.0, 1.0),
        }
    }

    /// The trivial threshold: every token in the support.
    pub const FULL: Self = Self {
        score: 1.0,
        tail: 0.0,
    };

    pub fn score(&self) -> f64 {
        self.score
    }

    pub fn tail(&self) -> f64 {
        self.tail
    }

    /// `self <= threshold` in score order.
    pub fn is_within(&self, threshold: &ApsScore) -> bool {
        self.tail >= threshold.tail
    }

    /// Total order from least to most non-conforming.
    pub fn conformity_cmp(&self, other: &Self) -> Ordering {
        other
            .tail
            .total_cmp(&self.tail)
            .then(self.score.total_cmp(&other.score))
    }
}

/// One calibration score with the sample it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSample {
    pub sample_id: String,
    pub score: ApsScore,
}

/// Support tokens in canonical order with forward and backward partial sums.
struct Ranked {
    order: Vec<u32>,
    probs: Vec<f64>,
    /// `prefix[i]` = mass of positions `0..=i`.
    prefix: Vec<f64>,
    /// `after[i]` = mass of positions `i+1..`, accumulated from the end.
    after: Vec<f64>,
}

impl Ranked {
    fn new(p: &ProbabilityVector) -> Self {
        let order = support_order(p);
        let probs: Vec<f64> = order.iter().map(|&t| p.prob(t)).collect();
        let mut prefix = Vec::with_capacity(probs.len());
        let mut acc = 0.0;
        for &x in &probs {
            acc += x;
            prefix.push(acc);
        }
        let mut after = vec![0.0; probs.len()];
        for i in (0..probs.len().saturating_sub(1)).rev() {
            after[i] = after[i + 1] + probs[i + 1];
        }
        Self {
            order,
            probs,
            prefix,
            after,
        }
    }

    fn position(&self, target: u32) -> Option<usize> {
        self.order.iter().position(|&t| t == target)
    }
}

/// APS score of `target_id` under `p`.
///
/// Deterministic mode returns the mass of every token at least as probable as
/// the target, ties included. Randomized mode returns the mass preceding the
/// target in canonical order plus `U * p_target`, with `U` drawn from `rng`.
pub fn aps_score<R: Rng + ?Sized>(
    p: &ProbabilityVector,
    target_id: u32,
    mode: ScoreMode,
    rng: &mut R,
) -> Result<ApsScore> {
    match mode {
        ScoreMode::Deterministic => deterministic_score(p, target_id),
        ScoreMode::Randomized => randomized_score(p, target_id, rng.random::<f64>()),
    }
}

pub fn deterministic_score(p: &ProbabilityVector, target_id: u32) -> Result<ApsScore> {
    let ranked = ranked_for(p, target_id)?;
    let pos = ranked.position(target_id).expect("target is in support");
    let target_p = ranked.probs[pos];
    let last = pos
        + ranked.probs[pos + 1..]
            .iter()
            .take_while(|&&x| x >= target_p)
            .count();
    Ok(ApsScore::from_parts(
        ranked.prefix[last],
        ranked.after[last],
    ))
}

/// Randomized score with an explicit `u` in `[0, 1]`.
pub fn randomized_score(p: &ProbabilityVector, target_id: u32, u: f64) -> Result<ApsScore> {
    if !(0.0..=1.0).contains(&u) {
        return Err(Error::InvalidArgument(format!("u = {u} outside [0, 1]")));
    }
    let ranked = ranked_for(p, target_id)?;
    let pos = ranked.position(target_id).expect("target is in support");
    let target_p = ranked.probs[pos];
    let before = if pos == 0 {
        0.0
    } else {
        ranked.prefix[pos - 1]
    };
    Ok(ApsScore::from_parts(
        before + u * target_p,
        ranked.after[pos] + (1.0 - u) * target_p,
    ))
}

fn ranked_for(p: &ProbabilityVector, target_id: u32) -> Result<Ranked> {
    if !p.in_support(target_id) {
        return Err(Error::TargetNotInSupport {
            sample_id: None,
            target_id,
        });
    }
    Ok(Ranked::new(p))
}

/// Order-statistic rank `k = ceil((n + 1)(1 - alpha))`, at least 1.
///
/// Products within 1e-9 (relative) of an integer snap to it, so e.g.
/// `alpha = 0.1, n = 99` gives 90 rather than 91.
pub fn conformal_rank(n: usize, alpha: f64) -> usize {
    let x = (n as f64 + 1.0) * (1.0 - alpha);
    let nearest = x.round();
    let k = if (x - nearest).abs() <= 1e-9 * x.max(1.0) {
        nearest
    } else {
        x.ceil()
    };
    (k as usize).max(1)
}

/// Split-conformal threshold: the `k`-th smallest score, or the full-mass
/// threshold when `k > n`.
pub fn calibrate_threshold(
    scores: &[ScoreSample],
    config: &ConformalConfig,
) -> Result<CalibrationResult> {
    config.validate()?;
    if scores.is_empty() {
        return Err(Error::NoCalibrationData);
    }
    let mut sorted: Vec<ApsScore> = scores.iter().map(|s| s.score).collect();
    sorted.sort_by(ApsScore::conformity_cmp);

    let n = sorted.len();
    let k = conformal_rank(n, config.alpha);
    let threshold = if k > n { ApsScore::FULL } else { sorted[k - 1] };

    Ok(CalibrationResult {
        threshold: threshold.score(),
        threshold_tail: threshold.tail(),
        n_calibration: n,
        config: config.clone(),
        score_samples_digest: digest_scores(&sorted),
    })
}

fn digest_scores(sorted: &[ApsScore]) -> String {
    let mut hasher = Sha256::new();
    for s in sorted {
        hasher.update(s.score().to_bits().to_le_bytes());
        hasher.update(s.tail().to_bits().to_le_bytes());
    }
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

impl CalibrationResult {
    pub fn threshold_score(&self) -> ApsScore {
        ApsScore::from_parts(self.threshold, self.threshold_tail)
    }
}

/// Tokens in canonical order until the cumulative mass first exceeds the
/// threshold, the crossing token included. Always nonempty; never larger than
/// the support.
pub fn build_prediction_set(p: &ProbabilityVector, threshold: ApsScore) -> PredictionSet {
    let ranked = Ranked::new(p);
    let within = ranked
        .after
        .iter()
        .take_while(|&&a| a >= threshold.tail())
        .count();
    let size = (within + 1).min(ranked.order.len());
    let token_ids = ranked.order[..size].to_vec();
    let token_probs = ranked.probs[..size].to_vec();
    PredictionSet {
        cumulative_mass: ranked.prefix[size - 1],
        token_ids,
        token_probs,
        size,
    }
}

/// Scores every record under `mask` and `config`. Randomized scores draw `U`
/// from the stream derived from `(config.seed, sample_id)`.
pub fn score_records(
    records: &[LogitRecord],
    mask: Option<&VocabMask>,
    config: &ConformalConfig,
) -> Result<Vec<ScoreSample>> {
    config.validate()?;
    records
        .par_iter()
        .map(|rec| {
            let p = masked_temperature_softmax(rec.logits(), config.temperature, mask)?;
            let mut rng = derive_sample_rng(config.seed, rec.sample_id());
            let score = aps_score(&p, rec.target_id(), config.score_mode, &mut rng)
                .map_err(|e| e.with_sample(rec.sample_id()))?;
            Ok(ScoreSample {
                sample_id: rec.sample_id().to_owned(),
                score,
            })
        })
        .collect()
}

/// Mask, temperature-scale and score every calibration record, then compute
/// the threshold. The result's `config.mask_id` identifies `mask`.
pub fn calibrate_pipeline(
    records: &[LogitRecord],
    mask: Option<&VocabMask>,
    config: &ConformalConfig,
) -> Result<CalibrationResult> {
    if records.is_empty() {
        return Err(Error::NoCalibrationData);
    }
    let config = config.clone().with_mask(mask);
    let scores = score_records(records, mask, &config)?;
    calibrate_threshold(&scores, &config)
}

/// A calibrated predictor: `C(x)` for new logit vectors.
#[derive(Debug, Clone)]
pub struct Predictor<'a> {
    calibration: &'a CalibrationResult,
    mask: Option<&'a VocabMask>,
}

impl<'a> Predictor<'a> {
    pub fn new(calibration: &'a CalibrationResult, mask: Option<&'a VocabMask>) -> Result<Self> {
        calibration.config.check_mask(mask)?;
        Ok(Self { calibration, mask })
    }

    pub fn distribution(&self, logits: &[f64]) -> Result<ProbabilityVector> {
        masked_temperature_softmax(logits, self.calibration.config.temperature, self.mask)
    }

    pub fn predict(&self, logits: &[f64]) -> Result<PredictionSet> {
        let p = self.distribution(logits)?;
        Ok(build_prediction_set(&p, self.calibration.threshold_score()))
    }

    pub fn calibration(&self) -> &CalibrationResult {
        self.calibration
    }

    pub fn mask(&self) -> Option<&VocabMask> {
        self.mask
    }
}
