//! Coverage, set-size and efficiency metrics for a calibrated predictor.

mod bootstrap;
mod experiments;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conformal::{build_prediction_set, Predictor};
use crate::error::{Error, Result};
use crate::types::{CalibrationResult, LogitRecord, PredictionSet, VocabMask};

pub use bootstrap::{bootstrap_ci, DEFAULT_RESAMPLES};
pub use experiments::{
    temperature_sweep, transfer_evaluate, verify_partial_coverage, PartialCoverageConfig,
    PartialCoverageReport, SweepReport, SweepRow, TransferReport, DEFAULT_SWEEP_TOLERANCE,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub n_resamples: usize,
    pub bootstrap_seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            n_resamples: DEFAULT_RESAMPLES,
            bootstrap_seed: 0,
        }
    }
}

/// Bands of the target's probability under the scoring distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StratumLabel {
    /// `p_y > 0.5`
    High,
    /// `0.1 < p_y <= 0.5`
    Medium,
    /// `p_y <= 0.1`, including out-of-support targets (`p_y = 0`).
    Low,
}

impl StratumLabel {
    pub const ALL: [StratumLabel; 3] =
        [StratumLabel::High, StratumLabel::Medium, StratumLabel::Low];

    pub fn of(p_target: f64) -> Self {
        if p_target > 0.5 {
            StratumLabel::High
        } else if p_target > 0.1 {
            StratumLabel::Medium
        } else {
            StratumLabel::Low
        }
    }

    /// Half-open interval `(lo, hi]`.
    pub fn bounds(self) -> (f64, f64) {
        match self {
            StratumLabel::High => (0.5, 1.0),
            StratumLabel::Medium => (0.1, 0.5),
            StratumLabel::Low => (0.0, 0.1),
        }
    }
}

/// Coverage and size statistics within one stratum. The statistics are
/// `None` when the stratum is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumReport {
    pub label: StratumLabel,
    pub boundaries: (f64, f64),
    pub n: usize,
    pub n_covered: usize,
    pub coverage: Option<f64>,
    pub mean_size: Option<f64>,
    /// Population standard deviation.
    pub std_size: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfigSnapshot {
    pub calibration: CalibrationResult,
    pub vocab_size: usize,
    pub support_size: usize,
    pub n_resamples: usize,
    pub bootstrap_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_test: usize,
    pub n_covered: usize,
    pub coverage: f64,
    /// 95% percentile-bootstrap interval, widened if needed to contain `coverage`.
    pub coverage_ci: (f64, f64),
    pub mean_set_size: f64,
    /// Lower median.
    pub median_set_size: usize,
    /// `1 - mean_set_size / vocab_size`, against the full vocabulary.
    pub efficiency_eta: f64,
    /// Test targets outside the scoring support; each counts as a miss.
    pub n_target_outside_support: usize,
    pub strata: Vec<StratumReport>,
    pub config_snapshot: EvalConfigSnapshot,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "n_test,coverage,ci_lo,ci_hi,mean_set_size,median_set_size,efficiency_eta,alpha,temperature,score_mode,mask_id,threshold,n_calibration,n_target_outside_support,coverage_high,coverage_medium,coverage_low";

    pub fn csv_row(&self) -> String {
        let cal = &self.config_snapshot.calibration;
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        let stratum = |label| {
            opt(self
                .strata
                .iter()
                .find(|s| s.label == label)
                .and_then(|s| s.coverage))
        };
        let mode = match cal.config.score_mode {
            crate::ScoreMode::Deterministic => "deterministic",
            crate::ScoreMode::Randomized => "randomized",
        };
        [
            self.n_test.to_string(),
            self.coverage.to_string(),
            self.coverage_ci.0.to_string(),
            self.coverage_ci.1.to_string(),
            self.mean_set_size.to_string(),
            self.median_set_size.to_string(),
            self.efficiency_eta.to_string(),
            cal.config.alpha.to_string(),
            cal.config.temperature.to_string(),
            mode.to_string(),
            cal.config.mask_id.clone().unwrap_or_default(),
            cal.threshold.to_string(),
            cal.n_calibration.to_string(),
            self.n_target_outside_support.to_string(),
            stratum(StratumLabel::High),
            stratum(StratumLabel::Medium),
            stratum(StratumLabel::Low),
        ]
        .join(",")
    }
}

/// Per-record evaluation result.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutcome {
    pub sample_id: String,
    pub target_id: u32,
    pub p_target: f64,
    pub in_support: bool,
    pub covered: bool,
    pub set: PredictionSet,
}

/// Prediction sets for every record, in input order.
pub fn predict_records(
    records: &[LogitRecord],
    predictor: &Predictor<'_>,
) -> Result<Vec<SampleOutcome>> {
    if let Some(first) = records.first() {
        let expected = predictor
            .mask()
            .map_or(first.vocab_size(), VocabMask::vocab_size);
        if let Some(bad) = records.iter().find(|r| r.vocab_size() != expected) {
            return Err(Error::LengthMismatch {
                expected,
                found: bad.vocab_size(),
            });
        }
    }
    let threshold = predictor.calibration().threshold_score();
    records
        .par_iter()
        .map(|rec| {
            let p = predictor.distribution(rec.logits())?;
            let set = build_prediction_set(&p, threshold);
            let target = rec.target_id();
            Ok(SampleOutcome {
                sample_id: rec.sample_id().to_owned(),
                target_id: target,
                p_target: p.prob(target),
                in_support: p.in_support(target),
                covered: set.contains(target),
                set,
            })
        })
        .collect()
}

/// Evaluates `calib` (with the mask it was calibrated under) on a test stream.
pub fn evaluate(
    records: &[LogitRecord],
    calib: &CalibrationResult,
    mask: Option<&VocabMask>,
    options: &EvalOptions,
) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::NoTestData);
    }
    let predictor = Predictor::new(calib, mask)?;
    let outcomes = predict_records(records, &predictor)?;
    summarize(&outcomes, records[0].vocab_size(), calib, mask, options)
}

/// Aggregates per-record outcomes into a report.
pub fn summarize(
    outcomes: &[SampleOutcome],
    vocab_size: usize,
    calib: &CalibrationResult,
    mask: Option<&VocabMask>,
    options: &EvalOptions,
) -> Result<EvalReport> {
    if outcomes.is_empty() {
        return Err(Error::NoTestData);
    }
    let n = outcomes.len();
    let indicators: Vec<f64> = outcomes
        .iter()
        .map(|o| if o.covered { 1.0 } else { 0.0 })
        .collect();
    let n_covered = outcomes.iter().filter(|o| o.covered).count();
    let coverage = n_covered as f64 / n as f64;
    let (lo, hi) = bootstrap_ci(&indicators, options.n_resamples, options.bootstrap_seed)?;

    let mut sizes: Vec<usize> = outcomes.iter().map(|o| o.set.size).collect();
    let mean_set_size = sizes.iter().sum::<usize>() as f64 / n as f64;
    sizes.sort_unstable();
    let median_set_size = sizes[(n - 1) / 2];

    let strata = StratumLabel::ALL
        .iter()
        .map(|&label| stratum_report(label, outcomes))
        .collect();

    Ok(EvalReport {
        n_test: n,
        n_covered,
        coverage,
        coverage_ci: (lo.min(coverage), hi.max(coverage)),
        mean_set_size,
        median_set_size,
        efficiency_eta: 1.0 - mean_set_size / vocab_size as f64,
        n_target_outside_support: outcomes.iter().filter(|o| !o.in_support).count(),
        strata,
        config_snapshot: EvalConfigSnapshot {
            calibration: calib.clone(),
            vocab_size,
            support_size: mask.map_or(vocab_size, VocabMask::included_count),
            n_resamples: options.n_resamples,
            bootstrap_seed: options.bootstrap_seed,
        },
    })
}

fn stratum_report(label: StratumLabel, outcomes: &[SampleOutcome]) -> StratumReport {
    let members: Vec<&SampleOutcome> = outcomes
        .iter()
        .filter(|o| StratumLabel::of(o.p_target) == label)
        .collect();
    let n = members.len();
    let n_covered = members.iter().filter(|o| o.covered).count();
    let (coverage, mean_size, std_size) = if n == 0 {
        (None, None, None)
    } else {
        let nf = n as f64;
        let mean = members.iter().map(|o| o.set.size as f64).sum::<f64>() / nf;
        let var = members
            .iter()
            .map(|o| (o.set.size as f64 - mean).powi(2))
            .sum::<f64>()
            / nf;
        (Some(n_covered as f64 / nf), Some(mean), Some(var.sqrt()))
    };
    StratumReport {
        label,
        boundaries: label.bounds(),
        n,
        n_covered,
        coverage,
        mean_size,
        std_size,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conformal::ApsScore;
    use crate::distribution::{canonical_order, masked_temperature_softmax};
    use crate::types::{ConformalConfig, ExclusionReason};

    fn calib(threshold: ApsScore, mask: Option<&VocabMask>) -> CalibrationResult {
        CalibrationResult {
            threshold: threshold.score(),
            threshold_tail: threshold.tail(),
            n_calibration: 1,
            config: ConformalConfig::default().with_mask(mask),
            score_samples_digest: String::new(),
        }
    }

    fn records() -> Vec<LogitRecord> {
        let rows: [(&[f64], u32); 5] = [
            (&[3.0, 1.0, 0.0, -1.0], 0),
            (&[0.0, 2.0, 0.5, 0.0], 2),
            (&[1.0, 1.0, 1.0, 1.0], 3),
            (&[-2.0, 0.0, 4.0, 1.0], 2),
            (&[0.0, 0.1, 0.2, 5.0], 0),
        ];
        rows.iter()
            .enumerate()
            .map(|(i, (z, t))| LogitRecord::new(format!("t{i}"), z.to_vec(), *t).unwrap())
            .collect()
    }

    #[test]
    fn full_threshold_covers_everything() {
        let mask = VocabMask::from_included_ids(4, [0, 1, 2], ExclusionReason::Empirical).unwrap();
        let recs: Vec<_> = records()
            .into_iter()
            .filter(|r| r.target_id() != 3)
            .collect();
        let c = calib(ApsScore::FULL, Some(&mask));
        let r = evaluate(&recs, &c, Some(&mask), &EvalOptions::default()).unwrap();
        assert_eq!(r.coverage, 1.0);
        assert_eq!(r.coverage_ci, (1.0, 1.0));
        assert_eq!(r.mean_set_size, 3.0);
        assert_eq!(r.efficiency_eta, 1.0 - 3.0 / 4.0);
        assert_eq!(r.config_snapshot.support_size, 3);
    }

    #[test]
    fn zero_threshold_is_top1_accuracy() {
        let recs = records();
        let c = calib(ApsScore::from_score(0.0), None);
        let r = evaluate(&recs, &c, None, &EvalOptions::default()).unwrap();
        let hits = recs
            .iter()
            .filter(|rec| {
                let p = masked_temperature_softmax(rec.logits(), 1.0, None).unwrap();
                canonical_order(&p)[0] == rec.target_id()
            })
            .count();
        assert_eq!(r.mean_set_size, 1.0);
        assert_eq!(r.median_set_size, 1);
        assert_eq!(r.n_covered, hits);
        assert_eq!(r.coverage, hits as f64 / recs.len() as f64);
    }

    #[test]
    fn out_of_support_targets_are_misses() {
        let mask = VocabMask::from_included_ids(4, [0, 1, 2], ExclusionReason::Empirical).unwrap();
        let c = calib(ApsScore::FULL, Some(&mask));
        let r = evaluate(&records(), &c, Some(&mask), &EvalOptions::default()).unwrap();
        assert_eq!(r.n_target_outside_support, 1);
        assert_eq!(r.n_covered, 4);
        let low = r
            .strata
            .iter()
            .find(|s| s.label == StratumLabel::Low)
            .unwrap();
        assert!(low.n >= 1);
    }

    #[test]
    fn strata_partition() {
        assert_eq!(StratumLabel::of(0.51), StratumLabel::High);
        assert_eq!(StratumLabel::of(0.5), StratumLabel::Medium);
        assert_eq!(StratumLabel::of(0.1), StratumLabel::Low);
        assert_eq!(StratumLabel::of(0.0), StratumLabel::Low);
        let c = calib(ApsScore::from_score(0.7), None);
        let r = evaluate(&records(), &c, None, &EvalOptions::default()).unwrap();
        assert_eq!(r.strata.iter().map(|s| s.n).sum::<usize>(), r.n_test);
        assert_eq!(
            r.strata.iter().map(|s| s.n_covered).sum::<usize>(),
            r.n_covered
        );
    }

    #[test]
    fn errors() {
        let c = calib(ApsScore::FULL, None);
        assert!(matches!(
            evaluate(&[], &c, None, &EvalOptions::default()),
            Err(Error::NoTestData)
        ));
        let mask = VocabMask::full(4).unwrap();
        assert!(matches!(
            evaluate(&records(), &c, Some(&mask), &EvalOptions::default()),
            Err(Error::MaskMismatch { .. })
        ));
        let mut recs = records();
        recs.push(LogitRecord::new("short", vec![0.0; 3], 0).unwrap());
        assert!(matches!(
            evaluate(&recs, &c, None, &EvalOptions::default()),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn csv_row_matches_header() {
        let c = calib(ApsScore::from_score(0.7), None);
        let r = evaluate(&records(), &c, None, &EvalOptions::default()).unwrap();
        assert_eq!(
            r.csv_row().split(',').count(),
            EvalReport::CSV_HEADER.split(',').count()
        );
    }
}
