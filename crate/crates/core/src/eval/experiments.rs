//! Multi-run experiments: temperature sweeps, the partial-coverage bound
//! under an imperfect mask, and cross-domain transfer.

use serde::{Deserialize, Serialize};

use super::{evaluate, EvalOptions, EvalReport};
use crate::conformal::calibrate_pipeline;
use crate::error::{Error, Result};
use crate::synth::{generate, SynthConfig};
use crate::types::{ConformalConfig, LogitRecord, ScoreMode, VocabMask};

/// Coverage slack accepted when selecting a temperature.
pub const DEFAULT_SWEEP_TOLERANCE: f64 = 0.005;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub temperature: f64,
    pub threshold: f64,
    pub threshold_tail: f64,
    pub coverage: f64,
    pub coverage_ci: (f64, f64),
    pub mean_set_size: f64,
    pub median_set_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub alpha: f64,
    pub score_mode: ScoreMode,
    pub tolerance: f64,
    pub rows: Vec<SweepRow>,
    /// Smallest mean set size among rows with coverage >= 1 - alpha - tolerance
    /// (earliest grid entry on ties); `None` if no row qualifies.
    pub selected_temperature: Option<f64>,
}

/// Recalibrates on `cal` and evaluates on `test` at every temperature in
/// `grid`. `config.temperature` is ignored.
pub fn temperature_sweep(
    cal: &[LogitRecord],
    test: &[LogitRecord],
    mask: Option<&VocabMask>,
    grid: &[f64],
    config: &ConformalConfig,
    tolerance: f64,
    options: &EvalOptions,
) -> Result<SweepReport> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("temperature grid is empty".into()));
    }
    if !(tolerance.is_finite() && tolerance >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "tolerance {tolerance} must be >= 0"
        )));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for &tau in grid {
        let cfg = ConformalConfig {
            temperature: tau,
            ..config.clone()
        };
        let calib = calibrate_pipeline(cal, mask, &cfg)?;
        let report = evaluate(test, &calib, mask, options)?;
        rows.push(SweepRow {
            temperature: tau,
            threshold: calib.threshold,
            threshold_tail: calib.threshold_tail,
            coverage: report.coverage,
            coverage_ci: report.coverage_ci,
            mean_set_size: report.mean_set_size,
            median_set_size: report.median_set_size,
        });
    }
    let floor = 1.0 - config.alpha - tolerance;
    let selected_temperature = rows
        .iter()
        .filter(|r| r.coverage >= floor)
        .fold(None::<&SweepRow>, |best, r| match best {
            Some(b) if b.mean_set_size <= r.mean_set_size => Some(b),
            _ => Some(r),
        })
        .map(|r| r.temperature);
    Ok(SweepReport {
        alpha: config.alpha,
        score_mode: config.score_mode,
        tolerance,
        rows,
        selected_temperature,
    })
}

/// Monte Carlo check of coverage `>= (1 - alpha) * p` when a fraction
/// `1 - p` of targets falls outside the mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialCoverageConfig {
    /// `n_samples` is ignored; `n_calibration + n_test` samples are drawn.
    pub synth: SynthConfig,
    pub alpha: f64,
    pub n_calibration: usize,
    pub n_test: usize,
    pub score_mode: ScoreMode,
    pub temperature: f64,
}

impl PartialCoverageConfig {
    pub fn new(synth: SynthConfig, alpha: f64) -> Self {
        Self {
            synth,
            alpha,
            n_calibration: 2000,
            n_test: 5000,
            score_mode: ScoreMode::Deterministic,
            temperature: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartialCoverageReport {
    pub alpha: f64,
    /// `1 - target_outside_prob`.
    pub p: f64,
    pub bound: f64,
    pub measured_coverage: f64,
    /// Three binomial standard deviations of the test-set coverage at the bound.
    pub margin: f64,
    pub holds: bool,
    pub n_calibration_used: usize,
    pub n_calibration_dropped: usize,
    pub n_test: usize,
    pub n_target_outside_support: usize,
    pub report: EvalReport,
}

/// Generates data, calibrates on the in-mask calibration targets only (the
/// others have no defined score) and evaluates on every test record,
/// counting out-of-mask targets as misses. The mask is the generator's
/// true live set.
pub fn verify_partial_coverage(
    config: &PartialCoverageConfig,
    options: &EvalOptions,
) -> Result<PartialCoverageReport> {
    if config.n_calibration == 0 {
        return Err(Error::NoCalibrationData);
    }
    if config.n_test == 0 {
        return Err(Error::NoTestData);
    }
    let synth = SynthConfig {
        n_samples: config.n_calibration + config.n_test,
        ..config.synth.clone()
    };
    let data = generate(&synth)?;
    let mask = &data.true_v_star;
    let (cal, test) = data.records.split_at(config.n_calibration);
    let cal: Vec<LogitRecord> = cal
        .iter()
        .filter(|r| mask.is_included(r.target_id()))
        .cloned()
        .collect();

    let conformal = ConformalConfig::new(
        config.alpha,
        config.temperature,
        config.score_mode,
        synth.seed,
    )?;
    let calib = calibrate_pipeline(&cal, Some(mask), &conformal)?;
    let report = evaluate(test, &calib, Some(mask), options)?;

    let p = 1.0 - synth.target_outside_prob;
    let bound = (1.0 - config.alpha) * p;
    let margin = 3.0 * (bound * (1.0 - bound) / config.n_test as f64).sqrt();
    Ok(PartialCoverageReport {
        alpha: config.alpha,
        p,
        bound,
        measured_coverage: report.coverage,
        margin,
        holds: report.coverage >= bound - margin,
        n_calibration_used: cal.len(),
        n_calibration_dropped: config.n_calibration - cal.len(),
        n_test: config.n_test,
        n_target_outside_support: report.n_target_outside_support,
        report,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub report: EvalReport,
    /// Test targets excluded by the source-domain mask (flagged, not errors).
    pub n_target_outside_mask: usize,
    pub target_outside_mask_ids: Vec<String>,
}

/// Evaluates a source-domain calibration and mask on target-domain records.
pub fn transfer_evaluate(
    calib: &crate::types::CalibrationResult,
    mask: &VocabMask,
    records: &[LogitRecord],
    options: &EvalOptions,
) -> Result<TransferReport> {
    let report = evaluate(records, calib, Some(mask), options)?;
    let target_outside_mask_ids: Vec<String> = records
        .iter()
        .filter(|r| !mask.is_included(r.target_id()))
        .map(|r| r.sample_id().to_owned())
        .collect();
    Ok(TransferReport {
        report,
        n_target_outside_mask: target_outside_mask_ids.len(),
        target_outside_mask_ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::generate;

    fn data(seed: u64, n: usize) -> crate::synth::SynthDataset {
        generate(&SynthConfig {
            vocab_size: 200,
            n_samples: n,
            seed,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn degenerate_sweep_matches_single_run() {
        let ds = data(1, 600);
        let (cal, test) = ds.records.split_at(300);
        let mask = Some(&ds.true_v_star);
        let cfg = ConformalConfig::default();
        let opts = EvalOptions::default();
        let sweep = temperature_sweep(cal, test, mask, &[1.0], &cfg, 0.005, &opts).unwrap();
        let calib = calibrate_pipeline(cal, mask, &cfg).unwrap();
        let single = evaluate(test, &calib, mask, &opts).unwrap();
        assert_eq!(sweep.rows.len(), 1);
        assert_eq!(sweep.rows[0].coverage, single.coverage);
        assert_eq!(sweep.rows[0].mean_set_size, single.mean_set_size);
        assert_eq!(sweep.rows[0].threshold, calib.threshold);
    }

    #[test]
    fn sweep_selection() {
        let ds = data(2, 600);
        let (cal, test) = ds.records.split_at(300);
        let cfg = ConformalConfig::default();
        let grid = [0.5, 1.0, 2.0];
        let s =
            temperature_sweep(cal, test, None, &grid, &cfg, 1.0, &EvalOptions::default()).unwrap();
        let best = s
            .rows
            .iter()
            .map(|r| r.mean_set_size)
            .fold(f64::INFINITY, f64::min);
        let chosen = s
            .rows
            .iter()
            .find(|r| Some(r.temperature) == s.selected_temperature);
        assert_eq!(chosen.unwrap().mean_set_size, best);
        assert!(
            temperature_sweep(cal, test, None, &[], &cfg, 0.0, &EvalOptions::default()).is_err()
        );
    }

    #[test]
    fn self_transfer_equals_evaluate() {
        let ds = data(3, 400);
        let (cal, test) = ds.records.split_at(200);
        let mask = &ds.true_v_star;
        let calib = calibrate_pipeline(cal, Some(mask), &ConformalConfig::default()).unwrap();
        let opts = EvalOptions::default();
        let t = transfer_evaluate(&calib, mask, test, &opts).unwrap();
        assert_eq!(t.report, evaluate(test, &calib, Some(mask), &opts).unwrap());
        assert_eq!(t.n_target_outside_mask, 0);
    }

    #[test]
    fn transfer_counts_planted_outside_targets() {
        let a = data(4, 300);
        let b = generate(&SynthConfig {
            vocab_size: 200,
            n_samples: 500,
            seed: 4,
            target_outside_prob: 0.1,
            zipf_exponent: 1.2,
            ..Default::default()
        })
        .unwrap();
        // Same seed, same vocabulary split.
        assert_eq!(a.true_v_star, b.true_v_star);
        let calib = calibrate_pipeline(
            &a.records,
            Some(&a.true_v_star),
            &ConformalConfig::default(),
        )
        .unwrap();
        let t =
            transfer_evaluate(&calib, &a.true_v_star, &b.records, &EvalOptions::default()).unwrap();
        let planted = b
            .records
            .iter()
            .filter(|r| !b.true_v_star.is_included(r.target_id()))
            .count();
        assert!(planted > 0);
        assert_eq!(t.n_target_outside_mask, planted);
        assert_eq!(t.report.n_target_outside_support, planted);
    }

    #[test]
    fn partial_coverage_full_p_reduces_to_standard_guarantee() {
        let cfg = PartialCoverageConfig {
            n_calibration: 500,
            n_test: 1000,
            ..PartialCoverageConfig::new(
                SynthConfig {
                    vocab_size: 200,
                    seed: 5,
                    ..Default::default()
                },
                0.1,
            )
        };
        let r = verify_partial_coverage(&cfg, &EvalOptions::default()).unwrap();
        assert_eq!(r.p, 1.0);
        assert_eq!(r.bound, 0.9);
        assert_eq!(r.n_calibration_dropped, 0);
        assert!(r.holds, "coverage {}", r.measured_coverage);
    }
}
