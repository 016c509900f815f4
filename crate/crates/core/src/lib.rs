//! Conformal prediction sets for next-token prediction over a filtered
//! effective vocabulary.
//!
//! The pipeline: build a [`VocabMask`] from token metadata and held-out
//! logits ([`mask`]), score calibration records with APS and take the
//! split-conformal quantile ([`conformal`]), then build prediction sets and
//! measure coverage and efficiency ([`eval`]). [`synth`] generates
//! exchangeable test data with a known effective vocabulary; [`io`] holds
//! the file formats.

pub mod conformal;
pub mod distribution;
pub mod error;
pub mod eval;
pub mod io;
pub mod mask;
pub mod synth;
pub mod types;

pub use conformal::{
    aps_score, build_prediction_set, calibrate_pipeline, calibrate_threshold, conformal_rank,
    score_records, ApsScore, Predictor, ScoreSample,
};
pub use distribution::{
    canonical_order, distribution_stats, masked_temperature_softmax, DistributionStats,
    ProbabilityVector, StatsParams,
};
pub use error::{Error, ErrorKind, Result};
pub use eval::{evaluate, EvalOptions, EvalReport, StratumLabel, StratumReport};
pub use mask::{
    build_mask, empirical_filter, empirical_max_probs, structural_filter, validate_mask,
};
pub use synth::{generate, SynthConfig, SynthDataset};
pub use types::{
    derive_sample_rng, CalibrationResult, ConformalConfig, ExclusionReason, LogitRecord,
    MaskBuildConfig, PredictionSet, ScoreMode, TokenMetadata, VocabMask,
};
