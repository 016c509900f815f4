//! Shared domain types and the per-sample randomness contract.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Random source handed to anything that needs per-sample randomness.
pub type SampleRng = ChaCha8Rng;

/// Returns a random source whose stream depends only on `(seed, sample_id)`.
///
/// Streams are never shared between samples, so results do not depend on the
/// order in which records are processed.
pub fn derive_sample_rng(seed: u64, sample_id: &str) -> SampleRng {
    let mut hasher = Sha256::new();
    hasher.update(b"vacp/sample-rng/v1");
    hasher.update(seed.to_le_bytes());
    hasher.update((sample_id.len() as u64).to_le_bytes());
    hasher.update(sample_id.as_bytes());
    let digest: [u8; 32] = hasher.finalize().into();
    ChaCha8Rng::from_seed(digest)
}

/// One evaluation sample: the full logit vector plus the ground-truth token.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitRecord {
    sample_id: String,
    logits: Vec<f64>,
    target_id: u32,
}

impl LogitRecord {
    /// Builds a record, rejecting NaN / +inf logits and out-of-range targets.
    /// Negative infinity is accepted as the masked-out sentinel.
    pub fn new(sample_id: impl Into<String>, logits: Vec<f64>, target_id: u32) -> Result<Self> {
        if let Some((index, &value)) = logits
            .iter()
            .enumerate()
            .find(|(_, v)| v.is_nan() || **v == f64::INFINITY)
        {
            return Err(Error::NonFiniteLogit { index, value });
        }
        if target_id as usize >= logits.len() {
            return Err(Error::InvalidArgument(format!(
                "target_id {target_id} out of range for vocab_size {}",
                logits.len()
            )));
        }
        Ok(Self {
            sample_id: sample_id.into(),
            logits,
            target_id,
        })
    }

    pub fn sample_id(&self) -> &str {
        &self.sample_id
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn target_id(&self) -> u32 {
        self.target_id
    }

    pub fn vocab_size(&self) -> usize {
        self.logits.len()
    }
}

/// Tokenizer-side facts about one token, used by the structural filter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenMetadata {
    pub token_id: u32,
    pub surface: String,
    pub is_special: bool,
    pub is_reserved: bool,
    pub is_printable: bool,
}

impl TokenMetadata {
    /// An ordinary printable token with no flags set.
    pub fn plain(token_id: u32, surface: impl Into<String>) -> Self {
        Self {
            token_id,
            surface: surface.into(),
            is_special: false,
            is_reserved: false,
            is_printable: true,
        }
    }

    pub fn is_structurally_excluded(&self) -> bool {
        self.is_special || self.is_reserved || !self.is_printable
    }
}

/// Why a token was removed from the effective vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExclusionReason {
    Structural,
    Empirical,
}

/// Settings that produced a mask; stored alongside it for provenance.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MaskBuildConfig {
    /// Probability threshold of the empirical filter (strict `>`), if applied.
    pub empirical_threshold: Option<f64>,
    /// Temperature used to compute the validation max-probabilities.
    pub empirical_tau: Option<f64>,
    /// Validation samples the empirical filter saw. Later stages refuse to
    /// calibrate or evaluate on any of these.
    #[serde(default)]
    pub validation_sample_ids: Vec<String>,
}

/// Inclusion vector over token ids defining the effective vocabulary V*.
///
/// Every excluded token carries exactly one [`ExclusionReason`], and at least
/// one token is always included.
#[derive(Debug, Clone, PartialEq)]
pub struct VocabMask {
    exclusions: Vec<Option<ExclusionReason>>,
    build_config: MaskBuildConfig,
}

impl VocabMask {
    /// Mask including every token.
    pub fn full(vocab_size: usize) -> Result<Self> {
        Self::from_exclusions(vec![None; vocab_size], MaskBuildConfig::default())
    }

    /// Builds a mask from per-token exclusion tags (`None` = included).
    pub fn from_exclusions(
        exclusions: Vec<Option<ExclusionReason>>,
        build_config: MaskBuildConfig,
    ) -> Result<Self> {
        if !exclusions.iter().any(Option::is_none) {
            return Err(Error::EmptySupport);
        }
        Ok(Self {
            exclusions,
            build_config,
        })
    }

    /// Mask that includes exactly `ids`, tagging everything else with `reason`.
    pub fn from_included_ids(
        vocab_size: usize,
        ids: impl IntoIterator<Item = u32>,
        reason: ExclusionReason,
    ) -> Result<Self> {
        let mut exclusions = vec![Some(reason); vocab_size];
        for id in ids {
            let slot = exclusions.get_mut(id as usize).ok_or_else(|| {
                Error::InvalidArgument(format!("token {id} out of range for vocab {vocab_size}"))
            })?;
            *slot = None;
        }
        Self::from_exclusions(exclusions, MaskBuildConfig::default())
    }

    pub fn vocab_size(&self) -> usize {
        self.exclusions.len()
    }

    pub fn is_included(&self, token_id: u32) -> bool {
        matches!(self.exclusions.get(token_id as usize), Some(None))
    }

    pub fn exclusion_reason(&self, token_id: u32) -> Option<ExclusionReason> {
        self.exclusions.get(token_id as usize).copied().flatten()
    }

    pub fn exclusions(&self) -> &[Option<ExclusionReason>] {
        &self.exclusions
    }

    pub fn included(&self) -> impl Iterator<Item = bool> + '_ {
        self.exclusions.iter().map(Option::is_none)
    }

    pub fn included_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.exclusions
            .iter()
            .enumerate()
            .filter(|(_, r)| r.is_none())
            .map(|(i, _)| i as u32)
    }

    pub fn included_count(&self) -> usize {
        self.exclusions.iter().filter(|r| r.is_none()).count()
    }

    pub fn excluded_count(&self, reason: ExclusionReason) -> usize {
        self.exclusions
            .iter()
            .filter(|r| **r == Some(reason))
            .count()
    }

    pub fn build_config(&self) -> &MaskBuildConfig {
        &self.build_config
    }

    pub fn with_build_config(mut self, build_config: MaskBuildConfig) -> Self {
        self.build_config = build_config;
        self
    }

    /// Content hash of the inclusion vector (first 16 hex digits of SHA-256).
    /// Provenance does not affect the id.
    pub fn id(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.vocab_size() as u64).to_le_bytes());
        let mut byte = 0u8;
        for (i, inc) in self.included().enumerate() {
            if inc {
                byte |= 1 << (i % 8);
            }
            if i % 8 == 7 {
                hasher.update([byte]);
                byte = 0;
            }
        }
        if !self.vocab_size().is_multiple_of(8) {
            hasher.update([byte]);
        }
        let digest = hasher.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// How the APS non-conformity score treats the target's own mass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    /// Total mass of every token at least as probable as the target.
    #[default]
    Deterministic,
    /// Mass preceding the target in canonical order plus `U * p_target`.
    Randomized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformalConfig {
    pub alpha: f64,
    pub temperature: f64,
    pub score_mode: ScoreMode,
    pub mask_id: Option<String>,
    pub seed: u64,
}

impl ConformalConfig {
    pub fn new(alpha: f64, temperature: f64, score_mode: ScoreMode, seed: u64) -> Result<Self> {
        let config = Self {
            alpha,
            temperature,
            score_mode,
            mask_id: None,
            seed,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn with_mask(mut self, mask: Option<&VocabMask>) -> Self {
        self.mask_id = mask.map(VocabMask::id);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidAlpha(self.alpha));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::InvalidTemperature(self.temperature));
        }
        Ok(())
    }

    /// Checks that `mask` is the mask this configuration was calibrated with.
    pub fn check_mask(&self, mask: Option<&VocabMask>) -> Result<()> {
        let found = mask.map(VocabMask::id);
        if found != self.mask_id {
            return Err(Error::MaskMismatch {
                expected: self.mask_id.clone(),
                found,
            });
        }
        Ok(())
    }
}

impl Default for ConformalConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            temperature: 1.0,
            score_mode: ScoreMode::Deterministic,
            mask_id: None,
            seed: 0,
        }
    }
}

/// Calibrated threshold plus everything needed to reproduce it.
///
/// `threshold` is q̂. `threshold_tail` is the probability mass beyond q̂,
/// kept separately because `1 - q̂` is not representable once q̂ is within
/// an ulp of 1 (routine at low temperatures). Set construction compares
/// against the tail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub threshold: f64,
    pub threshold_tail: f64,
    pub n_calibration: usize,
    pub config: ConformalConfig,
    pub score_samples_digest: String,
}

/// Tokens kept for one input, in descending probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub token_ids: Vec<u32>,
    pub token_probs: Vec<f64>,
    pub cumulative_mass: f64,
    pub size: usize,
}

impl PredictionSet {
    pub fn contains(&self, token_id: u32) -> bool {
        self.token_ids.contains(&token_id)
    }
}
