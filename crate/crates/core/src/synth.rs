//! Exchangeable synthetic logit datasets with a controllable dead vocabulary.
//!
//! Every sample is drawn i.i.d. given the config: live tokens receive
//! Zipf-decayed logits `-s * ln(rank)` under a fresh random rank permutation,
//! plus Gaussian noise; dead tokens sit at least 40 nats below the smallest
//! live logit. Targets are drawn from the sample's own live-token softmax
//! (a well-specified model), or, with probability `target_outside_prob`,
//! uniformly from the dead tokens.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{derive_sample_rng, ExclusionReason, LogitRecord, TokenMetadata, VocabMask};

/// Logit gap between the smallest live logit and the largest dead logit.
pub const DEAD_LOGIT_GAP: f64 = 40.0;

/// Upper bound on total dead-token mass the generator guarantees.
pub const DEAD_MASS_BOUND: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub vocab_size: usize,
    pub n_samples: usize,
    pub dead_fraction: f64,
    pub zipf_exponent: f64,
    pub logit_noise_scale: f64,
    pub target_outside_prob: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            vocab_size: 1000,
            n_samples: 4000,
            dead_fraction: 0.8,
            zipf_exponent: 1.5,
            logit_noise_scale: 1.0,
            target_outside_prob: 0.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn n_dead(&self) -> usize {
        (self.dead_fraction * self.vocab_size as f64).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.vocab_size < 2 {
            return bad(format!("vocab_size {} must be >= 2", self.vocab_size));
        }
        if self.vocab_size > u32::MAX as usize {
            return bad(format!("vocab_size {} exceeds u32 range", self.vocab_size));
        }
        if self.n_samples == 0 {
            return bad("n_samples must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dead_fraction) {
            return bad(format!(
                "dead_fraction {} outside [0, 1)",
                self.dead_fraction
            ));
        }
        if !(self.zipf_exponent.is_finite() && self.zipf_exponent > 0.0) {
            return bad(format!("zipf_exponent {} must be > 0", self.zipf_exponent));
        }
        if !(self.logit_noise_scale.is_finite() && self.logit_noise_scale >= 0.0) {
            return bad(format!(
                "logit_noise_scale {} must be >= 0",
                self.logit_noise_scale
            ));
        }
        if !(0.0..=1.0).contains(&self.target_outside_prob) {
            return bad(format!(
                "target_outside_prob {} outside [0, 1]",
                self.target_outside_prob
            ));
        }
        if self.target_outside_prob > 0.0 && self.n_dead() == 0 {
            return bad("target_outside_prob > 0 requires at least one dead token".into());
        }
        if self.n_dead() > 0 && self.dead_mass_bound() >= DEAD_MASS_BOUND {
            return bad(format!(
                "dead-token mass bound {:e} is not below {DEAD_MASS_BOUND:e}",
                self.dead_mass_bound()
            ));
        }
        Ok(())
    }

    /// `vocab_size * e^-gap`: an upper bound on total dead-token softmax mass.
    pub fn dead_mass_bound(&self) -> f64 {
        self.vocab_size as f64 * (-DEAD_LOGIT_GAP).exp()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub records: Vec<LogitRecord>,
    pub metadata: Vec<TokenMetadata>,
    /// Exactly the live tokens.
    pub true_v_star: VocabMask,
}

pub fn sample_id(index: usize) -> String {
    format!("syn-{index:06}")
}

/// Generates `config.n_samples` records. Logits are rounded to single
/// precision so the in-memory dataset equals its on-disk form.
pub fn generate(config: &SynthConfig) -> Result<SynthDataset> {
    config.validate()?;
    let vocab = config.vocab_size;

    let mut ids: Vec<u32> = (0..vocab as u32).collect();
    ids.shuffle(&mut derive_sample_rng(config.seed, "synth/vocab"));
    let (dead, live) = ids.split_at(config.n_dead());
    let mut dead = dead.to_vec();
    dead.sort_unstable();
    let live = live.to_vec();

    let true_v_star =
        VocabMask::from_included_ids(vocab, live.iter().copied(), ExclusionReason::Empirical)?;
    let metadata = synth_metadata(vocab, &dead);

    let base: Vec<f64> = (1..=live.len())
        .map(|rank| -config.zipf_exponent * (rank as f64).ln())
        .collect();

    let records = (0..config.n_samples)
        .map(|index| generate_sample(config, index, &live, &dead, &base))
        .collect::<Result<Vec<_>>>()?;

    Ok(SynthDataset {
        records,
        metadata,
        true_v_star,
    })
}

fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

fn generate_sample(
    config: &SynthConfig,
    index: usize,
    live: &[u32],
    dead: &[u32],
    base: &[f64],
) -> Result<LogitRecord> {
    let id = sample_id(index);
    let mut rng = derive_sample_rng(config.seed, &format!("synth/sample/{index}"));

    let mut perm = live.to_vec();
    perm.shuffle(&mut rng);

    let mut logits = vec![0.0f64; config.vocab_size];
    for (&token, &b) in perm.iter().zip(base) {
        let noise: f64 = rng.sample(StandardNormal);
        logits[token as usize] = round_f32(b + config.logit_noise_scale * noise);
    }
    let live_min = perm
        .iter()
        .map(|&t| logits[t as usize])
        .fold(f64::INFINITY, f64::min);
    for &token in dead {
        let jitter: f64 = rng.random();
        logits[token as usize] = round_f32(live_min - DEAD_LOGIT_GAP * (1.0 + 0.1 * jitter));
    }

    let outside =
        config.target_outside_prob > 0.0 && rng.random::<f64>() < config.target_outside_prob;
    let target = if outside {
        dead[rng.random_range(0..dead.len())]
    } else {
        sample_live_target(&logits, &perm, rng.random())
    };
    LogitRecord::new(id, logits, target)
}

/// Inverse-CDF draw from the softmax over `live` tokens.
fn sample_live_target(logits: &[f64], live: &[u32], u: f64) -> u32 {
    let max = live
        .iter()
        .map(|&t| logits[t as usize])
        .fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = live
        .iter()
        .map(|&t| (logits[t as usize] - max).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut acc = 0.0;
    let goal = u * total;
    for (&token, w) in live.iter().zip(&weights) {
        acc += w;
        if goal < acc {
            return token;
        }
    }
    *live.last().expect("at least one live token")
}

/// Dead tokens double as the structural junk of a real tokenizer: the first
/// four are control tokens, then a block of reserved placeholders and one
/// non-printable token. The rest, and all live tokens, are ordinary.
fn synth_metadata(vocab: usize, dead_sorted: &[u32]) -> Vec<TokenMetadata> {
    let mut metadata: Vec<TokenMetadata> = (0..vocab as u32)
        .map(|id| TokenMetadata::plain(id, format!("w{id}")))
        .collect();
    let specials = ["<pad>", "<eos>", "<bos>", "<unk>"];
    let n_reserved = (dead_sorted.len().saturating_sub(specials.len()) / 4).min(100);
    for (i, &id) in dead_sorted.iter().enumerate() {
        let m = &mut metadata[id as usize];
        if i < specials.len() {
            m.surface = specials[i].to_owned();
            m.is_special = true;
        } else if i < specials.len() + n_reserved {
            m.surface = format!("<unused{}>", i - specials.len());
            m.is_reserved = true;
        } else if i == specials.len() + n_reserved {
            m.surface = "\u{1}\u{2}".to_owned();
            m.is_printable = false;
        } else {
            m.surface = format!("rare{id}");
        }
    }
    metadata
}

/// Fraction of records whose target lies inside `mask` (0 for no records).
pub fn target_inclusion_rate(records: &[LogitRecord], mask: &VocabMask) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let hits = records
        .iter()
        .filter(|r| mask.is_included(r.target_id()))
        .count();
    hits as f64 / records.len() as f64
}
