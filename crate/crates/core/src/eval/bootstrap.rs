use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::types::derive_sample_rng;

pub const DEFAULT_RESAMPLES: usize = 1000;

/// 95% percentile-bootstrap interval for the mean of `samples`.
///
/// Resample `b` draws from the stream derived from `(seed, "bootstrap/{b}")`,
/// so the result is independent of thread scheduling. Percentiles use linear
/// interpolation between order statistics. The interval is clamped to
/// `[min(samples), max(samples)]`.
pub fn bootstrap_ci(samples: &[f64], n_resamples: usize, seed: u64) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument(
            "bootstrap needs at least one sample".into(),
        ));
    }
    if n_resamples == 0 {
        return Err(Error::InvalidArgument("n_resamples must be >= 1".into()));
    }
    if let Some(bad) = samples.iter().find(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "non-finite bootstrap sample {bad}"
        )));
    }
    let n = samples.len();
    let mut means: Vec<f64> = (0..n_resamples)
        .into_par_iter()
        .map(|b| {
            let mut rng = derive_sample_rng(seed, &format!("bootstrap/{b}"));
            let sum: f64 = (0..n).map(|_| samples[rng.random_range(0..n)]).sum();
            sum / n as f64
        })
        .collect();
    means.sort_by(f64::total_cmp);

    let min = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let max = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let clamp = |x: f64| x.clamp(min, max);
    Ok((
        clamp(percentile(&means, 0.025)),
        clamp(percentile(&means, 0.975)),
    ))
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}
