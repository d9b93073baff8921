//! Per-patch statistical quality priors.
//!
//! Three signals are combined: relative amplitude stability (a modified
//! Z-score of the patch standard deviation against its segment), absolute
//! amplitude validity (sigmoid gates rejecting near-zero and implausibly
//! large amplitudes), and morphological skewness (clean pulses are
//! asymmetric; noise and flatlines are not). The weighted combination is
//! the per-patch prior used to bias masking.

use crate::dsp::PatchSequence;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Constants of the prior scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub k_rise: f64,
    pub k_fall: f64,
    /// Coefficient on q² inside the relative-stability exponential.
    pub rel_coeff: f64,
    /// Scale that makes the median absolute deviation a consistent
    /// estimator of a normal σ.
    pub mad_const: f64,
    /// Weight of the skewness score in the combination.
    pub beta: f64,
    /// Floor applied to the MAD so all-equal inputs stay defined.
    pub mad_floor: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            sigma_min: 0.05,
            sigma_max: 2.0,
            k_rise: 50.0,
            k_fall: 5.0,
            rel_coeff: 0.2,
            mad_const: 0.6745,
            beta: 0.5,
            mad_floor: 1e-9,
        }
    }
}

/// Per-patch score vectors for one segment.
#[derive(Debug, Clone)]
pub struct PriorScores {
    pub sigma: Vec<f64>,
    pub s_rel: Vec<f64>,
    pub s_abs: Vec<f64>,
    pub s_amp: Vec<f64>,
    pub s_skew: Vec<f64>,
    pub s_prior: Vec<f64>,
}

/// Median by the mean-of-two-middles convention for even lengths.
fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Modified Z-scores of the patch standard deviations and the stability
/// score exp(−rel_coeff·q²). The MAD is floored so that an all-equal input
/// gives q = 0 everywhere, while genuine deviants from a zero-MAD bulk
/// score essentially zero.
pub fn relative_stability(sigmas: &[f64], cfg: &PriorConfig) -> (Vec<f64>, Vec<f64>) {
    debug_assert!(!sigmas.is_empty());
    let mut sorted = sigmas.to_vec();
    sorted.sort_by(f64::total_cmp);
    let med = median(&sorted);
    let mut devs: Vec<f64> = sigmas.iter().map(|s| (s - med).abs()).collect();
    devs.sort_by(f64::total_cmp);
    let mad = median(&devs).max(cfg.mad_floor);
    let q: Vec<f64> = sigmas.iter().map(|s| cfg.mad_const * (s - med) / mad).collect();
    let s_rel: Vec<f64> = q.iter().map(|qi| (-cfg.rel_coeff * qi * qi).exp()).collect();
    (q, s_rel)
}

/// Product of a rising gate at σ_min and a falling gate at σ_max.
pub fn absolute_validity(sigma: f64, cfg: &PriorConfig) -> f64 {
    let lower = 1.0 / (1.0 + (-cfg.k_rise * (sigma - cfg.sigma_min)).exp());
    let upper = 1.0 / (1.0 + (cfg.k_fall * (sigma - cfg.sigma_max)).exp());
    lower * upper
}

/// tanh of |sample skewness| with population (1/T) moments; zero-variance
/// patches score 0.
pub fn skewness_score(patch: &[f64]) -> f64 {
    debug_assert!(patch.len() >= 2);
    let t = patch.len() as f64;
    let mean = patch.iter().sum::<f64>() / t;
    let mut m2 = 0.0;
    let mut m3 = 0.0;
    for &v in patch {
        let d = v - mean;
        m2 += d * d;
        m3 += d * d * d;
    }
    m2 /= t;
    m3 /= t;
    if m2 < 1e-12 {
        return 0.0;
    }
    (m3 / m2.powf(1.5)).abs().tanh()
}

/// Weighted combination (1−β)·S_amp + β·S_skew.
pub fn prior_score(s_amp: &[f64], s_skew: &[f64], beta: f64) -> Result<Vec<f64>> {
    if s_amp.len() != s_skew.len() {
        return Err(Error::ShapeError {
            op: "prior_score",
            detail: format!("S_amp has {} entries, S_skew has {}", s_amp.len(), s_skew.len()),
        });
    }
    Ok(s_amp
        .iter()
        .zip(s_skew)
        .map(|(&a, &s)| (1.0 - beta) * a + beta * s)
        .collect())
}

/// Population standard deviation of one patch.
pub fn patch_sigma(patch: &[f64]) -> f64 {
    let t = patch.len() as f64;
    let mean = patch.iter().sum::<f64>() / t;
    let var = patch.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / t;
    var.sqrt()
}

/// Score every patch of a segment: σ → relative × absolute stability →
/// S_amp, skewness → S_skew, then the β-weighted prior.
pub fn score_segment(patches: &PatchSequence, cfg: &PriorConfig) -> Result<PriorScores> {
    let n = patches.n();
    debug_assert!(n >= 1);
    let sigma: Vec<f64> = (0..n).map(|i| patch_sigma(patches.patch(i))).collect();
    let (_, s_rel) = relative_stability(&sigma, cfg);
    let s_abs: Vec<f64> = sigma.iter().map(|&s| absolute_validity(s, cfg)).collect();
    let s_amp: Vec<f64> = s_rel.iter().zip(&s_abs).map(|(&r, &a)| r * a).collect();
    let s_skew: Vec<f64> = (0..n).map(|i| skewness_score(patches.patch(i))).collect();
    let s_prior = prior_score(&s_amp, &s_skew, cfg.beta)?;
    Ok(PriorScores { sigma, s_rel, s_abs, s_amp, s_skew, s_prior })
}
