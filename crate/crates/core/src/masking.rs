//! The masking policy: prior-bias injection, Gumbel-Top-k sampling, span
//! repair, Plackett-Luce likelihood, and the REINFORCE teacher objective.
//!
//! A mask over `N` patches is drawn by perturbing per-patch logits with
//! Gumbel noise and keeping the `k` largest — an exact sample from the
//! Plackett-Luce distribution over ordered k-subsets. The likelihood of the
//! realized selection order is therefore available in closed form, which is
//! what the REINFORCE update differentiates. A deterministic span repair
//! then caps consecutive masked patches; repair happens *after* sampling and
//! outside the likelihood, so it acts as environment dynamics rather than a
//! policy output.
//!
//! Besides the learned policy this module houses the two reference
//! strategies (uniform random and static prior-weighted masking) and the
//! policy metrics used by the training logs.

use ndgrad::{NodeId, Tape};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Floor applied inside `log` when converting raw prior scores to logits.
pub const PRIOR_LOG_FLOOR: f64 = 1e-9;
/// Clamp bounds for the uniform draws feeding the Gumbel transform.
pub const GUMBEL_CLAMP: f64 = 1e-12;

/// Masking policy hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskPolicyConfig {
    /// Fraction of patches to mask; `k = floor(ratio * N)`.
    pub ratio: f64,
    /// Weight on the standardized prior bias added to teacher logits.
    pub alpha: f64,
    /// Longest permitted run of consecutive masked patches.
    pub max_span: usize,
    /// Floor on the population std used for standardization.
    pub std_floor: f64,
}

impl Default for MaskPolicyConfig {
    fn default() -> Self {
        Self { ratio: 0.5, alpha: 2.0, max_span: 5, std_floor: 1e-9 }
    }
}

impl MaskPolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return Err(Error::InvalidConfig { detail: format!("mask ratio {}", self.ratio) });
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidConfig { detail: format!("alpha {}", self.alpha) });
        }
        if self.max_span < 1 {
            return Err(Error::InvalidConfig { detail: "max_span must be >= 1".into() });
        }
        if !(self.std_floor > 0.0) {
            return Err(Error::InvalidConfig { detail: format!("std floor {}", self.std_floor) });
        }
        Ok(())
    }

    /// Number of masked patches for a sequence of `n`.
    pub fn k_for(&self, n: usize) -> usize {
        (self.ratio * n as f64).floor() as usize
    }
}

/// One sampled mask: the repaired bits, the Gumbel-perturbed values, the
/// pre-repair selection in descending perturbed order, and its likelihood.
#[derive(Debug, Clone)]
pub struct MaskSample {
    /// Final mask after span repair.
    pub mask: Vec<bool>,
    /// `logits + Gumbel` realization the selection was read from.
    pub perturbed: Vec<f64>,
    /// Pre-repair top-k indices sorted by descending perturbed value.
    pub selected_order: Vec<usize>,
    /// Plackett-Luce log-likelihood of `selected_order` under the logits.
    pub log_prob: f64,
    pub pre_repair_mask: Vec<bool>,
    /// Set when span repair could not restore `popcount == k`.
    pub infeasible: bool,
}

impl MaskSample {
    /// Number of masked positions after repair.
    pub fn popcount(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// True when repair changed at least one bit.
    pub fn repaired(&self) -> bool {
        self.mask != self.pre_repair_mask
    }
}

/// Metrics describing one policy evaluation.
#[derive(Debug, Clone, Serialize)]
pub struct PolicyMetrics {
    /// Shannon entropy of the softmax over final logits, in nats.
    pub entropy: f64,
    /// Mean softmax probability over the masked positions.
    pub mean_selected_prob: f64,
    /// Mean softmax probability over all positions (1/N for a softmax).
    pub mean_prob_all: f64,
    pub teacher_loss: f64,
}

/// Standardizes prior scores: `(s - mean) / max(population_std, std_floor)`.
/// All-equal scores hit the floor and map to an all-zero bias.
pub fn prior_bias(s_prior: &[f64], std_floor: f64) -> Vec<f64> {
    let n = s_prior.len();
    if n == 0 {
        return Vec::new();
    }
    let mean = s_prior.iter().sum::<f64>() / n as f64;
    let var = s_prior.iter().map(|&s| (s - mean) * (s - mean)).sum::<f64>() / n as f64;
    let denom = var.sqrt().max(std_floor);
    s_prior.iter().map(|&s| (s - mean) / denom).collect()
}

/// `teacher_logits + alpha * bias`, elementwise.
pub fn final_logits(teacher_logits: &[f64], bias: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if teacher_logits.len() != bias.len() {
        return Err(Error::ShapeError {
            op: "final_logits",
            detail: format!("{} logits vs {} bias entries", teacher_logits.len(), bias.len()),
        });
    }
    Ok(teacher_logits.iter().zip(bias).map(|(&l, &b)| l + alpha * b).collect())
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k < 1 || k > n {
        return Err(Error::InvalidK { k, n });
    }
    Ok(())
}

/// Draws a mask of exactly `k` patches by perturbing `logits` with Gumbel
/// noise and keeping the largest values. The returned sample is pre-repair:
/// `mask == pre_repair_mask`.
pub fn gumbel_topk(logits: &[f64], k: usize, rng: &mut ChaCha20Rng) -> Result<MaskSample> {
    let n = logits.len();
    check_k(k, n)?;
    let perturbed: Vec<f64> = logits
        .iter()
        .map(|&l| {
            let u: f64 = rng.gen::<f64>().clamp(GUMBEL_CLAMP, 1.0 - GUMBEL_CLAMP);
            l - (-u.ln()).ln()
        })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| perturbed[b].total_cmp(&perturbed[a]).then(a.cmp(&b)));
    let selected_order: Vec<usize> = order[..k].to_vec();
    let mut mask = vec![false; n];
    for &i in &selected_order {
        mask[i] = true;
    }
    let log_prob = log_prob(logits, &selected_order)?;
    Ok(MaskSample {
        pre_repair_mask: mask.clone(),
        mask,
        perturbed,
        selected_order,
        log_prob,
        infeasible: false,
    })
}

/// Longest run of `true` starting at each run head: returns `(start, len)`
/// of the longest run, leftmost on ties, or `None` if the mask is empty.
fn longest_run(mask: &[bool]) -> Option<(usize, usize)> {
    let mut best: Option<(usize, usize)> = None;
    let mut i = 0;
    while i < mask.len() {
        if mask[i] {
            let start = i;
            while i < mask.len() && mask[i] {
                i += 1;
            }
            let len = i - start;
            if best.map_or(true, |(_, blen)| len > blen) {
                best = Some((start, len));
            }
        } else {
            i += 1;
        }
    }
    best
}

/// Length of the run that would contain `i` if it were masked.
fn run_length_with(mask: &[bool], i: usize) -> usize {
    let mut len = 1;
    let mut j = i;
    while j > 0 && mask[j - 1] {
        len += 1;
        j -= 1;
    }
    let mut j = i + 1;
    while j < mask.len() && mask[j] {
        len += 1;
        j += 1;
    }
    len
}

/// Deterministically enforces the span bound while preserving `popcount == k`
/// whenever the greedy completion can reach it.
///
/// Phase 1 unmasks, inside the longest offending run (leftmost on ties), the
/// masked index with the smallest perturbed value, until no run exceeds
/// `max_span`. Phase 2 re-masks the unmasked index with the largest
/// perturbed value whose addition keeps every run within the bound, until
/// the count is restored or no candidate remains.
pub fn span_repair(mask: &[bool], perturbed: &[f64], max_span: usize, k: usize) -> Vec<bool> {
    let n = mask.len();
    let mut out = mask.to_vec();
    while let Some((start, len)) = longest_run(&out) {
        if len <= max_span {
            break;
        }
        let victim = (start..start + len)
            .min_by(|&a, &b| perturbed[a].total_cmp(&perturbed[b]).then(a.cmp(&b)))
            .expect("non-empty run");
        out[victim] = false;
    }
    loop {
        let popcount = out.iter().filter(|&&m| m).count();
        if popcount >= k {
            break;
        }
        let candidate = (0..n)
            .filter(|&i| !out[i] && run_length_with(&out, i) <= max_span)
            .max_by(|&a, &b| perturbed[a].total_cmp(&perturbed[b]).then(b.cmp(&a)));
        let Some(i) = candidate else { break };
        out[i] = true;
    }
    out
}

/// Applies [`span_repair`] to a sample in place and flags infeasibility.
pub fn repair_sample(sample: &mut MaskSample, max_span: usize, k: usize) {
    sample.mask = span_repair(&sample.pre_repair_mask, &sample.perturbed, max_span, k);
    sample.infeasible = sample.popcount() < k;
}

fn logsumexp_slice(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + values.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

fn check_order(n: usize, order: &[usize]) -> Result<()> {
    if order.is_empty() || order.len() > n {
        return Err(Error::InvalidOrder {
            detail: format!("{} selections from {n} positions", order.len()),
        });
    }
    let mut seen = vec![false; n];
    for &i in order {
        if i >= n {
            return Err(Error::InvalidOrder { detail: format!("index {i} out of {n}") });
        }
        if seen[i] {
            return Err(Error::InvalidOrder { detail: format!("index {i} selected twice") });
        }
        seen[i] = true;
    }
    Ok(())
}

/// Plackett-Luce log-likelihood of drawing `order` (without replacement,
/// softmax weights) from `logits`:
/// `sum_j [ logits[i_j] - logsumexp(logits of indices not yet selected) ]`.
pub fn log_prob(logits: &[f64], order: &[usize]) -> Result<f64> {
    let n = logits.len();
    check_order(n, order)?;
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut total = 0.0;
    for &pick in order {
        let values: Vec<f64> = remaining.iter().map(|&i| logits[i]).collect();
        total += logits[pick] - logsumexp_slice(&values);
        remaining.retain(|&i| i != pick);
    }
    Ok(total)
}

/// Tape form of [`log_prob`] over a rank-1 logits node, so the teacher can
/// be updated through the likelihood of the realized selection.
pub fn log_prob_node(tape: &mut Tape, logits: NodeId, order: &[usize]) -> Result<NodeId> {
    let n = tape.value(logits).numel();
    check_order(n, order)?;
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut total: Option<NodeId> = None;
    for &pick in order {
        let chosen = tape.gather1d(logits, &[pick])?;
        let pool = tape.gather1d(logits, &remaining)?;
        let lse = tape.logsumexp(pool)?;
        let lse = tape.reshape(lse, &[1])?;
        let term = tape.sub(chosen, lse)?;
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
        remaining.retain(|&i| i != pick);
    }
    Ok(total.expect("order is non-empty"))
}

/// REINFORCE objective value with a batch-mean baseline:
/// `-mean((R_j - mean(R)) * log_prob_j)`. Minimizing it ascends `E[R]`.
pub fn teacher_loss(rewards: &[f64], log_probs: &[f64]) -> Result<f64> {
    if rewards.is_empty() || rewards.len() != log_probs.len() {
        return Err(Error::ShapeError {
            op: "teacher_loss",
            detail: format!("{} rewards vs {} log probs", rewards.len(), log_probs.len()),
        });
    }
    let b = rewards.iter().sum::<f64>() / rewards.len() as f64;
    let sum: f64 =
        rewards.iter().zip(log_probs).map(|(&r, &lp)| (r - b) * lp).sum();
    Ok(-sum / rewards.len() as f64)
}

/// Uniform k-subset mask: Gumbel-Top-k on all-zero logits, span-repaired.
pub fn random_mask(n: usize, k: usize, max_span: usize, rng: &mut ChaCha20Rng) -> Result<MaskSample> {
    let mut sample = gumbel_topk(&vec![0.0; n], k, rng)?;
    repair_sample(&mut sample, max_span, k);
    Ok(sample)
}

/// Static prior-weighted mask: Gumbel-Top-k on `log(max(S_prior, 1e-9))`,
/// span-repaired. Sampling is proportional to the raw prior scores.
pub fn static_prior_mask(
    s_prior: &[f64],
    k: usize,
    max_span: usize,
    rng: &mut ChaCha20Rng,
) -> Result<MaskSample> {
    let logits: Vec<f64> = s_prior.iter().map(|&s| s.max(PRIOR_LOG_FLOOR).ln()).collect();
    let mut sample = gumbel_topk(&logits, k, rng)?;
    repair_sample(&mut sample, max_span, k);
    Ok(sample)
}

/// Shannon entropy (nats) of a probability vector.
pub fn policy_entropy(p: &[f64]) -> Result<f64> {
    if p.is_empty() {
        return Err(Error::NotADistribution { detail: "empty vector".into() });
    }
    let sum: f64 = p.iter().sum();
    if p.iter().any(|&v| !(0.0..=1.0).contains(&v)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::NotADistribution { detail: format!("entries sum to {sum}") });
    }
    Ok(-p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>())
}

/// Softmax of a logit slice (value-level helper for metrics).
pub fn softmax_values(logits: &[f64]) -> Vec<f64> {
    let lse = logsumexp_slice(logits);
    logits.iter().map(|&l| (l - lse).exp()).collect()
}
