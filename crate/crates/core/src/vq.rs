//! Vector quantization: codebook lookup, training losses, stochastic
//! augmentation, and codebook geometry diagnostics.
//!
//! A [`Codebook`] holds `K` vectors of dimension `D` plus a usage histogram
//! that [`quantize`] increments (reset it once per epoch to track dead
//! codes). The three losses mirror the tokenizer objective: a squared-error
//! codebook/commitment pair ([`vq_loss`]), a one-sided consistency penalty
//! between original and augmented latents ([`consistency_loss`]), and a mean
//! absolute spectral reconstruction error ([`spectral_loss`]). Each loss has
//! a tape-building form for training and a plain-value form for evaluation.
//!
//! Geometry diagnostics ([`voronoi_radius`], [`geometry_report`]) compare
//! latent perturbation distances against codebook cell radii: a pair of
//! latents whose distance is well below half the minimum inter-code distance
//! is guaranteed to quantize identically, so the distance ratio `d / r`
//! predicts index consistency.

use ndgrad::{NodeId, Tape};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Weight on the commitment (encoder-side) term of [`vq_loss`].
pub const COMMITMENT_BETA: f64 = 0.25;

/// A learnable codebook of `K` vectors in `R^D` with a usage histogram.
#[derive(Debug, Clone)]
pub struct Codebook {
    k: usize,
    d: usize,
    vectors: Vec<f64>,
    usage: Vec<u64>,
}

impl Codebook {
    /// Builds a codebook from `k * d` row-major entries.
    pub fn new(k: usize, d: usize, vectors: Vec<f64>) -> Result<Self> {
        if k == 0 || d == 0 || vectors.len() != k * d {
            return Err(Error::ShapeError {
                op: "codebook",
                detail: format!("want {k}x{d} = {} entries, got {}", k * d, vectors.len()),
            });
        }
        Ok(Self { k, d, vectors, usage: vec![0; k] })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Row-major `K x D` storage.
    pub fn vectors(&self) -> &[f64] {
        &self.vectors
    }

    /// Mutable access for optimizer write-back.
    pub fn vectors_mut(&mut self) -> &mut [f64] {
        &mut self.vectors
    }

    /// Code vector for index `z`.
    pub fn row(&self, z: usize) -> &[f64] {
        &self.vectors[z * self.d..(z + 1) * self.d]
    }

    /// Hit counts accumulated by [`quantize`] since the last reset.
    pub fn usage(&self) -> &[u64] {
        &self.usage
    }

    /// Clears the usage histogram (call at the start of each epoch).
    pub fn reset_usage(&mut self) {
        self.usage.iter_mut().for_each(|c| *c = 0);
    }
}

/// Output of [`quantize`]: per-row indices, the selected code vectors, and
/// (optionally) the full `N x K` squared-distance matrix.
#[derive(Debug, Clone)]
pub struct QuantizeResult {
    pub indices: Vec<usize>,
    /// Row-major `N x D` copy of the selected code vectors.
    pub codes: Vec<f64>,
    /// Row-major `N x K` squared distances, kept only on request.
    pub distances: Option<Vec<f64>>,
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest code vector to `h` (squared Euclidean distance,
/// ties resolved toward the lowest index). Does not touch the histogram.
pub fn nearest(codebook: &Codebook, h: &[f64]) -> Result<usize> {
    if h.len() != codebook.d {
        return Err(Error::ShapeError {
            op: "quantize",
            detail: format!("latent has {} entries, codebook dim is {}", h.len(), codebook.d),
        });
    }
    let mut best = 0usize;
    let mut best_dist = f64::INFINITY;
    for z in 0..codebook.k {
        let dist = squared_distance(h, codebook.row(z));
        if dist < best_dist {
            best = z;
            best_dist = dist;
        }
    }
    Ok(best)
}

/// Maps each of the `n` rows of `h` (row-major `n x D`) to its nearest code
/// vector and increments the usage histogram for every selected index.
pub fn quantize(
    codebook: &mut Codebook,
    h: &[f64],
    n: usize,
    keep_distances: bool,
) -> Result<QuantizeResult> {
    let d = codebook.d;
    if h.len() != n * d {
        return Err(Error::ShapeError {
            op: "quantize",
            detail: format!("latents have {} entries, want {n}x{d}", h.len()),
        });
    }
    let mut indices = Vec::with_capacity(n);
    let mut codes = Vec::with_capacity(n * d);
    let mut distances = if keep_distances { Some(Vec::with_capacity(n * codebook.k)) } else { None };
    for i in 0..n {
        let row = &h[i * d..(i + 1) * d];
        if let Some(dist_matrix) = distances.as_mut() {
            for z in 0..codebook.k {
                dist_matrix.push(squared_distance(row, codebook.row(z)));
            }
        }
        let z = nearest(codebook, row)?;
        indices.push(z);
        codes.extend_from_slice(codebook.row(z));
        codebook.usage[z] += 1;
    }
    Ok(QuantizeResult { indices, codes, distances })
}

/// Number of codebook entries with zero hits in the current histogram.
pub fn unused_codes(codebook: &Codebook) -> usize {
    codebook.usage.iter().filter(|&&c| c == 0).count()
}

fn check_same_len(op: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::ShapeError {
            op,
            detail: format!("operand lengths {} vs {}", a.len(), b.len()),
        });
    }
    Ok(())
}

/// Value of the codebook + commitment loss: `mean((h - e)^2) * (1 + beta)`.
///
/// The two terms share this value; they differ only in which side receives
/// gradient, which the tape form [`vq_loss`] encodes via stop-gradients.
pub fn vq_loss_value(h: &[f64], e_z: &[f64]) -> Result<f64> {
    check_same_len("vq_loss", h, e_z)?;
    let mse = squared_distance(h, e_z) / h.len() as f64;
    Ok((1.0 + COMMITMENT_BETA) * mse)
}

/// Value of the consistency loss: `mean((h_orig - h_aug)^2)`.
pub fn consistency_loss_value(h_orig: &[f64], h_aug: &[f64]) -> Result<f64> {
    check_same_len("consistency_loss", h_orig, h_aug)?;
    Ok(squared_distance(h_orig, h_aug) / h_orig.len() as f64)
}

/// Value of the spectral reconstruction loss: `mean(|pred - target|)`.
pub fn spectral_loss_value(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_same_len("spectral_loss", pred, target)?;
    let n = pred.len() as f64;
    Ok(pred.iter().zip(target).map(|(&p, &t)| (p - t).abs()).sum::<f64>() / n)
}

/// Tape form of the VQ objective:
/// `mean((sg(h) - e_z)^2) + beta * mean((h - sg(e_z))^2)`.
///
/// Gradient flows to the codebook through the first term and to the encoder
/// through the second, scaled by [`COMMITMENT_BETA`].
pub fn vq_loss(tape: &mut Tape, h: NodeId, e_z: NodeId) -> Result<NodeId> {
    let h_frozen = tape.stop_gradient(h)?;
    let e_frozen = tape.stop_gradient(e_z)?;
    let codebook_diff = tape.sub(h_frozen, e_z)?;
    let codebook_term = {
        let sq = tape.mul(codebook_diff, codebook_diff)?;
        tape.mean_all(sq)?
    };
    let commit_diff = tape.sub(h, e_frozen)?;
    let commit_term = {
        let sq = tape.mul(commit_diff, commit_diff)?;
        tape.mean_all(sq)?
    };
    let scaled = tape.mul_scalar(commit_term, COMMITMENT_BETA)?;
    Ok(tape.add(codebook_term, scaled)?)
}

/// Tape form of the consistency loss: `mean((sg(h_orig) - h_aug)^2)`.
///
/// The original view is a fixed target; gradient reaches only the augmented
/// branch.
pub fn consistency_loss(tape: &mut Tape, h_orig: NodeId, h_aug: NodeId) -> Result<NodeId> {
    let target = tape.stop_gradient(h_orig)?;
    let diff = tape.sub(target, h_aug)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean_all(sq)?)
}

/// Tape form of the spectral loss: `mean(|pred - target|)`.
pub fn spectral_loss(tape: &mut Tape, pred: NodeId, target: NodeId) -> Result<NodeId> {
    let diff = tape.sub(pred, target)?;
    let abs = tape.abs(diff)?;
    Ok(tape.mean_all(abs)?)
}

/// Stochastic augmentation used to build the consistency pair: a single
/// multiplicative scale per call plus i.i.d. additive Gaussian noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub scale_low: f64,
    pub scale_high: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { scale_low: 0.98, scale_high: 1.02, noise_sigma: 0.02, seed: 0 }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale_low.is_finite() && self.scale_high.is_finite())
            || self.scale_low > self.scale_high
            || self.scale_low <= 0.0
        {
            return Err(Error::InvalidConfig {
                detail: format!("scale range [{}, {}]", self.scale_low, self.scale_high),
            });
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(Error::InvalidConfig {
                detail: format!("noise sigma {}", self.noise_sigma),
            });
        }
        Ok(())
    }
}

fn standard_normal(rng: &mut ChaCha20Rng) -> f64 {
    // Box-Muller on open-interval uniforms; one draw per call keeps the
    // stream layout independent of vector length parity.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Applies `x' = s * x + eps` with `s ~ U[scale_low, scale_high]` drawn once
/// per call and `eps ~ N(0, noise_sigma^2)` drawn per sample. With the scale
/// range pinned to `[1, 1]` and zero sigma the input is returned bit-exactly.
pub fn augment(patch: &[f64], cfg: &AugmentConfig, rng: &mut ChaCha20Rng) -> Vec<f64> {
    let s = if cfg.scale_low == cfg.scale_high {
        cfg.scale_low
    } else {
        rng.gen_range(cfg.scale_low..cfg.scale_high)
    };
    patch
        .iter()
        .map(|&x| {
            let noise =
                if cfg.noise_sigma > 0.0 { cfg.noise_sigma * standard_normal(rng) } else { 0.0 };
            let scaled = if s == 1.0 { x } else { s * x };
            if cfg.noise_sigma > 0.0 { scaled + noise } else { scaled }
        })
        .collect()
}

/// Half the minimum pairwise distance between code vectors: any latent pair
/// closer than this radius is guaranteed to share an index.
pub fn voronoi_radius(codebook: &Codebook) -> Result<f64> {
    if codebook.k < 2 {
        return Err(Error::DegenerateCodebook {
            detail: format!("need at least 2 codes, have {}", codebook.k),
        });
    }
    let mut min_sq = f64::INFINITY;
    for i in 0..codebook.k {
        for j in (i + 1)..codebook.k {
            let sq = squared_distance(codebook.row(i), codebook.row(j));
            if sq < min_sq {
                min_sq = sq;
            }
        }
    }
    if min_sq == 0.0 {
        return Err(Error::DegenerateCodebook { detail: "duplicated code vectors".into() });
    }
    Ok(0.5 * min_sq.sqrt())
}

/// Geometry of a set of latent pairs relative to a codebook: perturbation
/// distances, their ratio to the Voronoi radius, index-consistency rate, and
/// an ICR breakdown by local codebook density.
#[derive(Debug, Clone, Serialize)]
pub struct GeometryReport {
    pub voronoi_radius: f64,
    /// Euclidean distance per pair.
    pub distances: Vec<f64>,
    /// `distance / voronoi_radius` per pair.
    pub ratios: Vec<f64>,
    pub mean_ratio: f64,
    /// Fraction of pairs whose two latents quantize to the same index.
    pub icr: f64,
    /// ICR restricted to pairs landing in each codebook-density quartile
    /// (quartile 0 is the densest codes); `None` when a quartile is empty.
    pub icr_by_quartile: [Option<f64>; 4],
    /// Fraction of pairs with ratio below 0.2 (identical index guaranteed
    /// well inside the cell) and below 0.5 (identical index guaranteed).
    pub ratio_below_02: f64,
    pub ratio_below_05: f64,
}

/// Per-code density quartile: codes ranked by distance to their nearest
/// other code, ascending, then split into four rank bands.
fn density_quartiles(codebook: &Codebook) -> Vec<usize> {
    let k = codebook.k;
    let mut nearest_dist = vec![f64::INFINITY; k];
    for i in 0..k {
        for j in 0..k {
            if i == j {
                continue;
            }
            let dist = squared_distance(codebook.row(i), codebook.row(j));
            if dist < nearest_dist[i] {
                nearest_dist[i] = dist;
            }
        }
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| nearest_dist[a].total_cmp(&nearest_dist[b]).then(a.cmp(&b)));
    let mut quartile = vec![0usize; k];
    for (rank, &code) in order.iter().enumerate() {
        quartile[code] = (rank * 4 / k).min(3);
    }
    quartile
}

/// Compares each `(h, h')` latent pair against the codebook geometry.
pub fn geometry_report(codebook: &Codebook, pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<GeometryReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let radius = voronoi_radius(codebook)?;
    let quartile_of = density_quartiles(codebook);
    let mut distances = Vec::with_capacity(pairs.len());
    let mut ratios = Vec::with_capacity(pairs.len());
    let mut consistent = 0usize;
    let mut quartile_pairs = [0usize; 4];
    let mut quartile_consistent = [0usize; 4];
    let mut below_02 = 0usize;
    let mut below_05 = 0usize;
    for (h, h_aug) in pairs {
        check_same_len("geometry_report", h, h_aug)?;
        let d = squared_distance(h, h_aug).sqrt();
        let ratio = d / radius;
        distances.push(d);
        ratios.push(ratio);
        if ratio < 0.2 {
            below_02 += 1;
        }
        if ratio < 0.5 {
            below_05 += 1;
        }
        let z = nearest(codebook, h)?;
        let z_aug = nearest(codebook, h_aug)?;
        let q = quartile_of[z];
        quartile_pairs[q] += 1;
        if z == z_aug {
            consistent += 1;
            quartile_consistent[q] += 1;
        }
    }
    let n = pairs.len() as f64;
    let mut icr_by_quartile = [None; 4];
    for q in 0..4 {
        if quartile_pairs[q] > 0 {
            icr_by_quartile[q] = Some(quartile_consistent[q] as f64 / quartile_pairs[q] as f64);
        }
    }
    Ok(GeometryReport {
        voronoi_radius: radius,
        mean_ratio: ratios.iter().sum::<f64>() / n,
        icr: consistent as f64 / n,
        icr_by_quartile,
        ratio_below_02: below_02 as f64 / n,
        ratio_below_05: below_05 as f64 / n,
        distances,
        ratios,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from;
    use ndgrad::Tensor;

    fn toy_codebook() -> Codebook {
        Codebook::new(2, 2, vec![0.0, 0.0, 1.0, 1.0]).unwrap()
    }

    #[test]
    fn quantize_matches_hand_example() {
        let mut cb = toy_codebook();
        let res = quantize(&mut cb, &[0.2, 0.1], 1, true).unwrap();
        assert_eq!(res.indices, vec![0]);
        assert_eq!(res.codes, vec![0.0, 0.0]);
        let dist = res.distances.unwrap();
        assert!((dist[0] - 0.05).abs() < 1e-15);
        assert!((dist[1] - 1.45).abs() < 1e-15);
        assert_eq!(cb.usage(), &[1, 0]);
    }

    #[test]
    fn quantize_breaks_ties_toward_lowest_index() {
        let mut cb = toy_codebook();
        let res = quantize(&mut cb, &[0.5, 0.5], 1, false).unwrap();
        assert_eq!(res.indices, vec![0]);
    }

    #[test]
    fn quantize_rejects_dimension_mismatch() {
        let mut cb = toy_codebook();
        let err = quantize(&mut cb, &[0.1, 0.2, 0.3], 1, false).unwrap_err();
        assert!(matches!(err, Error::ShapeError { .. }));
    }

    #[test]
    fn quantize_matches_brute_force_oracle() {
        for seed in 0..6u64 {
            let mut rng = rng_from(&[0x71a0, seed]);
            let k = rng.gen_range(2..=8usize);
            let d = rng.gen_range(1..=4usize);
            let n = rng.gen_range(1..=16usize);
            let vectors: Vec<f64> = (0..k * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let latents: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut cb = Codebook::new(k, d, vectors.clone()).unwrap();
            let res = quantize(&mut cb, &latents, n, false).unwrap();
            for i in 0..n {
                // Oracle: explicit distance row, first strict minimum wins.
                let mut best = 0usize;
                let mut best_dist = f64::INFINITY;
                for z in 0..k {
                    let mut dist = 0.0;
                    for j in 0..d {
                        let diff = latents[i * d + j] - vectors[z * d + j];
                        dist += diff * diff;
                    }
                    if dist < best_dist {
                        best = z;
                        best_dist = dist;
                    }
                }
                assert_eq!(res.indices[i], best, "seed {seed} row {i}");
            }
        }
    }

    #[test]
    fn usage_histogram_accumulates_and_resets() {
        let mut cb = toy_codebook();
        quantize(&mut cb, &[0.0, 0.1, 0.9, 1.0, 0.1, 0.0], 3, false).unwrap();
        assert_eq!(cb.usage(), &[2, 1]);
        quantize(&mut cb, &[1.0, 1.0], 1, false).unwrap();
        assert_eq!(cb.usage(), &[2, 2]);
        cb.reset_usage();
        assert_eq!(cb.usage(), &[0, 0]);
    }

    #[test]
    fn unused_codes_counts_zero_rows() {
        let mut cb = Codebook::new(3, 1, vec![0.0, 1.0, 2.0]).unwrap();
        cb.usage = vec![5, 0, 3];
        assert_eq!(unused_codes(&cb), 1);
        cb.reset_usage();
        assert_eq!(unused_codes(&cb), 3);
    }

    #[test]
    fn vq_loss_value_examples() {
        let h = [0.3, -0.2, 0.7, 0.1];
        assert_eq!(vq_loss_value(&h, &h).unwrap(), 0.0);
        let offset: Vec<f64> = h.iter().map(|&x| x + 0.1).collect();
        let base = vq_loss_value(&h, &offset).unwrap();
        assert!((base - 1.25 * 0.01).abs() < 1e-15);
        let offset2: Vec<f64> = h.iter().map(|&x| x + 0.2).collect();
        let quad = vq_loss_value(&h, &offset2).unwrap();
        assert!((quad - 4.0 * base).abs() < 1e-12);
    }

    #[test]
    fn vq_loss_gradients_split_between_terms() {
        let h_data = [0.5, -0.3, 0.2, 0.8, -0.1, 0.4];
        let e_data = [0.1, 0.1, -0.2, 0.6, 0.3, 0.0];
        let mut tape = Tape::new();
        let h = tape.leaf(Tensor::new(&[2, 3], h_data.to_vec()).unwrap());
        let e = tape.leaf(Tensor::new(&[2, 3], e_data.to_vec()).unwrap());
        let loss = vq_loss(&mut tape, h, e).unwrap();
        let value = tape.value(loss).item();
        assert!((value - vq_loss_value(&h_data, &e_data).unwrap()).abs() < 1e-15);
        let grads = tape.backward(loss).unwrap();
        let gh = grads.get(h).unwrap();
        let ge = grads.get(e).unwrap();
        let n = h_data.len() as f64;
        for i in 0..h_data.len() {
            // Commitment term drives the encoder side, codebook term the codes.
            let want_h = 2.0 * COMMITMENT_BETA * (h_data[i] - e_data[i]) / n;
            let want_e = 2.0 * (e_data[i] - h_data[i]) / n;
            assert!((gh.data()[i] - want_h).abs() < 1e-14);
            assert!((ge.data()[i] - want_e).abs() < 1e-14);
        }
    }

    #[test]
    fn consistency_loss_blocks_gradient_to_original() {
        let orig = [0.4, -0.2, 0.9, 0.3];
        let aug = [0.5, -0.4, 0.8, 0.3];
        assert_eq!(consistency_loss_value(&orig, &orig).unwrap(), 0.0);
        let mut tape = Tape::new();
        let h_orig = tape.leaf(Tensor::new(&[2, 2], orig.to_vec()).unwrap());
        let h_aug = tape.leaf(Tensor::new(&[2, 2], aug.to_vec()).unwrap());
        let loss = consistency_loss(&mut tape, h_orig, h_aug).unwrap();
        let value = tape.value(loss).item();
        assert!((value - consistency_loss_value(&orig, &aug).unwrap()).abs() < 1e-15);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(h_orig).is_none(), "original view must receive no gradient");
        let ga = grads.get(h_aug).unwrap();
        for i in 0..aug.len() {
            let want = 2.0 * (aug[i] - orig[i]) / aug.len() as f64;
            assert!((ga.data()[i] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn spectral_loss_examples() {
        let target = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(spectral_loss_value(&target, &target).unwrap(), 0.0);
        let shifted: Vec<f64> = target.iter().map(|&x| x + 0.3).collect();
        assert!((spectral_loss_value(&shifted, &target).unwrap() - 0.3).abs() < 1e-15);
        let pred = [1.5, 1.0, 3.25, 4.0];
        let want = (0.5 + 1.0 + 0.25 + 0.0) / 4.0;
        assert!((spectral_loss_value(&pred, &target).unwrap() - want).abs() < 1e-15);

        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::new(&[4], pred.to_vec()).unwrap());
        let t = tape.leaf(Tensor::new(&[4], target.to_vec()).unwrap());
        let loss = spectral_loss(&mut tape, p, t).unwrap();
        assert!((tape.value(loss).item() - want).abs() < 1e-15);
        let grads = tape.backward(loss).unwrap();
        let gp = grads.get(p).unwrap();
        let signs = [1.0, -1.0, 1.0, 0.0];
        for i in 0..4 {
            assert!((gp.data()[i] - signs[i] / 4.0).abs() < 1e-15);
        }
    }

    #[test]
    fn losses_reject_mismatched_lengths() {
        assert!(vq_loss_value(&[1.0], &[1.0, 2.0]).is_err());
        assert!(consistency_loss_value(&[], &[]).is_err());
        assert!(spectral_loss_value(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn augment_identity_when_disabled() {
        let cfg = AugmentConfig { scale_low: 1.0, scale_high: 1.0, noise_sigma: 0.0, seed: 0 };
        let patch = [0.25, 0.5, 0.75, 1.0, 0.0];
        let mut rng = rng_from(&[1, 2]);
        let out = augment(&patch, &cfg, &mut rng);
        assert_eq!(out, patch.to_vec());
    }

    #[test]
    fn augment_is_deterministic_for_a_seed() {
        let cfg = AugmentConfig::default();
        let patch: Vec<f64> = (0..50).map(|i| (i as f64 / 49.0).sin()).collect();
        let a = augment(&patch, &cfg, &mut rng_from(&[9, 4]));
        let b = augment(&patch, &cfg, &mut rng_from(&[9, 4]));
        let c = augment(&patch, &cfg, &mut rng_from(&[9, 5]));
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn augment_noise_std_matches_config() {
        let cfg = AugmentConfig { scale_low: 1.0, scale_high: 1.0, noise_sigma: 0.02, seed: 0 };
        let n = 100_000usize;
        let patch = vec![0.5; n];
        let mut rng = rng_from(&[3, 7]);
        let out = augment(&patch, &cfg, &mut rng);
        let residual: Vec<f64> = out.iter().zip(&patch).map(|(&y, &x)| y - x).collect();
        let mean = residual.iter().sum::<f64>() / n as f64;
        let var = residual.iter().map(|&r| (r - mean) * (r - mean)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        assert!(
            (std - 0.02).abs() / 0.02 < 0.02,
            "sample std {std} strays more than 2% from 0.02"
        );
    }

    #[test]
    fn augment_scale_stays_within_bounds() {
        let cfg = AugmentConfig { scale_low: 0.98, scale_high: 1.02, noise_sigma: 0.0, seed: 0 };
        let patch = vec![1.0; 8];
        let mut rng = rng_from(&[11, 0]);
        for _ in 0..200 {
            let out = augment(&patch, &cfg, &mut rng);
            assert!(out.iter().all(|&v| (0.98..=1.02).contains(&v)));
            assert!(out.iter().all(|&v| v == out[0]), "one scale per call");
        }
    }

    #[test]
    fn augment_config_validation() {
        assert!(AugmentConfig::default().validate().is_ok());
        let bad = AugmentConfig { scale_low: 1.1, scale_high: 0.9, ..AugmentConfig::default() };
        assert!(bad.validate().is_err());
        let bad = AugmentConfig { noise_sigma: -0.1, ..AugmentConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn voronoi_radius_examples() {
        let cb = Codebook::new(2, 2, vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        assert!((voronoi_radius(&cb).unwrap() - 0.5).abs() < 1e-15);
        let cb = Codebook::new(3, 2, vec![0.0, 0.0, 3.0, 4.0, 0.0, 1.0]).unwrap();
        assert!((voronoi_radius(&cb).unwrap() - 0.5).abs() < 1e-15);
        let cb = Codebook::new(3, 2, vec![0.5, 0.5, 0.5, 0.5, 0.5, 0.5]).unwrap();
        assert!(matches!(voronoi_radius(&cb).unwrap_err(), Error::DegenerateCodebook { .. }));
        let cb = Codebook::new(3, 1, vec![0.0, 2.0, 0.0]).unwrap();
        assert!(matches!(voronoi_radius(&cb).unwrap_err(), Error::DegenerateCodebook { .. }));
    }

    #[test]
    fn geometry_report_identical_pairs() {
        let cb = Codebook::new(2, 2, vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let pairs = vec![
            (vec![0.1, 0.0], vec![0.1, 0.0]),
            (vec![0.9, 0.0], vec![0.9, 0.0]),
        ];
        let report = geometry_report(&cb, &pairs).unwrap();
        assert_eq!(report.icr, 1.0);
        assert!(report.ratios.iter().all(|&r| r == 0.0));
        assert_eq!(report.mean_ratio, 0.0);
        assert_eq!(report.ratio_below_02, 1.0);
        assert_eq!(report.ratio_below_05, 1.0);
    }

    #[test]
    fn geometry_report_hand_ratio_and_icr() {
        let cb = Codebook::new(2, 2, vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        let pairs = vec![
            // Distance 0.1 against radius 0.5: ratio 0.2, same cell.
            (vec![0.0, 0.0], vec![0.1, 0.0]),
            // Straddles the cell boundary at x = 0.5: inconsistent.
            (vec![0.4, 0.0], vec![0.6, 0.0]),
        ];
        let report = geometry_report(&cb, &pairs).unwrap();
        assert!((report.voronoi_radius - 0.5).abs() < 1e-15);
        assert!((report.ratios[0] - 0.2).abs() < 1e-15);
        assert!((report.ratios[1] - 0.4).abs() < 1e-15);
        assert_eq!(report.icr, 0.5);
        assert_eq!(report.ratio_below_02, 0.0);
        assert_eq!(report.ratio_below_05, 1.0);
    }

    #[test]
    fn geometry_ratios_are_scale_covariant() {
        let mut rng = rng_from(&[21, 0]);
        let vectors: Vec<f64> = (0..8 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..20)
            .map(|_| {
                let h: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let h_aug: Vec<f64> = h.iter().map(|&x| x + rng.gen_range(-0.05..0.05)).collect();
                (h, h_aug)
            })
            .collect();
        let cb = Codebook::new(8, 3, vectors.clone()).unwrap();
        let base = geometry_report(&cb, &pairs).unwrap();
        for c in [0.5, 2.0] {
            let scaled_cb =
                Codebook::new(8, 3, vectors.iter().map(|&v| c * v).collect()).unwrap();
            let scaled_pairs: Vec<(Vec<f64>, Vec<f64>)> = pairs
                .iter()
                .map(|(h, ha)| {
                    (h.iter().map(|&x| c * x).collect(), ha.iter().map(|&x| c * x).collect())
                })
                .collect();
            let scaled = geometry_report(&scaled_cb, &scaled_pairs).unwrap();
            // Powers of two scale distances and the radius exactly, so the
            // ratios must match bit for bit.
            assert_eq!(base.ratios, scaled.ratios, "scale {c}");
            assert_eq!(base.icr, scaled.icr, "scale {c}");
        }
    }

    #[test]
    fn geometry_icr_orders_augmentation_strength() {
        let mut rng = rng_from(&[22, 0]);
        let vectors: Vec<f64> = (0..16 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cb = Codebook::new(16, 4, vectors).unwrap();
        let latents: Vec<Vec<f64>> =
            (0..200).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let scale_cfg = AugmentConfig { noise_sigma: 0.0, ..AugmentConfig::default() };
        let noise_cfg = AugmentConfig { noise_sigma: 0.1, ..AugmentConfig::default() };
        let mut rng_a = rng_from(&[22, 1]);
        let mut rng_b = rng_from(&[22, 2]);
        let scale_pairs: Vec<(Vec<f64>, Vec<f64>)> =
            latents.iter().map(|h| (h.clone(), augment(h, &scale_cfg, &mut rng_a))).collect();
        let noise_pairs: Vec<(Vec<f64>, Vec<f64>)> =
            latents.iter().map(|h| (h.clone(), augment(h, &noise_cfg, &mut rng_b))).collect();
        let scale_report = geometry_report(&cb, &scale_pairs).unwrap();
        let noise_report = geometry_report(&cb, &noise_pairs).unwrap();
        assert!(
            scale_report.icr >= noise_report.icr,
            "scale-only ICR {} should not trail scale+noise ICR {}",
            scale_report.icr,
            noise_report.icr
        );
    }

    #[test]
    fn geometry_quartiles_cover_all_codes() {
        // Codes at 0, 0.1 (dense pair), 10, 20, 35, 55, 80, 110: spacing
        // grows with index, so quartile ranks follow index order.
        let positions = [0.0, 0.1, 10.0, 20.0, 35.0, 55.0, 80.0, 110.0];
        let cb = Codebook::new(8, 1, positions.to_vec()).unwrap();
        let quartiles = density_quartiles(&cb);
        assert_eq!(quartiles, vec![0, 0, 1, 1, 2, 2, 3, 3]);
        let pairs: Vec<(Vec<f64>, Vec<f64>)> =
            positions.iter().map(|&p| (vec![p], vec![p + 0.01])).collect();
        let report = geometry_report(&cb, &pairs).unwrap();
        for q in 0..4 {
            assert_eq!(report.icr_by_quartile[q], Some(1.0), "quartile {q}");
        }
        assert_eq!(report.icr, 1.0);
    }

    #[test]
    fn straight_through_matches_direct_decode_gradients() {
        // Decoding the code vector with gradient rerouted to the latent must
        // produce exactly the gradient a direct decode of the code would.
        let w_data = vec![0.3, -0.7, 0.5, 0.2, 0.9, -0.4];
        let h_data = vec![0.6, -0.2];
        let e_data = vec![0.5, 0.0];
        let target = Tensor::new(&[1, 3], vec![0.4, 0.1, -0.3]).unwrap();

        let mut tape_st = Tape::new();
        let w = tape_st.leaf(Tensor::new(&[2, 3], w_data.clone()).unwrap());
        let h = tape_st.leaf(Tensor::new(&[1, 2], h_data.clone()).unwrap());
        let e = tape_st.leaf(Tensor::new(&[1, 2], e_data.clone()).unwrap());
        let st = tape_st.straight_through(e, h).unwrap();
        let decoded = tape_st.matmul(st, w).unwrap();
        let t = tape_st.leaf(target.clone());
        let loss = spectral_loss(&mut tape_st, decoded, t).unwrap();
        let grads_st = tape_st.backward(loss).unwrap();
        let grad_h = grads_st.get(h).unwrap().data().to_vec();

        let mut tape_direct = Tape::new();
        let w2 = tape_direct.leaf(Tensor::new(&[2, 3], w_data).unwrap());
        let e2 = tape_direct.leaf(Tensor::new(&[1, 2], e_data).unwrap());
        let decoded2 = tape_direct.matmul(e2, w2).unwrap();
        let t2 = tape_direct.leaf(target);
        let loss2 = spectral_loss(&mut tape_direct, decoded2, t2).unwrap();
        let grads_direct = tape_direct.backward(loss2).unwrap();
        let grad_e = grads_direct.get(e2).unwrap().data().to_vec();

        assert_eq!(grad_h, grad_e, "straight-through gradient must equal the direct one exactly");
    }

    #[test]
    fn total_loss_equals_sum_of_parts() {
        let mut tape = Tape::new();
        let pred = tape.leaf(Tensor::new(&[2, 3], vec![0.9, 0.2, 0.4, 0.1, 0.8, 0.5]).unwrap());
        let spec_target =
            tape.leaf(Tensor::new(&[2, 3], vec![1.0, 0.0, 0.5, 0.3, 0.6, 0.2]).unwrap());
        let h = tape.leaf(Tensor::new(&[2, 2], vec![0.4, -0.1, 0.3, 0.7]).unwrap());
        let e = tape.leaf(Tensor::new(&[2, 2], vec![0.2, 0.0, 0.5, 0.6]).unwrap());
        let h_aug = tape.leaf(Tensor::new(&[2, 2], vec![0.35, -0.05, 0.32, 0.66]).unwrap());
        let spec = spectral_loss(&mut tape, pred, spec_target).unwrap();
        let vq = vq_loss(&mut tape, h, e).unwrap();
        let con = consistency_loss(&mut tape, h, h_aug).unwrap();
        let partial = tape.add(spec, vq).unwrap();
        let total = tape.add(partial, con).unwrap();
        let want = tape.value(spec).item()
            + tape.value(vq).item()
            + tape.value(con).item();
        assert!((tape.value(total).item() - want).abs() <= 1e-12);
    }
}
