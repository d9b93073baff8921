//! AdamW with decoupled weight decay, global-norm gradient clipping, and a
//! parameter EMA helper.
//!
//! The update order per step is: decay first (`p ← p·(1 − lr·wd)`), then the
//! bias-corrected Adam step `p ← p − lr·m̂/(√v̂ + eps)`. Note `eps` sits
//! *outside* the square root, so a single step from zero state moves each
//! weight by exactly `−lr·g/(|g| + eps)`.

use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// AdamW optimizer; first/second-moment state is allocated lazily on the
/// first `step` call and locked to that parameter layout.
pub struct AdamW {
    cfg: AdamWConfig,
    step_count: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self { cfg, step_count: 0, m: Vec::new(), v: Vec::new() }
    }

    /// Steps taken so far.
    pub fn steps(&self) -> u64 {
        self.step_count
    }

    pub fn lr(&self) -> f64 {
        self.cfg.lr
    }

    /// Set the learning rate for subsequent steps (driven by a schedule).
    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// Apply one update. `grads` must align with `params` one-to-one.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::InvalidArg {
                op: "adamw_step",
                detail: format!("{} params but {} grads", params.len(), grads.len()),
            });
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        } else if self.m.len() != params.len() {
            return Err(Error::InvalidArg {
                op: "adamw_step",
                detail: format!("optimizer built for {} tensors, got {}", self.m.len(), params.len()),
            });
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if p.numel() != g.numel() || p.numel() != m.len() {
                return Err(Error::InvalidArg {
                    op: "adamw_step",
                    detail: format!("param/grad/state size mismatch: {} vs {} vs {}", p.numel(), g.numel(), m.len()),
                });
            }
            let decay = 1.0 - c.lr * c.weight_decay;
            let pd = p.data_mut();
            let gd = g.data();
            for i in 0..pd.len() {
                pd[i] *= decay;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gd[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gd[i] * gd[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                pd[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

/// Scale all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm measured *before* clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for g in grads.iter() {
        sq += g.sq_norm();
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= scale;
            }
        }
    }
    norm
}

/// Exponential moving average: `shadow ← decay·shadow + (1 − decay)·params`.
pub fn ema_update(shadow: &mut [Tensor], params: &[Tensor], decay: f64) {
    debug_assert_eq!(shadow.len(), params.len());
    for (s, p) in shadow.iter_mut().zip(params) {
        let sd = s.data_mut();
        let pd = p.data();
        for i in 0..sd.len() {
            sd[i] = decay * sd[i] + (1.0 - decay) * pd[i];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_sign_like_ratio() {
        // With zero state, Δ = −lr·g/(|g| + eps) regardless of |g|.
        let mut opt = AdamW::new(AdamWConfig { lr: 0.1, ..Default::default() });
        let mut p = vec![Tensor::vector(vec![1.0, -2.0])];
        let g = vec![Tensor::vector(vec![0.5, -30.0])];
        opt.step(&mut p, &g).unwrap();
        let want0 = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8);
        let want1 = -2.0 + 0.1 * 30.0 / (30.0 + 1e-8);
        assert!((p[0].data()[0] - want0).abs() < 1e-15);
        assert!((p[0].data()[1] - want1).abs() < 1e-15);
        assert!((p[0].data()[0] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn weight_decay_is_decoupled_from_the_moment_estimates() {
        let mut opt = AdamW::new(AdamWConfig { lr: 0.1, weight_decay: 0.5, ..Default::default() });
        let mut p = vec![Tensor::vector(vec![2.0])];
        let g = vec![Tensor::vector(vec![0.0])];
        opt.step(&mut p, &g).unwrap();
        // Zero gradient: only the multiplicative decay applies.
        assert_eq!(p[0].data()[0], 2.0 * (1.0 - 0.1 * 0.5));
    }

    #[test]
    fn constant_gradient_keeps_step_size_steady() {
        let mut opt = AdamW::new(AdamWConfig { lr: 0.01, ..Default::default() });
        let mut p = vec![Tensor::vector(vec![0.0])];
        let g = vec![Tensor::vector(vec![1.0])];
        let mut prev = p[0].data()[0];
        let mut deltas = Vec::new();
        for _ in 0..5 {
            opt.step(&mut p, &g).unwrap();
            deltas.push(prev - p[0].data()[0]);
            prev = p[0].data()[0];
        }
        for d in &deltas {
            assert!((d - 0.01).abs() < 1e-6, "bias-corrected step should stay ≈ lr, got {d}");
        }
    }

    #[test]
    fn mismatched_grad_count_is_an_error() {
        let mut opt = AdamW::new(AdamWConfig::default());
        let mut p = vec![Tensor::vector(vec![1.0])];
        assert!(opt.step(&mut p, &[]).is_err());
    }

    #[test]
    fn clip_scales_only_above_threshold_and_reports_pre_norm() {
        let mut gs = vec![Tensor::vector(vec![3.0]), Tensor::vector(vec![4.0])];
        let norm = clip_global_norm(&mut gs, 10.0);
        assert_eq!(norm, 5.0);
        assert_eq!(gs[0].data()[0], 3.0, "below threshold: untouched");

        let norm = clip_global_norm(&mut gs, 1.0);
        assert_eq!(norm, 5.0);
        let new_sq = gs[0].sq_norm() + gs[1].sq_norm();
        assert!((new_sq.sqrt() - 1.0).abs() < 1e-12);
        assert!((gs[0].data()[0] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn ema_blends_toward_parameters() {
        let mut shadow = vec![Tensor::vector(vec![0.0])];
        let params = vec![Tensor::vector(vec![10.0])];
        ema_update(&mut shadow, &params, 0.9);
        assert!((shadow[0].data()[0] - 1.0).abs() < 1e-12);
        ema_update(&mut shadow, &params, 0.9);
        assert!((shadow[0].data()[0] - 1.9).abs() < 1e-12);
    }
}
