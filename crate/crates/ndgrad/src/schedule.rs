//! Learning-rate schedule: linear warmup from zero, then cosine decay.

/// Piecewise schedule:
///
/// * `step < warmup_steps`: linear ramp `peak · step / warmup_steps` (starts at 0);
/// * `warmup_steps ≤ step ≤ total_steps`: cosine from `peak` down to `min`;
/// * `step > total_steps`: clamped at `min`.
#[derive(Debug, Clone, Copy)]
pub struct CosineSchedule {
    pub peak: f64,
    pub min: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak * step as f64 / self.warmup_steps as f64;
        }
        if step >= self.total_steps {
            return self.min;
        }
        let denom = (self.total_steps - self.warmup_steps).max(1) as f64;
        let t = (step - self.warmup_steps) as f64 / denom;
        self.min + 0.5 * (self.peak - self.min) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}
