//! Signal ingestion and preprocessing: band-pass filtering, resampling to
//! 50 Hz, window screening, patching, amplitude spectra, and a synthetic
//! PPG generator for end-to-end runs without real recordings.
//!
//! The preprocessing chain mirrors a standard PPG hygiene pipeline: impute
//! missing samples (the filter needs gap-free input), zero-phase band-pass
//! 0.5–8 Hz at the native rate, resample to 50 Hz, re-mark samples whose
//! sources were missing, then cut non-overlapping windows and screen them
//! for missing fraction and flatlines before min-max normalization.
//!
//! All functions here are pure and deterministic; the synthesizer draws
//! from labeled ChaCha streams so that enabling one artifact never shifts
//! the randomness of another.

use crate::seed::rng_from;
use crate::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

/// A raw single-channel recording. NaN marks a missing sample.
#[derive(Debug, Clone)]
pub struct RawRecord {
    pub sample_rate_hz: f64,
    pub samples: Vec<f64>,
}

/// A screened, gap-free, min-max normalized window at 50 Hz.
#[derive(Debug, Clone)]
pub struct Segment {
    pub samples: Vec<f64>,
}

/// Fixed pipeline rate after resampling.
pub const TARGET_RATE_HZ: f64 = 50.0;

/// Non-overlapping partition of a segment into `n` patches of `t` samples.
#[derive(Debug, Clone)]
pub struct PatchSequence {
    data: Vec<f64>,
    n: usize,
    t: usize,
}

impl PatchSequence {
    /// Builds a sequence directly from `n * t` row-major samples.
    pub fn from_raw(data: Vec<f64>, n: usize, t: usize) -> Result<Self> {
        if n == 0 || t == 0 || data.len() != n * t {
            return Err(Error::PatchMismatch { len: data.len(), patch_len: t });
        }
        Ok(Self { data, n, t })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn patch(&self, i: usize) -> &[f64] {
        &self.data[i * self.t..(i + 1) * self.t]
    }

    /// The patches laid out row-major, i.e. the original segment.
    pub fn flat(&self) -> &[f64] {
        &self.data
    }
}

/// One-sided DFT magnitudes, length ⌊T/2⌋+1.
#[derive(Debug, Clone)]
pub struct AmplitudeSpectrum {
    pub magnitudes: Vec<f64>,
}

/// Windows rejected by the screens, by reason.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropCounts {
    pub missing: usize,
    pub flatline: usize,
}

// ---------------------------------------------------------------------------
// Band-pass filter
// ---------------------------------------------------------------------------

/// One second-order section, direct form II transposed. `a[0]` is 1.
#[derive(Debug, Clone, Copy)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

#[derive(Debug, Clone, Copy)]
struct C {
    re: f64,
    im: f64,
}

impl C {
    fn new(re: f64, im: f64) -> Self {
        Self { re, im }
    }

    fn add(self, o: C) -> C {
        C::new(self.re + o.re, self.im + o.im)
    }

    fn sub(self, o: C) -> C {
        C::new(self.re - o.re, self.im - o.im)
    }

    fn mul(self, o: C) -> C {
        C::new(
            self.re * o.re - self.im * o.im,
            self.re * o.im + self.im * o.re,
        )
    }

    fn scale(self, s: f64) -> C {
        C::new(self.re * s, self.im * s)
    }

    fn div(self, o: C) -> C {
        let d = o.re * o.re + o.im * o.im;
        C::new(
            (self.re * o.re + self.im * o.im) / d,
            (self.im * o.re - self.re * o.im) / d,
        )
    }

    fn abs(self) -> f64 {
        self.re.hypot(self.im)
    }

    /// Principal square root.
    fn sqrt(self) -> C {
        let r = self.abs();
        let re = ((r + self.re) / 2.0).max(0.0).sqrt();
        let im = ((r - self.re) / 2.0).max(0.0).sqrt();
        C::new(re, if self.im < 0.0 { -im } else { im })
    }
}

/// Design a Butterworth band-pass (two-pole low-pass prototype, so four
/// poles after the band transform) as a cascade of two biquads, via
/// prewarped bilinear transform. The overall gain sits on the first
/// section. Cutoffs are the −3 dB points.
pub fn design_bandpass(low_hz: f64, high_hz: f64, fs: f64) -> Result<[Biquad; 2]> {
    if !(low_hz > 0.0 && low_hz < high_hz && high_hz < fs / 2.0) {
        return Err(Error::InvalidCutoff {
            detail: format!("need 0 < {low_hz} < {high_hz} < {}", fs / 2.0),
        });
    }
    let fs2 = 2.0 * fs;
    let w1 = fs2 * (std::f64::consts::PI * low_hz / fs).tan();
    let w2 = fs2 * (std::f64::consts::PI * high_hz / fs).tan();
    let bw = w2 - w1;
    let w0sq = w1 * w2;

    // Upper-half-plane prototype pole of the order-2 Butterworth low-pass;
    // the conjugate pair is implicit in the per-section coefficients.
    let proto = C::new(-std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2);
    let ph = proto.scale(bw / 2.0);
    let disc = ph.mul(ph).sub(C::new(w0sq, 0.0)).sqrt();
    let analog_poles = [ph.add(disc), ph.sub(disc)];

    // Bilinear transform z = (2fs + s) / (2fs − s); each analog s = 0 zero
    // lands on z = +1 and each zero at infinity lands on z = −1, giving both
    // sections a numerator proportional to 1 − z⁻².
    let mut sections = [Biquad { b: [1.0, 0.0, -1.0], a: [1.0, 0.0, 0.0] }; 2];
    for (sec, s) in sections.iter_mut().zip(analog_poles) {
        let z = C::new(fs2, 0.0).add(s).div(C::new(fs2, 0.0).sub(s));
        sec.a = [1.0, -2.0 * z.re, z.re * z.re + z.im * z.im];
    }

    // Normalize so the peak of the band sits at unit gain: the analog
    // response is exactly 1 at ω₀, which the bilinear transform maps to
    // f_peak below.
    let f_peak = (fs / std::f64::consts::PI) * (w0sq.sqrt() / fs2).atan();
    let unnorm = cascade_response(&sections, f_peak, fs);
    let k = 1.0 / unnorm;
    sections[0].b = [k, 0.0, -k];
    Ok(sections)
}

/// Magnitude of the cascade's frequency response at `f_hz`.
pub fn cascade_response(sections: &[Biquad], f_hz: f64, fs: f64) -> f64 {
    let w = 2.0 * std::f64::consts::PI * f_hz / fs;
    let e1 = C::new(w.cos(), -w.sin());
    let e2 = e1.mul(e1);
    let mut mag = 1.0;
    for s in sections {
        let num = C::new(s.b[0], 0.0).add(e1.scale(s.b[1])).add(e2.scale(s.b[2]));
        let den = C::new(1.0, 0.0).add(e1.scale(s.a[1])).add(e2.scale(s.a[2]));
        mag *= num.abs() / den.abs();
    }
    mag
}

/// Analytic Butterworth band-pass magnitude the design must reproduce:
/// 1/√(1+A⁴) with A = (ω̃² − ω₁ω₂)/((ω₂−ω₁)·ω̃) on prewarped frequencies.
pub fn butterworth_bandpass_magnitude(low_hz: f64, high_hz: f64, fs: f64, f_hz: f64) -> f64 {
    let fs2 = 2.0 * fs;
    let warp = |f: f64| fs2 * (std::f64::consts::PI * f / fs).tan();
    let (w1, w2, w) = (warp(low_hz), warp(high_hz), warp(f_hz));
    if w == 0.0 {
        return 0.0;
    }
    let a = (w * w - w1 * w2) / ((w2 - w1) * w);
    1.0 / (1.0 + a.powi(4)).sqrt()
}

/// Direct-form-II-transposed filter pass with initial state `zi`.
fn lfilter(bq: &Biquad, x: &[f64], zi: [f64; 2], out: &mut Vec<f64>) {
    out.clear();
    let [b0, b1, b2] = bq.b;
    let [_, a1, a2] = bq.a;
    let (mut z1, mut z2) = (zi[0], zi[1]);
    for &xv in x {
        let y = b0.mul_add(xv, z1);
        z1 = b1.mul_add(xv, z2) - a1 * y;
        z2 = b2.mul_add(xv, -(a2 * y));
        out.push(y);
    }
}

/// Steady-state filter state for a unit-step input; scaled by the first
/// sample of the actual input to suppress start-up transients.
fn step_state(bq: &Biquad) -> [f64; 2] {
    let [b0, b1, b2] = bq.b;
    let [_, a1, a2] = bq.a;
    let k = (b0 + b1 + b2) / (1.0 + a1 + a2);
    [k - b0, b2 - a2 * k]
}

/// Zero-phase band-pass filter: forward and backward passes through the
/// designed cascade, with odd-reflection padding (three times the
/// filter's effective impulse span) so edges see a continued signal
/// rather than a step.
pub fn bandpass_filter(record: &RawRecord, low_hz: f64, high_hz: f64) -> Result<RawRecord> {
    if record.samples.is_empty() {
        return Err(Error::EmptyRecord);
    }
    if let Some(i) = record.samples.iter().position(|v| v.is_nan()) {
        return Err(Error::MissingSamples {
            detail: format!("sample {i} is missing; impute before filtering"),
        });
    }
    let sections = design_bandpass(low_hz, high_hz, record.sample_rate_hz)?;
    let x = &record.samples;
    let n = x.len();
    // 3 × (filter span of 5 taps for a 4-pole cascade) = 15.
    let padlen = 15.min(n - 1);

    let mut ext = Vec::with_capacity(n + 2 * padlen);
    for i in 0..padlen {
        ext.push(2.0 * x[0] - x[padlen - i]);
    }
    ext.extend_from_slice(x);
    for i in 0..padlen {
        ext.push(2.0 * x[n - 1] - x[n - 2 - i]);
    }

    let mut scratch = Vec::with_capacity(ext.len());
    for _pass in 0..2 {
        for sec in &sections {
            let ss = step_state(sec);
            let zi = [ss[0] * ext[0], ss[1] * ext[0]];
            lfilter(sec, &ext, zi, &mut scratch);
            std::mem::swap(&mut ext, &mut scratch);
        }
        ext.reverse();
    }

    Ok(RawRecord {
        sample_rate_hz: record.sample_rate_hz,
        samples: ext[padlen..padlen + n].to_vec(),
    })
}

// ---------------------------------------------------------------------------
// Resampling
// ---------------------------------------------------------------------------

/// Linear-interpolation resampling. Output positions that coincide exactly
/// with input samples copy them bitwise, so resampling to the native rate
/// is the identity.
pub fn resample(record: &RawRecord, target_hz: f64) -> Result<RawRecord> {
    if record.samples.is_empty() {
        return Err(Error::EmptyRecord);
    }
    if !(target_hz > 0.0) {
        return Err(Error::InvalidCutoff {
            detail: format!("target rate must be positive, got {target_hz}"),
        });
    }
    let x = &record.samples;
    let n = x.len();
    let ratio = record.sample_rate_hz / target_hz;
    let n_out = ((n as f64) / ratio).round().max(1.0) as usize;
    let mut out = Vec::with_capacity(n_out);
    for i in 0..n_out {
        let p = i as f64 * ratio;
        let j = p.floor() as usize;
        if j >= n - 1 {
            out.push(x[n - 1]);
        } else {
            let frac = p - j as f64;
            if frac == 0.0 {
                out.push(x[j]);
            } else {
                out.push(x[j] + frac * (x[j + 1] - x[j]));
            }
        }
    }
    Ok(RawRecord { sample_rate_hz: target_hz, samples: out })
}

// ---------------------------------------------------------------------------
// Imputation, screening, segmentation
// ---------------------------------------------------------------------------

/// Fill NaN gaps in place: interior gaps by linear interpolation between
/// the nearest valid neighbors, leading/trailing gaps by the nearest valid
/// value. A slice with no valid samples is left untouched.
pub fn impute_linear(x: &mut [f64]) {
    let first_valid = match x.iter().position(|v| !v.is_nan()) {
        Some(i) => i,
        None => return,
    };
    let last_valid = x.iter().rposition(|v| !v.is_nan()).unwrap();
    for v in x[..first_valid].iter_mut() {
        *v = f64::NAN; // normalized below via fill
    }
    let head = x[first_valid];
    for v in x[..first_valid].iter_mut() {
        *v = head;
    }
    let tail = x[last_valid];
    for v in x[last_valid + 1..].iter_mut() {
        *v = tail;
    }
    let mut i = first_valid;
    while i < last_valid {
        if !x[i + 1].is_nan() {
            i += 1;
            continue;
        }
        let gap_start = i;
        let mut j = i + 1;
        while x[j].is_nan() {
            j += 1;
        }
        let (a, b) = (x[gap_start], x[j]);
        let span = (j - gap_start) as f64;
        for (step, v) in x[gap_start + 1..j].iter_mut().enumerate() {
            *v = a + (b - a) * (step + 1) as f64 / span;
        }
        i = j;
    }
}

const FLATLINE_EPS: f64 = 1e-6;
const FLATLINE_MIN_S: f64 = 2.0;
const FLATLINE_COVERAGE: f64 = 0.10;
const MISSING_MAX_FRACTION: f64 = 0.20;

/// Total samples covered by flatline runs: maximal stretches at least 2 s
/// long whose values stay within [`FLATLINE_EPS`] of the run's first sample
/// and whose standard deviation is below the same bound.
fn flatline_coverage(w: &[f64], rate_hz: f64) -> usize {
    let run_min = ((FLATLINE_MIN_S * rate_hz).round() as usize).max(2);
    let mut covered = 0;
    let mut i = 0;
    while i < w.len() {
        let anchor = w[i];
        let mut j = i + 1;
        while j < w.len() && (w[j] - anchor).abs() <= FLATLINE_EPS {
            j += 1;
        }
        let run = j - i;
        if run >= run_min {
            let mean = w[i..j].iter().sum::<f64>() / run as f64;
            let var = w[i..j].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / run as f64;
            if var.sqrt() < FLATLINE_EPS {
                covered += run;
            }
        }
        i = j;
    }
    covered
}

/// Cut `record` into non-overlapping windows of `window_s` seconds and keep
/// the ones that pass the screens: missing fraction ≤ 20% (gaps imputed
/// linearly, edges by nearest value), and flatline coverage ≤ 10% of the
/// window. Survivors are min-max normalized to [0, 1]. Rejected windows are
/// counted, not errors.
pub fn segment_and_screen(record: &RawRecord, window_s: f64) -> (Vec<Segment>, DropCounts) {
    let rate = record.sample_rate_hz;
    let l = (window_s * rate).round() as usize;
    let mut out = Vec::new();
    let mut drops = DropCounts::default();
    if l == 0 {
        return (out, drops);
    }
    let n_windows = record.samples.len() / l;
    for w_idx in 0..n_windows {
        let mut w = record.samples[w_idx * l..(w_idx + 1) * l].to_vec();
        let missing = w.iter().filter(|v| v.is_nan()).count();
        if missing as f64 > MISSING_MAX_FRACTION * l as f64 {
            drops.missing += 1;
            continue;
        }
        impute_linear(&mut w);
        if flatline_coverage(&w, rate) as f64 > FLATLINE_COVERAGE * l as f64 {
            drops.flatline += 1;
            continue;
        }
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &v in &w {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let range = hi - lo;
        if range <= 0.0 {
            // Fully constant but shorter than the 2 s run rule can only
            // happen for tiny windows; treat as flatline either way.
            drops.flatline += 1;
            continue;
        }
        for v in w.iter_mut() {
            *v = (*v - lo) / range;
        }
        out.push(Segment { samples: w });
    }
    (out, drops)
}

// ---------------------------------------------------------------------------
// Patching and spectra
// ---------------------------------------------------------------------------

/// Split a segment into non-overlapping patches of `patch_len` samples.
pub fn patchify(segment: &Segment, patch_len: usize) -> Result<PatchSequence> {
    let l = segment.samples.len();
    if patch_len == 0 || l % patch_len != 0 {
        return Err(Error::PatchMismatch { len: l, patch_len });
    }
    Ok(PatchSequence {
        data: segment.samples.clone(),
        n: l / patch_len,
        t: patch_len,
    })
}

/// One-sided DFT magnitude of a patch, length ⌊T/2⌋+1. Direct O(T²)
/// evaluation: T is 50 in this pipeline and spectra are computed once per
/// dataset, so no transform machinery is warranted.
pub fn amplitude_spectrum(patch: &[f64]) -> AmplitudeSpectrum {
    let t = patch.len();
    debug_assert!(t >= 2, "amplitude_spectrum needs at least two samples");
    let mut magnitudes = Vec::with_capacity(t / 2 + 1);
    for k in 0..=t / 2 {
        let (mut re, mut im) = (0.0, 0.0);
        for (n, &v) in patch.iter().enumerate() {
            let ang = 2.0 * std::f64::consts::PI * (k * n) as f64 / t as f64;
            re += v * ang.cos();
            im -= v * ang.sin();
        }
        magnitudes.push(re.hypot(im));
    }
    AmplitudeSpectrum { magnitudes }
}

/// One-sided DFT phase of a patch: the principal-value angle `atan2(im, re)`
/// in `(-pi, pi]` per bin, length ⌊T/2⌋+1. No unwrapping is applied.
pub fn phase_spectrum(patch: &[f64]) -> Vec<f64> {
    let t = patch.len();
    debug_assert!(t >= 2, "phase_spectrum needs at least two samples");
    let mut phases = Vec::with_capacity(t / 2 + 1);
    for k in 0..=t / 2 {
        let (mut re, mut im) = (0.0, 0.0);
        for (n, &v) in patch.iter().enumerate() {
            let ang = 2.0 * std::f64::consts::PI * (k * n) as f64 / t as f64;
            re += v * ang.cos();
            im -= v * ang.sin();
        }
        phases.push(im.atan2(re));
    }
    phases
}

// ---------------------------------------------------------------------------
// Synthetic PPG
// ---------------------------------------------------------------------------

/// Configuration for the synthetic PPG generator.
///
/// The clean waveform is a per-beat pair of Gaussians (systolic peak plus a
/// smaller, delayed dicrotic bump) repeated with an integer-sample period,
/// plus sinusoidal baseline wander and white noise. Artifact spans then
/// overwrite the clean signal: flatlines hold the span's first value,
/// spike spans replace samples with large alternating-sign excursions, and
/// missing spans become NaN.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub duration_s: f64,
    pub sample_rate_hz: f64,
    /// Uniform heart-rate range in beats per minute; one draw per record.
    pub heart_rate_bpm: (f64, f64),
    /// Dicrotic bump height relative to the unit systolic peak.
    pub notch_amp: f64,
    pub wander_amp: f64,
    pub wander_freq_hz: f64,
    pub noise_sigma: f64,
    /// Spans in seconds, start inclusive, end exclusive.
    pub flatline_spans: Vec<(f64, f64)>,
    pub spike_spans: Vec<(f64, f64)>,
    pub missing_spans: Vec<(f64, f64)>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            duration_s: 240.0,
            sample_rate_hz: 125.0,
            heart_rate_bpm: (50.0, 90.0),
            notch_amp: 0.35,
            wander_amp: 0.08,
            wander_freq_hz: 0.25,
            noise_sigma: 0.01,
            flatline_spans: Vec::new(),
            spike_spans: Vec::new(),
            missing_spans: Vec::new(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(Error::InvalidSchedule { detail });
        if !(self.duration_s > 0.0) || !(self.sample_rate_hz > 0.0) {
            return bad("duration and sample rate must be positive".into());
        }
        let (lo, hi) = self.heart_rate_bpm;
        if !(lo > 0.0 && lo <= hi) {
            return bad(format!("heart-rate range ({lo}, {hi}) must be positive and ordered"));
        }
        if self.notch_amp < 0.0 || self.wander_amp < 0.0 || self.noise_sigma < 0.0 {
            return bad("amplitudes must be non-negative".into());
        }
        for &(s, e) in self
            .flatline_spans
            .iter()
            .chain(&self.spike_spans)
            .chain(&self.missing_spans)
        {
            if !(0.0 <= s && s < e && e <= self.duration_s) {
                return bad(format!("span [{s}, {e}] outside [0, {}]", self.duration_s));
            }
        }
        Ok(())
    }

    fn span_indices(&self, span: (f64, f64), n: usize) -> std::ops::Range<usize> {
        let a = (span.0 * self.sample_rate_hz).round() as usize;
        let b = (span.1 * self.sample_rate_hz).round() as usize;
        a.min(n)..b.min(n)
    }
}

/// Gaussian bump helper for the beat template.
fn bump(tau: f64, mu: f64, sd: f64) -> f64 {
    let z = (tau - mu) / sd;
    (-0.5 * z * z).exp()
}

/// Generate a synthetic PPG record. Deterministic given the config; each
/// randomness consumer (heart rate, wander phase, noise, spikes) has its
/// own derived stream.
pub fn synth_ppg(config: &SynthConfig) -> Result<RawRecord> {
    config.validate()?;
    let fs = config.sample_rate_hz;
    let n = (config.duration_s * fs).round() as usize;

    let mut hr_rng: ChaCha20Rng = rng_from(&[config.seed, 0]);
    let (lo, hi) = config.heart_rate_bpm;
    let hr = lo + hr_rng.gen::<f64>() * (hi - lo);
    // Integer-sample beat period makes the clean waveform exactly periodic.
    let period_samples = ((fs * 60.0 / hr).round() as usize).max(1);
    let p = period_samples as f64 / fs;

    let mut wander_rng: ChaCha20Rng = rng_from(&[config.seed, 1]);
    let wander_phase = wander_rng.gen::<f64>() * 2.0 * std::f64::consts::PI;

    let mut noise_rng: ChaCha20Rng = rng_from(&[config.seed, 2]);

    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let tau = (i % period_samples) as f64 / fs;
        // Current beat plus both neighbors, so the template is smooth
        // across the phase wrap.
        let mut pulse = 0.0;
        for shift in [-1.0, 0.0, 1.0] {
            let tt = tau - shift * p;
            pulse += bump(tt, 0.30 * p, 0.08 * p);
            pulse += config.notch_amp * bump(tt, 0.55 * p, 0.12 * p);
        }
        let t = i as f64 / fs;
        let wander = config.wander_amp
            * (2.0 * std::f64::consts::PI * config.wander_freq_hz * t + wander_phase).sin();
        let noise = if config.noise_sigma > 0.0 {
            config.noise_sigma * standard_normal(&mut noise_rng)
        } else {
            0.0
        };
        samples.push(0.2 + pulse + wander + noise);
    }

    for &span in &config.flatline_spans {
        let r = config.span_indices(span, n);
        if !r.is_empty() {
            let held = samples[r.start];
            samples[r.clone()].fill(held);
        }
    }
    let mut spike_rng: ChaCha20Rng = rng_from(&[config.seed, 3]);
    for &span in &config.spike_spans {
        for i in config.span_indices(span, n) {
            samples[i] = 0.2 + 3.0 * (spike_rng.gen::<f64>() * 2.0 - 1.0);
        }
    }
    for &span in &config.missing_spans {
        for i in config.span_indices(span, n) {
            samples[i] = f64::NAN;
        }
    }

    Ok(RawRecord { sample_rate_hz: fs, samples })
}

/// Box-Muller standard normal from two uniform draws.
fn standard_normal(rng: &mut ChaCha20Rng) -> f64 {
    let u1: f64 = rng.gen::<f64>().max(1e-300);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

// ---------------------------------------------------------------------------
// Full preprocessing chain
// ---------------------------------------------------------------------------

/// Preprocessing parameters; defaults follow the pipeline contract.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub low_hz: f64,
    pub high_hz: f64,
    pub window_s: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self { low_hz: 0.5, high_hz: 8.0, window_s: 240.0 }
    }
}

/// Run the whole chain on one record: impute, band-pass at the native
/// rate, resample to 50 Hz, restore missingness at the new rate, then
/// segment and screen. Returns the surviving segments and drop counts.
pub fn preprocess_record(
    record: &RawRecord,
    cfg: &PreprocessConfig,
) -> Result<(Vec<Segment>, DropCounts)> {
    if record.samples.is_empty() {
        return Err(Error::EmptyRecord);
    }
    let n = record.samples.len();
    let missing_mask: Vec<bool> = record.samples.iter().map(|v| v.is_nan()).collect();
    if missing_mask.iter().all(|&m| m) {
        // Nothing to filter; every window would fail the missing screen.
        let l = (cfg.window_s * TARGET_RATE_HZ).round() as usize;
        let windows = if l == 0 { 0 } else { (n as f64 / record.sample_rate_hz * TARGET_RATE_HZ) as usize / l };
        return Ok((Vec::new(), DropCounts { missing: windows, flatline: 0 }));
    }

    let mut imputed = record.samples.clone();
    impute_linear(&mut imputed);
    let filtered = bandpass_filter(
        &RawRecord { sample_rate_hz: record.sample_rate_hz, samples: imputed },
        cfg.low_hz,
        cfg.high_hz,
    )?;
    let mut at_target = resample(&filtered, TARGET_RATE_HZ)?;

    // A resampled value is missing if any source sample it interpolates
    // from was missing in the raw record.
    let ratio = record.sample_rate_hz / TARGET_RATE_HZ;
    for (i, v) in at_target.samples.iter_mut().enumerate() {
        let p = i as f64 * ratio;
        let j = (p.floor() as usize).min(n - 1);
        let frac = p - p.floor();
        let hit = if j >= n - 1 {
            missing_mask[n - 1]
        } else if frac == 0.0 {
            missing_mask[j]
        } else {
            missing_mask[j] || missing_mask[j + 1]
        };
        if hit {
            *v = f64::NAN;
        }
    }

    Ok(segment_and_screen(&at_target, cfg.window_s))
}
