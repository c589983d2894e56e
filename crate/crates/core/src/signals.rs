//! Sampled waveforms, FM chirp synthesis and matched filtering.
//!
//! Everything in here is a pure function over immutable [`Waveform`] values.
//! The fractional-delay helpers are shared by the simulator (to place echoes)
//! and the beamformer (to align channels) so both sides see the same
//! interpolation error.

use std::cell::RefCell;
use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Above this input length [`matched_filter`] correlates in the frequency domain.
pub const DIRECT_CORRELATION_MAX_LEN: usize = 4096;

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("invalid parameter `{field}`: {reason}")]
    Parameter { field: &'static str, reason: String },
    #[error("sample rate mismatch: {left} Hz vs {right} Hz")]
    SampleRateMismatch { left: f64, right: f64 },
    #[error("template ({template} samples) longer than signal ({signal} samples)")]
    TemplateTooLong { template: usize, signal: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed waveform file {path}: {reason}")]
    Format { path: String, reason: String },
}

fn param(field: &'static str, reason: impl Into<String>) -> SignalError {
    SignalError::Parameter {
        field,
        reason: reason.into(),
    }
}

/// A uniformly sampled, real-valued signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: f64,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: f64) -> Result<Self, SignalError> {
        if !(sample_rate > 0.0) || !sample_rate.is_finite() {
            return Err(param("sample_rate", "must be positive and finite"));
        }
        if samples.is_empty() {
            return Err(param("samples", "must be non-empty"));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(param("samples", format!("non-finite value at index {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    /// All-zero waveform of `len` samples.
    pub fn zeros(len: usize, sample_rate: f64) -> Result<Self, SignalError> {
        Self::new(vec![0.0; len], sample_rate)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|s| s * s).sum()
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0_f64, |m, s| m.max(s.abs()))
    }

    /// Writes `<stem>.f32` (little-endian f32 samples) and `<stem>.json`
    /// (`{sample_rate, length}`).
    pub fn write_raw(&self, stem: &Path) -> Result<(), SignalError> {
        let data_path = stem.with_extension("f32");
        let mut bytes = Vec::with_capacity(self.samples.len() * 4);
        for &s in &self.samples {
            bytes.extend_from_slice(&(s as f32).to_le_bytes());
        }
        write_file(&data_path, &bytes)?;
        let sidecar = RawSidecar {
            sample_rate: self.sample_rate,
            length: self.samples.len(),
        };
        let json = serde_json::to_vec_pretty(&sidecar).expect("sidecar serializes");
        write_file(&stem.with_extension("json"), &json)
    }

    /// Reads a waveform written by [`Waveform::write_raw`].
    pub fn read_raw(stem: &Path) -> Result<Self, SignalError> {
        let json_path = stem.with_extension("json");
        let data_path = stem.with_extension("f32");
        let sidecar: RawSidecar = serde_json::from_slice(&read_file(&json_path)?).map_err(|e| {
            SignalError::Format {
                path: json_path.display().to_string(),
                reason: e.to_string(),
            }
        })?;
        let bytes = read_file(&data_path)?;
        if bytes.len() != sidecar.length * 4 {
            return Err(SignalError::Format {
                path: data_path.display().to_string(),
                reason: format!(
                    "expected {} bytes for {} samples, found {}",
                    sidecar.length * 4,
                    sidecar.length,
                    bytes.len()
                ),
            });
        }
        let samples = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Self::new(samples, sidecar.sample_rate)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RawSidecar {
    sample_rate: f64,
    length: usize,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), SignalError> {
    let io = |source| SignalError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(bytes).map_err(io)
}

fn read_file(path: &Path) -> Result<Vec<u8>, SignalError> {
    fs::read(path).map_err(|source| SignalError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Linear FM sweep parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChirpSpec {
    pub f_start: f64,
    pub f_end: f64,
    pub duration: f64,
    pub sample_rate: f64,
    pub amplitude: f64,
    /// Tukey taper ratio in (0, 1]; `None` emits an untapered sweep.
    #[serde(default)]
    pub taper: Option<f64>,
}

impl Default for ChirpSpec {
    /// 80 kHz → 25 kHz downward sweep, 2.5 ms at 450 kHz.
    fn default() -> Self {
        Self {
            f_start: 80e3,
            f_end: 25e3,
            duration: 2.5e-3,
            sample_rate: 450e3,
            amplitude: 1.0,
            taper: None,
        }
    }
}

impl ChirpSpec {
    pub fn validate(&self) -> Result<(), SignalError> {
        if !(self.sample_rate > 0.0) || !self.sample_rate.is_finite() {
            return Err(param("sample_rate", "must be positive"));
        }
        let nyquist = self.sample_rate / 2.0;
        for (field, f) in [("f_start", self.f_start), ("f_end", self.f_end)] {
            if !(f > 0.0 && f < nyquist) {
                return Err(param(field, format!("{f} Hz outside (0, {nyquist}) Hz")));
            }
        }
        if self.f_start == self.f_end {
            return Err(param("f_end", "must differ from f_start"));
        }
        if !(self.duration > 0.0) || !self.duration.is_finite() {
            return Err(param("duration", "must be positive"));
        }
        if !(self.amplitude > 0.0) || !self.amplitude.is_finite() {
            return Err(param("amplitude", "must be positive"));
        }
        if (self.duration * self.sample_rate).round() < 1.0 {
            return Err(param("duration", "shorter than one sample"));
        }
        if let Some(alpha) = self.taper {
            if !(alpha > 0.0 && alpha <= 1.0) {
                return Err(param("taper", "Tukey ratio must be in (0, 1]"));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        (self.duration * self.sample_rate).round() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Linear-frequency sweep `A·sin(2π(f0·t + (f1−f0)·t²/(2T)))`.
///
/// The sampled sweep is rescaled so its largest sample magnitude equals
/// `spec.amplitude` exactly (the raw samples only graze the continuous peak).
pub fn make_chirp(spec: &ChirpSpec) -> Result<Waveform, SignalError> {
    spec.validate()?;
    let n = spec.len();
    let sweep_rate = (spec.f_end - spec.f_start) / spec.duration;
    let mut samples: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / spec.sample_rate;
            (2.0 * PI * (spec.f_start * t + 0.5 * sweep_rate * t * t)).sin()
        })
        .collect();
    if let Some(alpha) = spec.taper {
        for (i, s) in samples.iter_mut().enumerate() {
            *s *= tukey(i, n, alpha);
        }
    }
    let peak = samples.iter().fold(0.0_f64, |m, s| m.max(s.abs()));
    let scale = spec.amplitude / peak;
    samples.iter_mut().for_each(|s| *s *= scale);
    Waveform::new(samples, spec.sample_rate)
}

fn tukey(i: usize, n: usize, alpha: f64) -> f64 {
    if n < 2 {
        return 1.0;
    }
    let x = i as f64 / (n - 1) as f64;
    let edge = alpha / 2.0;
    if x < edge {
        0.5 * (1.0 - (PI * x / edge).cos())
    } else if x > 1.0 - edge {
        0.5 * (1.0 - (PI * (1.0 - x) / edge).cos())
    } else {
        1.0
    }
}

/// Fractional-delay interpolation kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    #[default]
    Linear,
    /// Hann-windowed sinc with the given half width in samples.
    Sinc { half_width: usize },
}

/// Value of `x` at fractional index `pos`; zero outside the signal.
#[inline]
pub fn sample_at(x: &[f64], pos: f64, interp: Interpolation) -> f64 {
    match interp {
        Interpolation::Linear => {
            let base = pos.floor();
            let frac = pos - base;
            let i = base as isize;
            let get = |k: isize| {
                if k >= 0 && (k as usize) < x.len() {
                    x[k as usize]
                } else {
                    0.0
                }
            };
            (1.0 - frac) * get(i) + frac * get(i + 1)
        }
        Interpolation::Sinc { half_width } => {
            let base = pos.floor() as isize;
            let hw = half_width.max(1) as isize;
            let mut acc = 0.0;
            for k in (base - hw + 1)..=(base + hw) {
                if k < 0 || k as usize >= x.len() {
                    continue;
                }
                let d = pos - k as f64;
                acc += x[k as usize] * windowed_sinc(d, hw as f64);
            }
            acc
        }
    }
}

fn windowed_sinc(d: f64, half_width: f64) -> f64 {
    if d.abs() >= half_width {
        return 0.0;
    }
    let sinc = if d == 0.0 {
        1.0
    } else {
        (PI * d).sin() / (PI * d)
    };
    let w = 0.5 * (1.0 + (PI * d / half_width).cos());
    sinc * w
}

/// Adds `gain · src(t − delay)` into `out`, where `delay` is in samples.
///
/// This is the simulator's echo placement primitive; the beamformer reads
/// channels through [`sample_at`] with the same kernel.
pub fn add_delayed(out: &mut [f64], src: &[f64], delay: f64, gain: f64, interp: Interpolation) {
    if src.is_empty() || gain == 0.0 {
        return;
    }
    let reach = match interp {
        Interpolation::Linear => 1,
        Interpolation::Sinc { half_width } => half_width.max(1),
    } as f64;
    let lo = (delay - reach).floor().max(0.0) as usize;
    let hi = ((delay + src.len() as f64 + reach).ceil() as usize).min(out.len());
    if lo >= hi {
        return;
    }
    match interp {
        Interpolation::Linear => {
            // out[n] += g·((1−μ)·src[n−k] + μ·src[n−k−1]) with delay = k + μ
            let k = delay.floor();
            let mu = delay - k;
            let k = k as isize;
            let a = gain * (1.0 - mu);
            let b = gain * mu;
            for (n, o) in out.iter_mut().enumerate().take(hi).skip(lo) {
                let j = n as isize - k;
                let s0 = if j >= 0 && (j as usize) < src.len() {
                    src[j as usize]
                } else {
                    0.0
                };
                let s1 = if j >= 1 && ((j - 1) as usize) < src.len() {
                    src[(j - 1) as usize]
                } else {
                    0.0
                };
                *o += a * s0 + b * s1;
            }
        }
        Interpolation::Sinc { .. } => {
            for (n, o) in out.iter_mut().enumerate().take(hi).skip(lo) {
                *o += gain * sample_at(src, n as f64 - delay, interp);
            }
        }
    }
}

/// Smallest `n' ≥ n` whose only prime factors are 2, 3 and 5.
pub fn fft_friendly_len(n: usize) -> usize {
    let mut m = n.max(1);
    loop {
        let mut r = m;
        for p in [2, 3, 5] {
            while r.is_multiple_of(p) {
                r /= p;
            }
        }
        if r == 1 {
            return m;
        }
        m += 1;
    }
}

pub(crate) fn unit_template(template: &[f64]) -> Vec<f64> {
    let norm = template.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return template.to_vec();
    }
    template.iter().map(|v| v / norm).collect()
}

/// Cross-correlation of `x` with the unit-L2 `template`.
///
/// `output[n]` is the response to a template copy starting at `x[n]`;
/// the output holds `len(x) − len(template) + 1` samples.
pub fn matched_filter(x: &Waveform, template: &Waveform) -> Result<Waveform, SignalError> {
    check_pair(x, template)?;
    let t = unit_template(template.samples());
    let out = if x.len() > DIRECT_CORRELATION_MAX_LEN {
        correlate_fft(x.samples(), &t)
    } else {
        correlate_direct(x.samples(), &t)
    };
    Waveform::new(out, x.sample_rate())
}

pub(crate) fn check_pair(x: &Waveform, template: &Waveform) -> Result<(), SignalError> {
    if x.sample_rate() != template.sample_rate() {
        return Err(SignalError::SampleRateMismatch {
            left: x.sample_rate(),
            right: template.sample_rate(),
        });
    }
    if template.len() > x.len() {
        return Err(SignalError::TemplateTooLong {
            template: template.len(),
            signal: x.len(),
        });
    }
    Ok(())
}

/// Valid-range correlation `Σ_k x[n+k]·t[k]`, evaluated directly.
pub fn correlate_direct(x: &[f64], t: &[f64]) -> Vec<f64> {
    let n_out = x.len() + 1 - t.len();
    (0..n_out)
        .map(|n| x[n..n + t.len()].iter().zip(t).map(|(a, b)| a * b).sum())
        .collect()
}

/// Valid-range correlation computed with one FFT round trip.
pub fn correlate_fft(x: &[f64], t: &[f64]) -> Vec<f64> {
    let n_out = x.len() + 1 - t.len();
    let size = fft_friendly_len(x.len());
    let FftPair {
        forward: fwd,
        inverse: inv,
        ..
    } = FftPair::new(size);
    // x in the real part, t in the imaginary part: one forward transform for both
    let mut buf: Vec<Complex<f64>> = (0..size)
        .map(|i| {
            Complex::new(
                x.get(i).copied().unwrap_or(0.0),
                t.get(i).copied().unwrap_or(0.0),
            )
        })
        .collect();
    fwd.process(&mut buf);
    let mut prod = vec![Complex::new(0.0, 0.0); size];
    for k in 0..size {
        let a = buf[k];
        let b = buf[(size - k) % size].conj();
        let xk = (a + b) * 0.5;
        let tk = (a - b) * Complex::new(0.0, -0.5);
        prod[k] = xk * tk.conj();
    }
    inv.process(&mut prod);
    let scale = 1.0 / size as f64;
    prod[..n_out].iter().map(|c| c.re * scale).collect()
}

/// Reusable forward/inverse plans for one transform size.
#[derive(Clone)]
pub struct FftPair {
    pub size: usize,
    pub forward: Arc<dyn Fft<f64>>,
    pub inverse: Arc<dyn Fft<f64>>,
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

impl FftPair {
    /// Plans are cached per thread, so repeated sizes are cheap.
    pub fn new(size: usize) -> Self {
        PLANNER.with(|p| {
            let mut planner = p.borrow_mut();
            Self {
                size,
                forward: planner.plan_fft_forward(size),
                inverse: planner.plan_fft_inverse(size),
            }
        })
    }
}

impl std::fmt::Debug for FftPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FftPair").field("size", &self.size).finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn default_chirp(up: bool) -> Waveform {
        let mut spec = ChirpSpec::default();
        if up {
            spec.f_start = 25e3;
            spec.f_end = 80e3;
        }
        make_chirp(&spec).unwrap()
    }

    #[test]
    fn chirp_length_from_duration_and_rate() {
        assert_eq!(default_chirp(true).len(), 1125);
        assert_eq!(default_chirp(false).len(), 1125);
    }

    #[test]
    fn degenerate_chirp_rejected() {
        let spec = ChirpSpec {
            f_end: 80e3,
            f_start: 80e3,
            ..ChirpSpec::default()
        };
        match make_chirp(&spec) {
            Err(SignalError::Parameter { field, .. }) => assert_eq!(field, "f_end"),
            other => panic!("expected parameter error, got {other:?}"),
        }
        let spec = ChirpSpec {
            f_start: 300e3,
            ..ChirpSpec::default()
        };
        assert!(matches!(
            make_chirp(&spec),
            Err(SignalError::Parameter { field: "f_start", .. })
        ));
    }

    #[test]
    fn midpoint_frequency_from_zero_crossings() {
        // 45 kHz-wide sweep changes by only ±0.55 kHz across a 20 µs window
        for up in [true, false] {
            let w = default_chirp(up);
            let fs = w.sample_rate();
            let mid = w.len() / 2;
            let half = 45; // 100 µs window
            let s = &w.samples()[mid - half..mid + half];
            let mut crossings = Vec::new();
            for i in 1..s.len() {
                if s[i - 1] == 0.0 || (s[i - 1] < 0.0) != (s[i] < 0.0) {
                    let frac = s[i - 1] / (s[i - 1] - s[i]);
                    crossings.push(i as f64 - 1.0 + frac);
                }
            }
            let span = (crossings.last().unwrap() - crossings[0]) / fs;
            let f = (crossings.len() - 1) as f64 / (2.0 * span);
            assert!((f - 52.5e3).abs() < 0.8e3, "estimated {f} Hz");
        }
    }

    #[test]
    fn autocorrelation_peaks_at_zero_lag() {
        let c = default_chirp(false);
        let out = matched_filter(&c, &c).unwrap();
        assert_eq!(out.len(), 1);
        let mut x = c.samples().to_vec();
        x.extend(std::iter::repeat_n(0.0, 2000));
        let out = matched_filter(&Waveform::new(x, c.sample_rate()).unwrap(), &c).unwrap();
        assert_eq!(argmax(out.samples()), 0);
    }

    #[test]
    fn shifted_chirp_peaks_at_shift() {
        let c = default_chirp(false);
        let mut x = vec![0.0; 500];
        x.extend_from_slice(c.samples());
        x.extend(std::iter::repeat_n(0.0, 3000));
        let x = Waveform::new(x, c.sample_rate()).unwrap();
        let out = matched_filter(&x, &c).unwrap();
        assert_eq!(out.len(), x.len() - c.len() + 1);
        assert_eq!(argmax(out.samples()), 500);
        // long input goes through the FFT path
        let mut long = vec![0.0; 6000];
        long[..x.len()].copy_from_slice(x.samples());
        let out = matched_filter(&Waveform::new(long, c.sample_rate()).unwrap(), &c).unwrap();
        assert_eq!(argmax(out.samples()), 500);
    }

    #[test]
    fn sample_rate_mismatch_is_error() {
        let c = default_chirp(false);
        let x = Waveform::zeros(4000, 400e3).unwrap();
        assert!(matches!(
            matched_filter(&x, &c),
            Err(SignalError::SampleRateMismatch { .. })
        ));
        let short = Waveform::zeros(10, c.sample_rate()).unwrap();
        assert!(matches!(
            matched_filter(&short, &c),
            Err(SignalError::TemplateTooLong { .. })
        ));
    }

    #[test]
    fn direct_and_fft_correlation_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..9000).map(|_| StandardNormal.sample(&mut rng)).collect();
        let t = unit_template(default_chirp(true).samples());
        let a = correlate_direct(&x, &t);
        let b = correlate_fft(&x, &t);
        let scale = a.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() <= 1e-6 * scale);
        }
    }

    #[test]
    fn correlation_equals_convolution_with_reversed_template() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f64> = (0..700).map(|_| StandardNormal.sample(&mut rng)).collect();
        let t: Vec<f64> = (0..40).map(|_| StandardNormal.sample(&mut rng)).collect();
        let rev: Vec<f64> = t.iter().rev().copied().collect();
        // full convolution, then the fully overlapping part
        let full: Vec<f64> = (0..x.len() + rev.len() - 1)
            .map(|n| {
                (0..rev.len())
                    .filter(|&k| n >= k && n - k < x.len())
                    .map(|k| rev[k] * x[n - k])
                    .sum()
            })
            .collect();
        let conv = &full[rev.len() - 1..x.len()];
        let corr = correlate_direct(&x, &t);
        for (a, b) in corr.iter().zip(conv) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    /// Monte-Carlo gain: −10 dB SNR (mean chirp power over noise variance).
    /// Peak-to-RMS in = clean chirp peak / noise rms; out = filter response at
    /// the echo lag / rms of the filter output over noise-only lags.
    fn matched_filter_gain_db(seeds: u64) -> f64 {
        let c = default_chirp(false);
        let signal_power = c.energy() / c.len() as f64;
        let sigma = (10.0 * signal_power).sqrt();
        let onset = 3000;
        let len = 12000;
        let mut total = 0.0;
        for seed in 0..seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let noise: Vec<f64> = (0..len)
                .map(|_| sigma * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                .collect();
            let mut x = noise.clone();
            for (i, s) in c.samples().iter().enumerate() {
                x[onset + i] += s;
            }
            let prr_in = c.peak() / rms(&noise);
            let y = matched_filter(&Waveform::new(x, c.sample_rate()).unwrap(), &c).unwrap();
            let y = y.samples();
            let noise_only: Vec<f64> = y
                .iter()
                .enumerate()
                .filter(|(i, _)| i.abs_diff(onset) > c.len())
                .map(|(_, v)| *v)
                .collect();
            let prr_out = y[onset].abs() / rms(&noise_only);
            total += 20.0 * (prr_out / prr_in).log10();
        }
        total / seeds as f64
    }

    fn rms(x: &[f64]) -> f64 {
        (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
    }

    fn argmax(x: &[f64]) -> usize {
        x.iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0
    }

    #[test]
    fn matched_filter_gain_over_noise() {
        let gain = matched_filter_gain_db(100);
        assert!(gain >= 15.0, "gain {gain} dB");
    }

    #[test]
    fn zero_padded_raw_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = default_chirp(true);
        let stem = dir.path().join("chirp");
        c.write_raw(&stem).unwrap();
        let back = Waveform::read_raw(&stem).unwrap();
        assert_eq!(back.len(), c.len());
        assert_eq!(back.sample_rate(), c.sample_rate());
        for (a, b) in back.samples().iter().zip(c.samples()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        std::fs::write(stem.with_extension("f32"), [0u8; 7]).unwrap();
        assert!(matches!(
            Waveform::read_raw(&stem),
            Err(SignalError::Format { .. })
        ));
    }

    #[test]
    fn linear_delay_of_integer_shift_is_exact() {
        let src = [1.0, 2.0, 3.0];
        let mut out = vec![0.0; 8];
        add_delayed(&mut out, &src, 2.0, 1.0, Interpolation::Linear);
        assert_eq!(out, vec![0.0, 0.0, 1.0, 2.0, 3.0, 0.0, 0.0, 0.0]);
        let mut out = vec![0.0; 8];
        add_delayed(&mut out, &src, 2.5, 2.0, Interpolation::Linear);
        assert_eq!(out, vec![0.0, 0.0, 1.0, 3.0, 5.0, 3.0, 0.0, 0.0]);
        // sampling back at the delayed positions recovers the source
        for (i, s) in src.iter().enumerate() {
            let mut o = vec![0.0; 8];
            add_delayed(&mut o, &src, 2.0, 1.0, Interpolation::Linear);
            assert_eq!(sample_at(&o, i as f64 + 2.0, Interpolation::Linear), *s);
        }
    }

    #[test]
    fn sinc_delay_tracks_band_limited_tone() {
        let fs = 450e3;
        let f = 40e3;
        let src: Vec<f64> = (0..400).map(|i| (2.0 * PI * f * i as f64 / fs).sin()).collect();
        let mut out = vec![0.0; 500];
        let delay = 37.3;
        add_delayed(&mut out, &src, delay, 1.0, Interpolation::Sinc { half_width: 16 });
        for n in 100..400 {
            let expect = (2.0 * PI * f * (n as f64 - delay) / fs).sin();
            assert!((out[n] - expect).abs() < 2e-3, "n={n}");
        }
    }

    proptest! {
        #[test]
        fn matched_filter_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 1500 + (seed as usize % 4000);
            let x1: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let x2: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let c = default_chirp(seed % 2 == 0);
            let fs = c.sample_rate();
            let mix: Vec<f64> = x1.iter().zip(&x2).map(|(p, q)| a * p + b * q).collect();
            let y1 = matched_filter(&Waveform::new(x1, fs).unwrap(), &c).unwrap();
            let y2 = matched_filter(&Waveform::new(x2, fs).unwrap(), &c).unwrap();
            let ym = matched_filter(&Waveform::new(mix, fs).unwrap(), &c).unwrap();
            let scale = ym.peak().max(1e-12);
            for i in 0..ym.len() {
                let lin = a * y1.samples()[i] + b * y2.samples()[i];
                prop_assert!((ym.samples()[i] - lin).abs() <= 1e-9 * scale);
            }
        }

        #[test]
        fn chirp_peak_equals_amplitude(
            f0 in 5e3f64..200e3, f1 in 5e3f64..200e3, dur in 2e-4f64..5e-3, amp in 0.01f64..10.0,
            taper in proptest::option::of(0.05f64..1.0),
        ) {
            prop_assume!((f0 - f1).abs() > 1.0);
            let spec = ChirpSpec { f_start: f0, f_end: f1, duration: dur, sample_rate: 450e3, amplitude: amp, taper };
            let w = make_chirp(&spec).unwrap();
            prop_assert!((w.peak() - amp).abs() <= 1e-6 * amp);
        }
    }
}
