//! Echo windowing, ERB-spaced gammatone filterbank and cochleogram rasters.

use rustfft::num_complex::Complex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::beamform::{das_beamform_window, BeamformError};
use crate::geometry::{ArrayGeometry, DEFAULT_SPEED_OF_SOUND};
use crate::imaging::{raster_to_pgm, EchoDetection};
use crate::signals::Waveform;

pub const NUM_BANDS: usize = 40;
pub const NUM_FRAMES: usize = 106;
pub const BANK_F_LO: f64 = 20_000.0;
pub const BANK_F_HI: f64 = 110_000.0;
pub const GAMMATONE_ORDER: u32 = 4;

#[derive(Debug, Error)]
pub enum CochleoError {
    #[error("invalid parameter `{field}`: {reason}")]
    Parameter { field: &'static str, reason: String },
    #[error("signal sampled at {signal} Hz, filterbank designed for {bank} Hz")]
    SampleRateMismatch { signal: f64, bank: f64 },
    #[error("raster has {got} values, expected {bands}×{frames}")]
    Shape { bands: usize, frames: usize, got: usize },
    #[error(transparent)]
    Beamform(#[from] BeamformError),
}

fn param(field: &'static str, reason: impl Into<String>) -> CochleoError {
    CochleoError::Parameter {
        field,
        reason: reason.into(),
    }
}

/// Glasberg–Moore ERB-rate, in Cams.
pub fn erb_rate(f: f64) -> f64 {
    21.4 * (4.37 * f / 1000.0 + 1.0).log10()
}

pub fn erb_rate_inverse(e: f64) -> f64 {
    (10f64.powf(e / 21.4) - 1.0) * 1000.0 / 4.37
}

/// Equivalent rectangular bandwidth at `f`, Hz.
pub fn erb_bandwidth(f: f64) -> f64 {
    24.7 * (4.37 * f / 1000.0 + 1.0)
}

/// `n` center frequencies equally spaced in ERB-rate from `f_lo` to `f_hi`.
pub fn erb_spaced_centers(f_lo: f64, f_hi: f64, n: usize) -> Result<Vec<f64>, CochleoError> {
    if !(f_lo > 0.0 && f_lo < f_hi && f_hi.is_finite()) {
        return Err(param("f_lo/f_hi", format!("need 0 < f_lo < f_hi, got {f_lo}, {f_hi}")));
    }
    if n < 2 {
        return Err(param("n", "need at least 2 bands"));
    }
    let (lo, hi) = (erb_rate(f_lo), erb_rate(f_hi));
    let mut centers: Vec<f64> = (0..n)
        .map(|i| erb_rate_inverse(lo + (hi - lo) * i as f64 / (n - 1) as f64))
        .collect();
    centers[0] = f_lo;
    centers[n - 1] = f_hi;
    Ok(centers)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammatoneBank {
    center_freqs: Vec<f64>,
    bandwidths: Vec<f64>,
    order: u32,
    sample_rate: f64,
}

impl GammatoneBank {
    pub fn new(f_lo: f64, f_hi: f64, n: usize, sample_rate: f64) -> Result<Self, CochleoError> {
        if !(sample_rate > 2.0 * f_hi) {
            return Err(param("sample_rate", format!("{sample_rate} Hz cannot carry {f_hi} Hz")));
        }
        let center_freqs = erb_spaced_centers(f_lo, f_hi, n)?;
        let bandwidths = center_freqs.iter().map(|f| erb_bandwidth(*f)).collect();
        Ok(Self {
            center_freqs,
            bandwidths,
            order: GAMMATONE_ORDER,
            sample_rate,
        })
    }

    /// 40 bands from 20 to 110 kHz.
    pub fn standard(sample_rate: f64) -> Result<Self, CochleoError> {
        Self::new(BANK_F_LO, BANK_F_HI, NUM_BANDS, sample_rate)
    }

    pub fn center_freqs(&self) -> &[f64] {
        &self.center_freqs
    }

    pub fn bandwidths(&self) -> &[f64] {
        &self.bandwidths
    }

    pub fn order(&self) -> u32 {
        self.order
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.center_freqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.center_freqs.is_empty()
    }

    /// Complex pole `p = e^{−2π·1.019·b/fs}·e^{jω_c}` of band `k`.
    pub fn pole(&self, k: usize) -> Complex<f64> {
        let r = (-2.0 * std::f64::consts::PI * 1.019 * self.bandwidths[k] / self.sample_rate).exp();
        let w = 2.0 * std::f64::consts::PI * self.center_freqs[k] / self.sample_rate;
        Complex::from_polar(r, w)
    }

    /// Output scale giving unit gain at the band center.
    pub fn center_gain(&self, k: usize) -> f64 {
        let r = self.pole(k).norm();
        // Σ n³ rⁿ = r(1 + 4r + r²)/(1 − r)⁴
        2.0 * (1.0 - r).powi(4) / (r * (1.0 + 4.0 * r + r * r))
    }
}

/// One band: impulse response `g·Re(n³pⁿ)`, a sampled 4th-order gammatone.
///
/// `Σ n³pⁿz⁻ⁿ = (p z⁻¹ + 4p² z⁻² + p³ z⁻³)/(1 − p z⁻¹)⁴`, run as a 3-tap
/// numerator followed by four cascaded complex one-pole sections.
fn gammatone_band(x: &[f64], p: Complex<f64>, gain: f64) -> Vec<f64> {
    let (b1, b2, b3) = (p, 4.0 * p * p, p * p * p);
    let (mut x1, mut x2, mut x3) = (0.0, 0.0, 0.0);
    let mut s = [Complex::new(0.0, 0.0); 4];
    x.iter()
        .map(|&xn| {
            let mut v = b1 * x1 + b2 * x2 + b3 * x3;
            x3 = x2;
            x2 = x1;
            x1 = xn;
            for st in s.iter_mut() {
                *st = v + p * *st;
                v = *st;
            }
            gain * v.re
        })
        .collect()
}

/// Band signals, one per filter, same length as `x`.
pub fn gammatone_filter(x: &Waveform, bank: &GammatoneBank) -> Result<Vec<Waveform>, CochleoError> {
    if x.sample_rate() != bank.sample_rate {
        return Err(CochleoError::SampleRateMismatch {
            signal: x.sample_rate(),
            bank: bank.sample_rate,
        });
    }
    (0..bank.len())
        .map(|k| {
            let y = gammatone_band(x.samples(), bank.pole(k), bank.center_gain(k));
            Waveform::new(y, bank.sample_rate).map_err(|e| param("x", e.to_string()))
        })
        .collect()
}

/// Sum of squares over consecutive non-overlapping frames; a trailing
/// partial frame is dropped.
pub fn frame_energies(x: &[f64], frame: usize) -> Vec<f64> {
    x.chunks_exact(frame.max(1))
        .map(|c| c.iter().map(|v| v * v).sum())
        .collect()
}

/// Scales so the maximum is 1; an all-zero raster stays zero.
pub fn normalize_max(values: &mut [f64]) {
    let max = values.iter().fold(0.0, |m: f64, v| m.max(*v));
    if max > 0.0 {
        values.iter_mut().for_each(|v| *v /= max);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CochleoParams {
    /// Echo window, samples.
    pub window: usize,
    /// Frame length and hop, samples.
    pub frame: usize,
    /// Window start ahead of the echo's two-way time, seconds.
    pub lead: f64,
    pub epsilon: f64,
    pub c_sound: f64,
}

impl Default for CochleoParams {
    fn default() -> Self {
        Self {
            window: 5300,
            frame: 50,
            lead: 0.5e-3,
            epsilon: 1e-6,
            c_sound: DEFAULT_SPEED_OF_SOUND,
        }
    }
}

impl CochleoParams {
    pub fn frames(&self) -> usize {
        self.window / self.frame.max(1)
    }

    pub fn validate(&self) -> Result<(), CochleoError> {
        if self.frame == 0 || self.window == 0 || !self.window.is_multiple_of(self.frame) {
            return Err(param("window/frame", "window must be a positive multiple of frame"));
        }
        if !(self.epsilon > 0.0) {
            return Err(param("epsilon", "must be positive"));
        }
        if !(self.lead >= 0.0) {
            return Err(param("lead", "must be ≥ 0"));
        }
        Ok(())
    }
}

/// Band × frame raster, rows low → high frequency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cochleogram {
    values: Vec<f64>,
    bands: usize,
    frames: usize,
    pub source: Option<EchoDetection>,
    pub scene_id: Option<u64>,
    /// The echo window ran past the recording and was zero-padded.
    pub zero_padded: bool,
}

impl Cochleogram {
    pub fn new(values: Vec<f64>, bands: usize, frames: usize) -> Result<Self, CochleoError> {
        if values.len() != bands * frames {
            return Err(CochleoError::Shape {
                bands,
                frames,
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(param("values", "must be finite and non-negative"));
        }
        Ok(Self {
            values,
            bands,
            frames,
            source: None,
            scene_id: None,
            zero_padded: false,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn get(&self, band: usize, frame: usize) -> f64 {
        self.values[band * self.frames + frame]
    }

    /// Per-band sum over `frames`.
    pub fn band_profile(&self, frames: std::ops::Range<usize>) -> Vec<f64> {
        (0..self.bands)
            .map(|b| frames.clone().map(|f| self.get(b, f)).sum())
            .collect()
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        raster_to_pgm(&self.values, self.bands, self.frames)
    }
}

/// Log-compressed, max-normalized frame energies of an already windowed
/// echo signal.
pub fn cochleogram_from_window(
    window: &Waveform,
    bank: &GammatoneBank,
    params: &CochleoParams,
) -> Result<Cochleogram, CochleoError> {
    params.validate()?;
    let bands = gammatone_filter(window, bank)?;
    let frames = params.frames();
    let mut values = Vec::with_capacity(bank.len() * frames);
    for band in &bands {
        let mut e = frame_energies(band.samples(), params.frame);
        e.resize(frames, 0.0);
        values.extend(e.iter().map(|v| (1.0 + v / params.epsilon).log10()));
    }
    normalize_max(&mut values);
    Cochleogram::new(values, bank.len(), frames)
}

/// Re-steers the raw channels toward the detection, windows the echo and
/// builds its cochleogram.
pub fn make_cochleogram(
    channels: &[Waveform],
    g: &ArrayGeometry,
    det: &EchoDetection,
    bank: &GammatoneBank,
    params: &CochleoParams,
) -> Result<Cochleogram, CochleoError> {
    params.validate()?;
    if !(det.range_r.is_finite() && det.range_r >= 0.0 && det.azimuth_theta.abs() <= 90.0) {
        return Err(param("det", format!("detection ({}, {}) out of bounds", det.range_r, det.azimuth_theta)));
    }
    let fs = bank.sample_rate;
    let record_len = channels.first().map(Waveform::len).unwrap_or(0);
    let echo = (2.0 * det.range_r / params.c_sound * fs).round() as isize;
    let start = echo - (params.lead * fs).round() as isize;
    let zero_padded = start < 0 || start + params.window as isize > record_len as isize;
    let window = das_beamform_window(channels, g, det.azimuth_theta, 0.0, params.c_sound, start, params.window)?;
    let mut c = cochleogram_from_window(&window, bank, params)?;
    c.source = Some(*det);
    c.zero_padded = zero_padded;
    Ok(c)
}
