//! Envelope detection, image smoothing and weighted-centroid echo detection.

use std::f64::consts::{PI, SQRT_2};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::signals::{SignalError, Waveform};

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("invalid parameter `{field}`: {reason}")]
    Parameter { field: &'static str, reason: String },
    #[error("image raster has {got} values, expected {expected}")]
    Shape { expected: usize, got: usize },
    #[error(transparent)]
    Signal(#[from] SignalError),
}

fn param(field: &'static str, reason: impl Into<String>) -> ImagingError {
    ImagingError::Parameter {
        field,
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeParams {
    /// Low-pass cutoff applied to the magnitude envelope, Hz.
    pub cutoff: f64,
    /// Rate of the decimated envelope, Hz.
    pub output_rate: f64,
    /// Length of the Hilbert quadrature FIR (odd).
    pub hilbert_taps: usize,
}

impl Default for EnvelopeParams {
    fn default() -> Self {
        Self {
            cutoff: 1_000.0,
            output_rate: 10_000.0,
            hilbert_taps: 255,
        }
    }
}

impl EnvelopeParams {
    pub fn validate(&self, sample_rate: f64) -> Result<(), ImagingError> {
        if !(self.cutoff > 0.0 && self.cutoff < sample_rate / 2.0) {
            return Err(param("cutoff", format!("{} Hz outside (0, fs/2)", self.cutoff)));
        }
        if !(self.output_rate > 0.0 && self.output_rate <= sample_rate) {
            return Err(param("output_rate", "must be in (0, fs]"));
        }
        if self.hilbert_taps.is_multiple_of(2) || self.hilbert_taps < 3 {
            return Err(param("hilbert_taps", "must be odd and ≥ 3"));
        }
        Ok(())
    }

    /// Integer decimation from `sample_rate` to (about) `output_rate`.
    pub fn decimation(&self, sample_rate: f64) -> usize {
        ((sample_rate / self.output_rate).round() as usize).max(1)
    }
}

/// Blackman-windowed ideal Hilbert transformer, centered on tap `taps/2`.
pub fn hilbert_fir(taps: usize) -> Vec<f64> {
    let half = (taps / 2) as isize;
    (-half..=half)
        .map(|k| {
            if k % 2 == 0 {
                return 0.0;
            }
            let ideal = 2.0 / (PI * k as f64);
            let x = (k + half) as f64 / (taps - 1) as f64;
            let w = 0.42 - 0.5 * (2.0 * PI * x).cos() + 0.08 * (4.0 * PI * x).cos();
            ideal * w
        })
        .collect()
}

/// Direct-form-II-transposed second-order section.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    /// Butterworth low-pass via the bilinear transform with pre-warping.
    pub fn butterworth_lowpass(cutoff: f64, sample_rate: f64) -> Self {
        let k = (PI * cutoff / sample_rate).tan();
        let norm = 1.0 / (1.0 + SQRT_2 * k + k * k);
        let b0 = k * k * norm;
        Self {
            b: [b0, 2.0 * b0, b0],
            a: [2.0 * (k * k - 1.0) * norm, (1.0 - SQRT_2 * k + k * k) * norm],
        }
    }

    /// Magnitude response at `f` Hz.
    pub fn gain_at(&self, f: f64, sample_rate: f64) -> f64 {
        let w = 2.0 * PI * f / sample_rate;
        let z1 = (-w).sin_cos();
        let z1 = (z1.1, z1.0);
        let z2 = ((-2.0 * w).cos(), (-2.0 * w).sin());
        let num = (
            self.b[0] + self.b[1] * z1.0 + self.b[2] * z2.0,
            self.b[1] * z1.1 + self.b[2] * z2.1,
        );
        let den = (1.0 + self.a[0] * z1.0 + self.a[1] * z2.0, self.a[0] * z1.1 + self.a[1] * z2.1);
        (num.0.hypot(num.1)) / (den.0.hypot(den.1))
    }

    /// Filter state reached by a constant unit input.
    fn steady_state(&self) -> [f64; 2] {
        let dc = (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1]);
        let z2 = self.b[2] - self.a[1] * dc;
        [dc - self.b[0], z2]
    }

    fn run(&self, x: &mut [f64], init: [f64; 2]) {
        let [b0, b1, b2] = self.b;
        let [a1, a2] = self.a;
        let (mut z1, mut z2) = (init[0], init[1]);
        for v in x.iter_mut() {
            let xin = *v;
            let y = b0 * xin + z1;
            z1 = b1 * xin - a1 * y + z2;
            z2 = b2 * xin - a2 * y;
            *v = y;
        }
    }

    /// Zero-phase forward/backward filtering with odd-extension padding.
    pub fn filtfilt(&self, x: &[f64], pad: usize) -> Vec<f64> {
        let n = x.len();
        if n == 0 {
            return Vec::new();
        }
        let pad = pad.min(n - 1);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));
        let zi = self.steady_state();
        let first = ext[0];
        self.run(&mut ext, [zi[0] * first, zi[1] * first]);
        ext.reverse();
        let first = ext[0];
        self.run(&mut ext, [zi[0] * first, zi[1] * first]);
        ext.reverse();
        ext[pad..pad + n].to_vec()
    }

    /// [`Biquad::filtfilt`] over several equal-length signals, run `LANES`
    /// at a time across SIMD lanes. Each output equals the single-signal
    /// result bit for bit.
    pub fn filtfilt_many(&self, xs: &[Vec<f64>], pad: usize) -> Vec<Vec<f64>> {
        const LANES: usize = 8;
        let n = xs.first().map(Vec::len).unwrap_or(0);
        if n == 0 || xs.iter().any(|x| x.len() != n) {
            return xs.iter().map(|x| self.filtfilt(x, pad)).collect();
        }
        let pad = pad.min(n - 1);
        let len = n + 2 * pad;
        let [b0, b1, b2] = self.b;
        let [a1, a2] = self.a;
        let zi = self.steady_state();
        let mut out = Vec::with_capacity(xs.len());
        let mut ext = vec![[0.0f64; LANES]; len];
        for group in xs.chunks(LANES) {
            for (l, x) in group.iter().enumerate() {
                for i in 0..pad {
                    ext[i][l] = 2.0 * x[0] - x[pad - i];
                    ext[pad + n + i][l] = 2.0 * x[n - 1] - x[n - 2 - i];
                }
                for (e, &v) in ext[pad..pad + n].iter_mut().zip(x) {
                    e[l] = v;
                }
            }
            let step = |v: &mut [f64; LANES], z1: &mut [f64; LANES], z2: &mut [f64; LANES]| {
                for l in 0..LANES {
                    let xin = v[l];
                    let y = b0 * xin + z1[l];
                    z1[l] = b1 * xin - a1 * y + z2[l];
                    z2[l] = b2 * xin - a2 * y;
                    v[l] = y;
                }
            };
            let init = |first: [f64; LANES]| -> ([f64; LANES], [f64; LANES]) {
                (
                    std::array::from_fn(|l| zi[0] * first[l]),
                    std::array::from_fn(|l| zi[1] * first[l]),
                )
            };
            let (mut z1, mut z2) = init(ext[0]);
            ext.iter_mut().for_each(|v| step(v, &mut z1, &mut z2));
            let (mut z1, mut z2) = init(ext[len - 1]);
            ext.iter_mut().rev().for_each(|v| step(v, &mut z1, &mut z2));
            for l in 0..group.len() {
                out.push(ext[pad..pad + n].iter().map(|e| e[l]).collect());
            }
        }
        out
    }
}

/// Padding used by the envelope low-pass: three cutoff periods.
pub fn lowpass_padding(cutoff: f64, sample_rate: f64) -> usize {
    (3.0 * sample_rate / cutoff).ceil() as usize
}

/// Magnitude of the analytic signal (Hilbert FIR quadrature), smoothed by a
/// zero-phase 2nd-order low-pass at `params.cutoff` and decimated to
/// `params.output_rate`.
pub fn envelope(x: &Waveform, params: &EnvelopeParams) -> Result<Waveform, ImagingError> {
    let fs = x.sample_rate();
    params.validate(fs)?;
    let h = hilbert_fir(params.hilbert_taps);
    let half = h.len() / 2;
    let s = x.samples();
    let n = s.len();
    let magnitude: Vec<f64> = (0..n)
        .map(|i| {
            let mut q = 0.0;
            for (k, &hk) in h.iter().enumerate() {
                if hk == 0.0 {
                    continue;
                }
                // centered FIR: q[i] = Σ h[k]·x[i − (k − half)]
                let j = i as isize - (k as isize - half as isize);
                if j >= 0 && (j as usize) < n {
                    q += hk * s[j as usize];
                }
            }
            s[i].hypot(q)
        })
        .collect();
    let lp = Biquad::butterworth_lowpass(params.cutoff, fs);
    let smooth = lp.filtfilt(&magnitude, lowpass_padding(params.cutoff, fs));
    let d = params.decimation(fs);
    let out: Vec<f64> = smooth.iter().step_by(d).map(|v| v.max(0.0)).collect();
    Ok(Waveform::new(out, fs / d as f64)?)
}

/// Range × azimuth intensity raster (row-major, row = range bin).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcousticImage {
    intensities: Vec<f64>,
    range_bins: usize,
    azimuths: Vec<f64>,
    range_bin_size: f64,
    sample_rate_env: f64,
    elevation: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageMetadata {
    pub range_bins: usize,
    pub azimuth_bins: Vec<f64>,
    pub range_bin_size: f64,
    pub sample_rate_env: f64,
    pub elevation: f64,
}

impl AcousticImage {
    pub fn new(
        intensities: Vec<f64>,
        range_bins: usize,
        azimuths: Vec<f64>,
        range_bin_size: f64,
        sample_rate_env: f64,
    ) -> Result<Self, ImagingError> {
        let expected = range_bins * azimuths.len();
        if intensities.len() != expected {
            return Err(ImagingError::Shape {
                expected,
                got: intensities.len(),
            });
        }
        if !(range_bin_size > 0.0) {
            return Err(param("range_bin_size", "must be positive"));
        }
        if intensities.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(param("intensities", "must be finite and non-negative"));
        }
        Ok(Self {
            intensities,
            range_bins,
            azimuths,
            range_bin_size,
            sample_rate_env,
            elevation: 0.0,
        })
    }

    /// Builds an image from per-azimuth envelope columns.
    pub fn from_columns(
        columns: &[Vec<f64>],
        azimuths: Vec<f64>,
        range_bin_size: f64,
        sample_rate_env: f64,
    ) -> Result<Self, ImagingError> {
        let rows = columns.iter().map(Vec::len).min().unwrap_or(0);
        let cols = columns.len();
        let mut data = vec![0.0; rows * cols];
        for (c, col) in columns.iter().enumerate() {
            for r in 0..rows {
                data[r * cols + c] = col[r];
            }
        }
        Self::new(data, rows, azimuths, range_bin_size, sample_rate_env)
    }

    pub fn range_bins(&self) -> usize {
        self.range_bins
    }

    pub fn azimuth_bins(&self) -> usize {
        self.azimuths.len()
    }

    pub fn azimuths(&self) -> &[f64] {
        &self.azimuths
    }

    pub fn range_bin_size(&self) -> f64 {
        self.range_bin_size
    }

    pub fn sample_rate_env(&self) -> f64 {
        self.sample_rate_env
    }

    pub fn intensities(&self) -> &[f64] {
        &self.intensities
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.intensities[row * self.azimuths.len() + col]
    }

    pub fn max(&self) -> f64 {
        self.intensities.iter().fold(0.0, |m: f64, v| m.max(*v))
    }

    /// Peak `(row, col)` of the raster.
    pub fn argmax(&self) -> (usize, usize) {
        let (i, _) = self
            .intensities
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
        (i / self.azimuths.len(), i % self.azimuths.len())
    }

    pub fn range_of_row(&self, row: f64) -> f64 {
        row * self.range_bin_size
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.range_bins).map(|r| self.get(r, col)).collect()
    }

    fn with_intensities(&self, intensities: Vec<f64>) -> Self {
        Self {
            intensities,
            ..self.clone()
        }
    }

    pub fn metadata(&self) -> ImageMetadata {
        ImageMetadata {
            range_bins: self.range_bins,
            azimuth_bins: self.azimuths.clone(),
            range_bin_size: self.range_bin_size,
            sample_rate_env: self.sample_rate_env,
            elevation: self.elevation,
        }
    }

    /// 8-bit binary PGM, max-normalized; rows are range bins.
    pub fn to_pgm(&self) -> Vec<u8> {
        raster_to_pgm(&self.intensities, self.range_bins, self.azimuths.len())
    }
}

/// Max-normalized 8-bit binary PGM of a row-major raster.
pub fn raster_to_pgm<T: Copy + Into<f64>>(values: &[T], rows: usize, cols: usize) -> Vec<u8> {
    let max = values.iter().fold(0.0_f64, |m, v| m.max((*v).into()));
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend(values.iter().map(|v| {
        if max > 0.0 {
            ((*v).into() / max * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    out
}

/// Half-sample symmetric reflection of an out-of-range index.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

/// `median_k × median_k` median filter followed by a Gaussian blur of
/// `gauss_sigma` bins (truncated at 3σ), both with reflected edges.
pub fn smooth_image(
    img: &AcousticImage,
    median_k: usize,
    gauss_sigma: f64,
) -> Result<AcousticImage, ImagingError> {
    if median_k == 0 || median_k.is_multiple_of(2) {
        return Err(param("median_k", "must be odd and ≥ 1"));
    }
    if !(gauss_sigma >= 0.0) {
        return Err(param("gauss_sigma", "must be ≥ 0"));
    }
    let (rows, cols) = (img.range_bins, img.azimuths.len());
    if rows == 0 || cols == 0 {
        return Ok(img.clone());
    }
    let med = median_filter(&img.intensities, rows, cols, median_k);
    let blurred = if gauss_sigma > 0.0 {
        gaussian_blur(&med, rows, cols, gauss_sigma)
    } else {
        med
    };
    Ok(img.with_intensities(blurred))
}

/// Median of nine via the 19-exchange selection network.
fn median9(mut p: [f64; 9]) -> f64 {
    const NET: [(usize, usize); 19] = [
        (1, 2), (4, 5), (7, 8), (0, 1), (3, 4), (6, 7), (1, 2), (4, 5), (7, 8), (0, 3),
        (5, 8), (4, 7), (3, 6), (1, 4), (2, 5), (4, 7), (4, 2), (6, 4), (4, 2),
    ];
    for (a, b) in NET {
        let (lo, hi) = (p[a].min(p[b]), p[a].max(p[b]));
        p[a] = lo;
        p[b] = hi;
    }
    p[4]
}

fn median_filter(x: &[f64], rows: usize, cols: usize, k: usize) -> Vec<f64> {
    if k == 1 {
        return x.to_vec();
    }
    if k == 3 {
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let rr = [reflect(r as isize - 1, rows), r, reflect(r as isize + 1, rows)];
            for c in 0..cols {
                let cc = [reflect(c as isize - 1, cols), c, reflect(c as isize + 1, cols)];
                out[r * cols + c] = median9(std::array::from_fn(|i| x[rr[i / 3] * cols + cc[i % 3]]));
            }
        }
        return out;
    }
    let h = (k / 2) as isize;
    let mut window = Vec::with_capacity(k * k);
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            window.clear();
            for dr in -h..=h {
                let rr = reflect(r as isize + dr, rows);
                for dc in -h..=h {
                    window.push(x[rr * cols + reflect(c as isize + dc, cols)]);
                }
            }
            let mid = window.len() / 2;
            let (_, m, _) = window.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
            out[r * cols + c] = *m;
        }
    }
    out
}

/// Normalized Gaussian taps, radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

fn gaussian_blur(x: &[f64], rows: usize, cols: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let radius = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            tmp[r * cols + c] = k
                .iter()
                .enumerate()
                .map(|(i, w)| w * x[r * cols + reflect(c as isize + i as isize - radius, cols)])
                .sum();
        }
    }
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[r * cols + c] = k
                .iter()
                .enumerate()
                .map(|(i, w)| w * tmp[reflect(r as isize + i as isize - radius, rows) * cols + c])
                .sum();
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Connectivity {
    Four,
    #[default]
    Eight,
}

/// Thresholded connected component with its intensity-weighted centroid.
#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub row: f64,
    pub col: f64,
    pub peak: f64,
    pub pixels: usize,
    weight: f64,
    members: Vec<(usize, usize)>,
}

impl Blob {
    pub fn members(&self) -> &[(usize, usize)] {
        &self.members
    }

    pub fn total_weight(&self) -> f64 {
        self.weight
    }
}

/// Labels pixels `≥ threshold` into connected components (stable row-major
/// discovery order) and returns their weighted centroids in pixel units.
pub fn label_components(
    values: &[f64],
    rows: usize,
    cols: usize,
    threshold: f64,
    connectivity: Connectivity,
) -> Vec<Blob> {
    let mut label = vec![usize::MAX; values.len()];
    let mut blobs = Vec::new();
    let mut stack = Vec::new();
    let neighbours: &[(isize, isize)] = match connectivity {
        Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
        Connectivity::Eight => &[
            (-1, -1),
            (-1, 0),
            (-1, 1),
            (0, -1),
            (0, 1),
            (1, -1),
            (1, 0),
            (1, 1),
        ],
    };
    for start in 0..values.len() {
        if label[start] != usize::MAX || values[start] < threshold {
            continue;
        }
        let id = blobs.len();
        label[start] = id;
        stack.push(start);
        let mut members = Vec::new();
        let (mut sw, mut sr, mut sc, mut peak) = (0.0, 0.0, 0.0, f64::MIN);
        while let Some(p) = stack.pop() {
            let (r, c) = (p / cols, p % cols);
            let w = values[p];
            sw += w;
            sr += w * r as f64;
            sc += w * c as f64;
            peak = peak.max(w);
            members.push((r, c));
            for (dr, dc) in neighbours {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr < 0 || nc < 0 || nr >= rows as isize || nc >= cols as isize {
                    continue;
                }
                let q = nr as usize * cols + nc as usize;
                if label[q] == usize::MAX && values[q] >= threshold {
                    label[q] = id;
                    stack.push(q);
                }
            }
        }
        members.sort_unstable();
        blobs.push(Blob {
            row: sr / sw,
            col: sc / sw,
            peak,
            pixels: members.len(),
            weight: sw,
            members,
        });
    }
    blobs
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionParams {
    pub threshold_frac: f64,
    pub max_detections: usize,
    pub connectivity: Connectivity,
}

impl Default for DetectionParams {
    fn default() -> Self {
        Self {
            threshold_frac: 0.25,
            max_detections: 10,
            connectivity: Connectivity::Eight,
        }
    }
}

/// One located echo `(r_i, θ_i)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EchoDetection {
    pub range_r: f64,
    pub azimuth_theta: f64,
    pub strength: f64,
    /// Weighted centroid in pixel units.
    pub row: f64,
    pub col: f64,
}

/// Relative threshold, connected components, intensity-weighted centroids;
/// strongest first, at most `max_detections`.
pub fn detect_echoes(
    img: &AcousticImage,
    params: &DetectionParams,
) -> Result<Vec<EchoDetection>, ImagingError> {
    if !(params.threshold_frac > 0.0 && params.threshold_frac < 1.0) {
        return Err(param("threshold_frac", "must be in (0, 1)"));
    }
    let max = img.max();
    if max <= 0.0 {
        return Ok(Vec::new());
    }
    let cols = img.azimuths.len();
    let blobs = label_components(
        &img.intensities,
        img.range_bins,
        cols,
        params.threshold_frac * max,
        params.connectivity,
    );
    let mut dets: Vec<EchoDetection> = blobs
        .iter()
        .map(|b| {
            let theta = b
                .members
                .iter()
                .map(|&(r, c)| img.get(r, c) * img.azimuths[c])
                .sum::<f64>()
                / b.weight;
            EchoDetection {
                range_r: img.range_of_row(b.row),
                azimuth_theta: theta,
                strength: b.peak,
                row: b.row,
                col: b.col,
            }
        })
        .collect();
    dets.sort_by(|a, b| b.strength.total_cmp(&a.strength));
    dets.truncate(params.max_detections);
    Ok(dets)
}

/// `index,range_m,azimuth_deg,strength` CSV.
pub fn detections_csv(dets: &[EchoDetection]) -> String {
    let mut s = String::from("index,range_m,azimuth_deg,strength\n");
    for (i, d) in dets.iter().enumerate() {
        let _ = writeln!(s, "{i},{:.6},{:.4},{:.6e}", d.range_r, d.azimuth_theta, d.strength);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn image(rows: usize, cols: usize, data: Vec<f64>) -> AcousticImage {
        let az: Vec<f64> = (0..cols).map(|c| c as f64 - (cols / 2) as f64).collect();
        AcousticImage::new(data, rows, az, 0.01715, 10_000.0).unwrap()
    }

    #[test]
    fn median9_matches_selection() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..2000 {
            let p: [f64; 9] = std::array::from_fn(|_| (rng.random_range(0..6) as f64) * 0.5);
            let mut v = p.to_vec();
            v.sort_by(f64::total_cmp);
            assert_eq!(median9(p), v[4], "{p:?}");
        }
    }

    #[test]
    fn filtfilt_many_is_bitwise_single() {
        let lp = Biquad::butterworth_lowpass(1000.0, 150e3);
        let xs: Vec<Vec<f64>> = (0..11)
            .map(|k| (0..700).map(|i| ((i * (k + 3)) as f64 * 0.01).sin().abs()).collect())
            .collect();
        let many = lp.filtfilt_many(&xs, 450);
        for (x, m) in xs.iter().zip(&many) {
            let one = lp.filtfilt(x, 450);
            assert_eq!(one.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), m.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn tone_has_unit_envelope() {
        let fs = 450e3;
        let x: Vec<f64> = (0..20_000)
            .map(|i| (2.0 * PI * 50e3 * i as f64 / fs).sin())
            .collect();
        let env = envelope(&Waveform::new(x, fs).unwrap(), &EnvelopeParams::default()).unwrap();
        assert_eq!(env.sample_rate(), 10_000.0);
        let n = env.len();
        let edge = n / 20;
        for v in &env.samples()[edge..n - edge] {
            assert!((v - 1.0).abs() <= 0.05, "{v}");
        }
    }

    #[test]
    fn compressed_echo_envelope_is_single_non_negative_lobe() {
        use crate::signals::{make_chirp, matched_filter, ChirpSpec};
        let c = make_chirp(&ChirpSpec::default()).unwrap();
        let mut x = vec![0.0; 12_000];
        for (i, s) in c.samples().iter().enumerate() {
            x[4000 + i] = *s;
        }
        let mf = matched_filter(&Waveform::new(x, c.sample_rate()).unwrap(), &c).unwrap();
        let env = envelope(&mf, &EnvelopeParams::default()).unwrap();
        let e = env.samples();
        assert!(e.iter().all(|v| *v >= 0.0));
        let peak = e.iter().cloned().fold(0.0, f64::max);
        let above: Vec<usize> = (0..e.len()).filter(|&i| e[i] > 0.5 * peak).collect();
        // one contiguous lobe around 4000/45 ≈ 88.9
        assert!(above.windows(2).all(|w| w[1] == w[0] + 1));
        let argmax = (0..e.len()).max_by(|&a, &b| e[a].total_cmp(&e[b])).unwrap();
        assert!(argmax.abs_diff(89) <= 1);
    }

    /// Amplitude of `f` Hz in `x` by projection on sine/cosine.
    fn tone_amplitude(x: &[f64], f: f64, fs: f64) -> f64 {
        let (mut c, mut s) = (0.0, 0.0);
        for (i, v) in x.iter().enumerate() {
            let ph = 2.0 * PI * f * i as f64 / fs;
            c += v * ph.cos();
            s += v * ph.sin();
        }
        2.0 * c.hypot(s) / x.len() as f64
    }

    #[test]
    fn envelope_passes_slow_ripple_rejects_fast() {
        // carrier 50 kHz with a 300 Hz and a 4 kHz amplitude modulation
        let fs = 450e3;
        let n = 90_000;
        let x: Vec<f64> = (0..n)
            .map(|i| {
                let t = i as f64 / fs;
                let am = 1.0 + 0.3 * (2.0 * PI * 300.0 * t).cos() + 0.3 * (2.0 * PI * 4000.0 * t).cos();
                am * (2.0 * PI * 50e3 * t).sin()
            })
            .collect();
        let env = envelope(&Waveform::new(x, fs).unwrap(), &EnvelopeParams::default()).unwrap();
        let e = env.samples();
        let core = &e[e.len() / 10..e.len() * 9 / 10];
        let slow = tone_amplitude(core, 300.0, env.sample_rate());
        let fast = tone_amplitude(core, 4000.0, env.sample_rate());
        // zero-phase 2nd-order Butterworth: |H|² = 1/(1 + (f/fc)^4)
        let expect_fast = 0.3 / (1.0 + 4.0f64.powi(4));
        assert!((slow - 0.3).abs() < 0.01, "slow {slow}");
        assert!(20.0 * (fast / 0.3).log10() <= -20.0, "fast {fast}");
        assert!((fast - expect_fast).abs() < 0.004, "fast {fast} vs {expect_fast}");
    }

    #[test]
    fn biquad_matches_butterworth_magnitude() {
        let lp = Biquad::butterworth_lowpass(1000.0, 450e3);
        assert!((lp.gain_at(0.0, 450e3) - 1.0).abs() < 1e-12);
        assert!((lp.gain_at(1000.0, 450e3) - SQRT_2.recip()).abs() < 1e-9);
        let g = lp.gain_at(5000.0, 450e3);
        assert!((g - 1.0 / (1.0 + 5f64.powi(4)).sqrt()).abs() < 1e-3);
    }

    #[test]
    fn filtfilt_preserves_constants() {
        let lp = Biquad::butterworth_lowpass(1000.0, 150e3);
        let y = lp.filtfilt(&[2.5; 500], 450);
        assert!(y.iter().all(|v| (v - 2.5).abs() < 1e-9));
    }

    #[test]
    fn hilbert_fir_is_antisymmetric() {
        let h = hilbert_fir(255);
        assert_eq!(h.len(), 255);
        for k in 0..255 {
            assert!((h[k] + h[254 - k]).abs() < 1e-15);
        }
        assert_eq!(h[127], 0.0);
    }

    #[test]
    fn constant_image_unchanged_by_smoothing() {
        let img = image(12, 9, vec![3.0; 108]);
        let s = smooth_image(&img, 3, 1.0).unwrap();
        assert!(s.intensities().iter().all(|v| (v - 3.0).abs() < 1e-12));
    }

    #[test]
    fn median_removes_isolated_spike() {
        let mut data = vec![0.0; 100];
        data[5 * 10 + 5] = 1.0;
        let s = smooth_image(&image(10, 10, data), 3, 0.0).unwrap();
        assert!(s.intensities().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gaussian_blur_conserves_impulse_mass() {
        let mut data = vec![0.0; 30 * 30];
        data[15 * 30 + 15] = 1.0;
        let s = smooth_image(&image(30, 30, data), 1, 1.0).unwrap();
        let sum: f64 = s.intensities().iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert!(smooth_image(&image(3, 3, vec![0.0; 9]), 2, 1.0).is_err());
    }

    #[test]
    fn symmetric_blob_centroid() {
        let mut data = vec![0.0; 11 * 11];
        for (dr, dc, v) in [(0, 0, 4.0), (-1, 0, 1.0), (1, 0, 1.0), (0, -1, 1.0), (0, 1, 1.0)] {
            data[((5 + dr) * 11 + (5 + dc)) as usize] = v;
        }
        let img = image(11, 11, data);
        let dets = detect_echoes(&img, &DetectionParams::default()).unwrap();
        assert_eq!(dets.len(), 1);
        assert!((dets[0].row - 5.0).abs() < 1e-12 && (dets[0].col - 5.0).abs() < 1e-12);
        assert!((dets[0].range_r - 5.0 * 0.01715).abs() < 1e-12);
        assert!((dets[0].azimuth_theta - img.azimuths()[5]).abs() < 1e-12);
        assert_eq!(dets[0].strength, 4.0);
    }

    #[test]
    fn two_pixel_weighted_centroid() {
        let mut data = vec![0.0; 4 * 3];
        data[1] = 2.0;
        data[3 + 1] = 6.0;
        let dets = detect_echoes(&image(4, 3, data), &DetectionParams::default()).unwrap();
        assert_eq!(dets.len(), 1);
        assert!((dets[0].row - 0.75).abs() < 1e-12);
    }

    #[test]
    fn separated_blobs_sorted_by_strength() {
        let mut data = vec![0.0; 20 * 20];
        data[3 * 20 + 3] = 2.0;
        data[15 * 20 + 12] = 5.0;
        data[15 * 20 + 13] = 4.0;
        let dets = detect_echoes(&image(20, 20, data), &DetectionParams::default()).unwrap();
        assert_eq!(dets.len(), 2);
        assert_eq!(dets[0].strength, 5.0);
        assert!((dets[0].col - (12.0 * 5.0 + 13.0 * 4.0) / 9.0).abs() < 1e-12);
        assert_eq!(dets[1].strength, 2.0);
    }

    #[test]
    fn zero_image_has_no_detections() {
        let dets = detect_echoes(&image(5, 5, vec![0.0; 25]), &DetectionParams::default()).unwrap();
        assert!(dets.is_empty());
        let bad = DetectionParams {
            threshold_frac: 1.0,
            ..DetectionParams::default()
        };
        assert!(detect_echoes(&image(5, 5, vec![0.0; 25]), &bad).is_err());
    }

    #[test]
    fn diagonal_pixels_join_only_with_eight_connectivity() {
        let mut data = vec![0.0; 9];
        data[0] = 1.0;
        data[4] = 1.0;
        assert_eq!(label_components(&data, 3, 3, 0.5, Connectivity::Eight).len(), 1);
        assert_eq!(label_components(&data, 3, 3, 0.5, Connectivity::Four).len(), 2);
    }

    #[test]
    fn pgm_header_and_scaling() {
        let pgm = image(2, 3, vec![0.0, 1.0, 2.0, 3.0, 4.0, 8.0]).to_pgm();
        let header = b"P5\n3 2\n255\n";
        assert_eq!(&pgm[..header.len()], header);
        assert_eq!(&pgm[header.len()..], &[0, 32, 64, 96, 128, 255]);
    }

    #[test]
    fn csv_layout() {
        let d = EchoDetection {
            range_r: 1.5,
            azimuth_theta: 20.0,
            strength: 0.5,
            row: 0.0,
            col: 0.0,
        };
        let csv = detections_csv(&[d]);
        assert!(csv.starts_with("index,range_m,azimuth_deg,strength\n0,1.500000,20.0000,"));
    }

    fn raster_strategy() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
        (2usize..12, 2usize..12).prop_flat_map(|(r, c)| {
            (
                Just(r),
                Just(c),
                proptest::collection::vec(prop_oneof![Just(0.0), 0.0f64..10.0], r * c),
            )
        })
    }

    proptest! {
        #[test]
        fn centroids_follow_transposition((rows, cols, data) in raster_strategy()) {
            let mut t = vec![0.0; data.len()];
            for r in 0..rows {
                for c in 0..cols {
                    t[c * rows + r] = data[r * cols + c];
                }
            }
            let thr = 2.5;
            let mut a: Vec<(f64, f64)> = label_components(&data, rows, cols, thr, Connectivity::Eight)
                .iter().map(|b| (b.row, b.col)).collect();
            let mut b: Vec<(f64, f64)> = label_components(&t, cols, rows, thr, Connectivity::Eight)
                .iter().map(|b| (b.col, b.row)).collect();
            a.sort_by(|x, y| x.partial_cmp(y).unwrap());
            b.sort_by(|x, y| x.partial_cmp(y).unwrap());
            prop_assert_eq!(a.len(), b.len());
            for (p, q) in a.iter().zip(&b) {
                prop_assert!((p.0 - q.0).abs() < 1e-9 && (p.1 - q.1).abs() < 1e-9);
            }
        }

        #[test]
        fn detections_invariant_to_scale((rows, cols, data) in raster_strategy(), j in -8i32..8) {
            // power-of-two scaling is exact, so the threshold mask cannot flip
            let k = 2f64.powi(j);
            let img = image(rows, cols, data.clone());
            let scaled = image(rows, cols, data.iter().map(|v| v * k).collect());
            let p = DetectionParams { max_detections: usize::MAX, ..DetectionParams::default() };
            let a = detect_echoes(&img, &p).unwrap();
            let b = detect_echoes(&scaled, &p).unwrap();
            prop_assert_eq!(a.len(), b.len());
            let mut pa: Vec<(f64, f64)> = a.iter().map(|d| (d.row, d.col)).collect();
            let mut pb: Vec<(f64, f64)> = b.iter().map(|d| (d.row, d.col)).collect();
            pa.sort_by(|x, y| x.partial_cmp(y).unwrap());
            pb.sort_by(|x, y| x.partial_cmp(y).unwrap());
            for (x, y) in pa.iter().zip(&pb) {
                prop_assert!((x.0 - y.0).abs() < 1e-9 && (x.1 - y.1).abs() < 1e-9);
            }
        }

        #[test]
        fn detections_bounded_by_components((rows, cols, data) in raster_strategy()) {
            let img = image(rows, cols, data.clone());
            let p = DetectionParams { max_detections: 3, ..DetectionParams::default() };
            let dets = detect_echoes(&img, &p).unwrap();
            let max = img.max();
            let comps = if max > 0.0 { label_components(&data, rows, cols, 0.25 * max, Connectivity::Eight).len() } else { 0 };
            prop_assert!(dets.len() <= comps && dets.len() <= 3);
        }
    }
}
