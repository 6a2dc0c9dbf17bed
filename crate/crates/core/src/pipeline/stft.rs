//! Short-time Fourier transform into Doppler-time maps.

use num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Taper applied to each STFT frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    #[default]
    Hann,
    Hamming,
    Rectangular,
}

impl Window {
    /// Periodic-free (symmetric) coefficients of length `n`.
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        use std::f64::consts::PI;
        if n == 1 {
            return vec![1.0];
        }
        let denom = (n - 1) as f64;
        (0..n)
            .map(|i| {
                let x = 2.0 * PI * i as f64 / denom;
                match self {
                    Window::Hann => 0.5 - 0.5 * x.cos(),
                    Window::Hamming => 0.54 - 0.46 * x.cos(),
                    Window::Rectangular => 1.0,
                }
            })
            .collect()
    }

    pub fn name(self) -> &'static str {
        match self {
            Window::Hann => "hann",
            Window::Hamming => "hamming",
            Window::Rectangular => "rectangular",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "hann" => Ok(Window::Hann),
            "hamming" => Ok(Window::Hamming),
            "rectangular" | "rect" => Ok(Window::Rectangular),
            other => Err(Error::Config(format!("unknown window '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub window_len: usize,
    pub hop: usize,
    pub window: Window,
    pub fft_size: usize,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self {
            window_len: 128,
            hop: 16,
            window: Window::Hann,
            fft_size: 128,
        }
    }
}

impl StftConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0 < self.hop && self.hop <= self.window_len && self.window_len <= self.fft_size) {
            return Err(Error::Config(format!(
                "stft requires 0 < hop ({}) <= window_len ({}) <= fft_size ({})",
                self.hop, self.window_len, self.fft_size
            )));
        }
        Ok(())
    }

    /// `1 + floor((len - window_len) / hop)`, or `None` when `len < window_len`.
    pub fn frame_count(&self, len: usize) -> Option<usize> {
        (len >= self.window_len).then(|| 1 + (len - self.window_len) / self.hop)
    }
}

/// Doppler-time map, rows are Doppler bins in ascending frequency with zero
/// Doppler at row `rows / 2`, columns are STFT frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Dtm<S> {
    pub data: Vec<S>,
    pub rows: usize,
    pub cols: usize,
    /// Doppler spacing of adjacent rows (Hz).
    pub doppler_hz_per_bin: f64,
    /// Time spacing of adjacent columns (s).
    pub sec_per_frame: f64,
}

impl<S: Scalar> Dtm<S> {
    pub fn new(rows: usize, cols: usize, data: Vec<S>, doppler_hz_per_bin: f64, sec_per_frame: f64) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Data(format!(
                "{rows}x{cols} map needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self {
            data,
            rows,
            cols,
            doppler_hz_per_bin,
            sec_per_frame,
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            data: vec![S::zero(); rows * cols],
            rows,
            cols,
            doppler_hz_per_bin: 1.0,
            sec_per_frame: 1.0,
        }
    }

    #[inline]
    pub fn at(&self, row: usize, col: usize) -> S {
        self.data[row * self.cols + col]
    }

    /// Row index of zero Doppler.
    pub fn zero_row(&self) -> usize {
        self.rows / 2
    }

    /// Doppler frequency of `row` (Hz).
    pub fn row_hz(&self, row: usize) -> f64 {
        (row as f64 - self.zero_row() as f64) * self.doppler_hz_per_bin
    }

    pub fn min_max(&self) -> (S, S) {
        self.data.iter().fold((S::infinity(), S::neg_infinity()), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Sum of each row over all frames.
    pub fn doppler_profile(&self) -> Vec<f64> {
        self.data
            .chunks_exact(self.cols)
            .map(|r| r.iter().map(|v| v.as_f64()).sum())
            .collect()
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    /// `20 log10(x + floor)`, for display only.
    pub fn to_db(&self, floor: S) -> Self {
        self.map(|v| S::of(20.0) * (v + floor).log10())
    }

    /// Element-wise sum; used to accumulate per-channel maps.
    pub fn accumulate(&mut self, other: &Dtm<S>) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Data(format!(
                "cannot accumulate {}x{} into {}x{}",
                other.rows, other.cols, self.rows, self.cols
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }

    /// Bilinear resampling with half-pixel centres. Upsampling interpolates
    /// the two nearest samples (edge-clamped); downsampling by a factor `s`
    /// widens the triangle kernel to `s` input pixels so every input
    /// contributes, as antialiased image resizers do.
    pub fn resize(&self, rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Domain("resize target must be non-empty".into()));
        }
        if rows == self.rows && cols == self.cols {
            return Ok(self.clone());
        }
        let ys = triangle_taps(self.rows, rows);
        let xs = triangle_taps(self.cols, cols);
        let mut wide = vec![0.0; self.rows * cols];
        for (r, line) in wide.chunks_exact_mut(cols).enumerate() {
            let src = &self.data[r * self.cols..(r + 1) * self.cols];
            for (dst, taps) in line.iter_mut().zip(&xs) {
                *dst = taps.iter().map(|&(i, w)| src[i].as_f64() * w).sum();
            }
        }
        let mut data = Vec::with_capacity(rows * cols);
        for taps in &ys {
            for c in 0..cols {
                data.push(S::of(taps.iter().map(|&(i, w)| wide[i * cols + c] * w).sum()));
            }
        }
        Ok(Self {
            data,
            rows,
            cols,
            doppler_hz_per_bin: self.doppler_hz_per_bin * self.rows as f64 / rows as f64,
            sec_per_frame: self.sec_per_frame * self.cols as f64 / cols as f64,
        })
    }
}

/// `(input index, weight)` pairs for each of `n_out` outputs along one axis.
fn triangle_taps(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let centre = (o as f64 + 0.5) * scale - 0.5;
            if scale <= 1.0 {
                let p = centre.max(0.0);
                let i0 = (p.floor() as usize).min(n_in - 1);
                let i1 = (i0 + 1).min(n_in - 1);
                let w = p - i0 as f64;
                return vec![(i0, 1.0 - w), (i1, w)];
            }
            let lo = (centre - scale).ceil().max(0.0) as usize;
            let hi = ((centre + scale).floor() as usize).min(n_in - 1);
            let mut taps: Vec<(usize, f64)> = (lo..=hi)
                .map(|i| (i, 1.0 - (i as f64 - centre).abs() / scale))
                .filter(|&(_, w)| w > 0.0)
                .collect();
            let total: f64 = taps.iter().map(|t| t.1).sum();
            taps.iter_mut().for_each(|t| t.1 /= total);
            taps
        })
        .collect()
}

/// Magnitude STFT of a complex slow-time series sampled at `prf`.
pub fn stft<S: Scalar>(series: &[Complex<S>], cfg: &StftConfig, prf: f64) -> Result<Dtm<S>> {
    cfg.validate()?;
    let frames = cfg.frame_count(series.len()).ok_or_else(|| {
        Error::Domain(format!(
            "series of length {} is shorter than the {}-sample window",
            series.len(),
            cfg.window_len
        ))
    })?;
    let n = cfg.fft_size;
    let taper: Vec<S> = cfg.window.coefficients(cfg.window_len).into_iter().map(S::of).collect();
    let fft = FftPlanner::<S>::new().plan_fft_forward(n);
    let zero = Complex::new(S::zero(), S::zero());
    let mut buf = vec![zero; n * frames];
    for (f, frame) in buf.chunks_exact_mut(n).enumerate() {
        let start = f * cfg.hop;
        for (dst, (x, w)) in frame.iter_mut().zip(series[start..start + cfg.window_len].iter().zip(&taper)) {
            *dst = *x * *w;
        }
    }
    fft.process(&mut buf);

    // fftshift: bin k goes to row (k + n/2) mod n, so row n/2 holds 0 Hz.
    let half = n / 2;
    let mut data = vec![S::zero(); n * frames];
    for (f, spec) in buf.chunks_exact(n).enumerate() {
        for (k, z) in spec.iter().enumerate() {
            let row = (k + half) % n;
            data[row * frames + f] = z.norm();
        }
    }
    Dtm::new(n, frames, data, prf / n as f64, cfg.hop as f64 / prf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn tone(f: f64, prf: f64, len: usize) -> Vec<Complex<f64>> {
        (0..len)
            .map(|i| Complex::from_polar(1.0, 2.0 * PI * f * i as f64 / prf))
            .collect()
    }

    #[test]
    fn frame_count_formula() {
        let cfg = StftConfig::default();
        assert_eq!(cfg.frame_count(127), None);
        assert_eq!(cfg.frame_count(128), Some(1));
        assert_eq!(cfg.frame_count(7999), Some(1 + (7999 - 128) / 16));
    }

    #[test]
    fn tone_at_100hz_peaks_at_nearest_bin() {
        let prf = 1000.0;
        let cfg = StftConfig::default();
        let dtm = stft(&tone(100.0, prf, 1024), &cfg, prf).unwrap();
        let expect = dtm.zero_row() + (100.0 / dtm.doppler_hz_per_bin).round() as usize;
        for col in 0..dtm.cols {
            let best = (0..dtm.rows)
                .max_by(|&a, &b| dtm.at(a, col).partial_cmp(&dtm.at(b, col)).unwrap())
                .unwrap();
            assert_eq!(best, expect);
        }
    }

    #[test]
    fn zero_series_gives_zero_map() {
        let z = vec![Complex::new(0.0f32, 0.0); 300];
        let dtm = stft(&z, &StftConfig::default(), 500.0).unwrap();
        assert!(dtm.data.iter().all(|&v| v == 0.0));
        assert_eq!(dtm.rows, 128);
        assert_eq!(dtm.cols, 1 + (300 - 128) / 16);
    }

    #[test]
    fn short_series_is_domain_error() {
        let z = vec![Complex::new(0.0f64, 0.0); 10];
        assert!(matches!(stft(&z, &StftConfig::default(), 500.0), Err(Error::Domain(_))));
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = StftConfig {
            window_len: 64,
            hop: 65,
            ..StftConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = StftConfig {
            window_len: 256,
            fft_size: 128,
            ..StftConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn resize_preserves_constants_and_axes() {
        let dtm = Dtm::<f64>::new(4, 6, vec![3.0; 24], 10.0, 0.5).unwrap();
        let r = dtm.resize(8, 3).unwrap();
        assert!(r.data.iter().all(|&v| (v - 3.0).abs() < 1e-12));
        assert!((r.doppler_hz_per_bin - 5.0).abs() < 1e-12);
        assert!((r.sec_per_frame - 1.0).abs() < 1e-12);
    }

    #[test]
    fn resize_matches_half_pixel_bilinear() {
        // 2x2 -> 4x4 upsampling with half-pixel centres
        let dtm = Dtm::<f64>::new(2, 2, vec![0.0, 1.0, 2.0, 3.0], 1.0, 1.0).unwrap();
        let r = dtm.resize(4, 4).unwrap();
        let row0 = [0.0, 0.25, 0.75, 1.0];
        for (c, e) in row0.iter().enumerate() {
            assert!((r.at(0, c) - e).abs() < 1e-12);
        }
        assert!((r.at(1, 1) - (0.25 + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn downsampling_averages_every_input() {
        // 1x8 -> 1x2: each output is a triangle-weighted mean of its half.
        let dtm = Dtm::<f64>::new(1, 8, vec![0.0, 0.0, 0.0, 8.0, 0.0, 0.0, 0.0, 0.0], 1.0, 1.0).unwrap();
        let r = dtm.resize(1, 2).unwrap();
        // centre 1.5, half-width 4: weights 0.625, 0.875, 0.875, 0.625, 0.375, 0.125 over inputs 0..=5
        let expect = 8.0 * 0.625 / 3.5;
        assert!((r.at(0, 0) - expect).abs() < 1e-12, "{}", r.at(0, 0));
        let x2 = Dtm::<f64>::new(2, 4, (0..8).map(f64::from).collect(), 1.0, 1.0).unwrap();
        let r = x2.resize(1, 2).unwrap();
        let mean: f64 = r.data.iter().sum::<f64>() / 2.0;
        assert!((mean - 3.5).abs() < 1e-12);
    }
}
