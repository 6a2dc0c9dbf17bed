//! Fast-time compression, channel accumulation, clutter suppression and
//! range-cell selection.

use num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sim::{RadarCube, SPEED_OF_LIGHT};

/// Complex range profiles indexed `[pulse][range_bin]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexRangeMap<S> {
    pub data: Vec<Complex<S>>,
    pub n_pulses: usize,
    pub n_bins: usize,
    /// Metres per range bin.
    pub range_resolution: f64,
    pub prf: f64,
}

/// Magnitudes indexed `[pulse][range_bin]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeSlowTimeMap<S> {
    pub data: Vec<S>,
    pub n_pulses: usize,
    pub n_bins: usize,
    pub range_resolution: f64,
    pub prf: f64,
}

impl<S: Scalar> ComplexRangeMap<S> {
    #[inline]
    pub fn at(&self, pulse: usize, bin: usize) -> Complex<S> {
        self.data[pulse * self.n_bins + bin]
    }

    pub fn magnitude(&self) -> RangeSlowTimeMap<S> {
        RangeSlowTimeMap {
            data: self.data.iter().map(|z| z.norm()).collect(),
            n_pulses: self.n_pulses,
            n_bins: self.n_bins,
            range_resolution: self.range_resolution,
            prf: self.prf,
        }
    }

    fn same_shape(&self, other: &Self) -> bool {
        self.n_pulses == other.n_pulses && self.n_bins == other.n_bins
    }
}

impl<S: Scalar> RangeSlowTimeMap<S> {
    #[inline]
    pub fn at(&self, pulse: usize, bin: usize) -> S {
        self.data[pulse * self.n_bins + bin]
    }

    /// Total slow-time energy of every range bin.
    pub fn bin_energy(&self) -> Vec<f64> {
        let mut energy = vec![0.0; self.n_bins];
        for row in self.data.chunks_exact(self.n_bins) {
            for (e, v) in energy.iter_mut().zip(row) {
                let v = v.as_f64();
                *e += v * v;
            }
        }
        energy
    }
}

/// Fast-time spectral transform of every pulse of every channel. With the
/// dechirped echo model, bin `b` corresponds to range `b * c / (2 B)`.
pub fn pulse_compress<S: Scalar>(cube: &RadarCube<S>) -> Result<Vec<ComplexRangeMap<S>>> {
    cube.validate()?;
    let (n_channels, n_pulses, n_fast) = cube.dims();
    let fft = FftPlanner::<S>::new().plan_fft_forward(n_fast);
    let range_resolution = SPEED_OF_LIGHT / (2.0 * cube.params.bandwidth);
    let mut scratch = vec![Complex::new(S::zero(), S::zero()); fft.get_inplace_scratch_len()];
    let mut out = Vec::with_capacity(n_channels);
    for c in 0..n_channels {
        let mut data = cube.channel(c).to_vec();
        // rustfft processes every n_fast-long chunk of the buffer
        fft.process_with_scratch(&mut data, &mut scratch);
        out.push(ComplexRangeMap {
            data,
            n_pulses,
            n_bins: n_fast,
            range_resolution,
            prf: cube.params.prf,
        });
    }
    Ok(out)
}

/// Non-coherent accumulation: element-wise sum of channel magnitudes.
pub fn nci<S: Scalar>(maps: &[ComplexRangeMap<S>]) -> Result<RangeSlowTimeMap<S>> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Data("non-coherent accumulation needs at least one channel".into()))?;
    if let Some(bad) = maps.iter().position(|m| !m.same_shape(first)) {
        return Err(Error::Data(format!(
            "channel {bad} is {}x{}, channel 0 is {}x{}",
            maps[bad].n_pulses, maps[bad].n_bins, first.n_pulses, first.n_bins
        )));
    }
    let mut acc = first.magnitude();
    for m in &maps[1..] {
        for (a, z) in acc.data.iter_mut().zip(&m.data) {
            *a += z.norm();
        }
    }
    Ok(acc)
}

/// Slow-time high-pass filter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HighPass {
    /// `y[p] = x[p] - x[p-1]`; drops the first pulse.
    #[default]
    TwoPulse,
    /// `(1 - z^-1)^4` binomial canceller; drops the first four pulses.
    FourthOrder,
}

impl HighPass {
    fn taps(self) -> &'static [f64] {
        match self {
            HighPass::TwoPulse => &[1.0, -1.0],
            HighPass::FourthOrder => &[1.0, -4.0, 6.0, -4.0, 1.0],
        }
    }

    /// Pulses consumed before the first output.
    pub fn delay(self) -> usize {
        self.taps().len() - 1
    }
}

/// Two-pulse canceller.
pub fn mti_filter<S: Scalar>(map: &ComplexRangeMap<S>) -> Result<ComplexRangeMap<S>> {
    highpass_filter(map, HighPass::TwoPulse)
}

/// Slow-time FIR high-pass applied independently to each range bin.
pub fn highpass_filter<S: Scalar>(
    map: &ComplexRangeMap<S>,
    kind: HighPass,
) -> Result<ComplexRangeMap<S>> {
    let taps = kind.taps();
    if map.n_pulses < taps.len() {
        return Err(Error::Domain(format!(
            "{kind:?} filter needs at least {} pulses, got {}",
            taps.len(),
            map.n_pulses
        )));
    }
    let taps: Vec<S> = taps.iter().map(|&t| S::of(t)).collect();
    let n_out = map.n_pulses - kind.delay();
    let nb = map.n_bins;
    let mut data = vec![Complex::new(S::zero(), S::zero()); n_out * nb];
    for p in 0..n_out {
        let newest = p + kind.delay();
        let out = &mut data[p * nb..(p + 1) * nb];
        for (lag, &w) in taps.iter().enumerate() {
            let src = &map.data[(newest - lag) * nb..(newest - lag + 1) * nb];
            for (o, x) in out.iter_mut().zip(src) {
                *o += *x * w;
            }
        }
    }
    Ok(ComplexRangeMap {
        data,
        n_pulses: n_out,
        n_bins: nb,
        range_resolution: map.range_resolution,
        prf: map.prf,
    })
}

/// Inclusive range-bin window selected for Doppler processing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RangeWindow {
    pub center: usize,
    pub lo: usize,
    pub hi: usize,
}

impl RangeWindow {
    /// `width` bins centred on `center`, clipped to `[0, n_bins)`.
    pub fn centered(center: usize, width: usize, n_bins: usize) -> Result<Self> {
        if width == 0 || width > n_bins {
            return Err(Error::Domain(format!(
                "range window width {width} must lie in [1, {n_bins}]"
            )));
        }
        if center >= n_bins {
            return Err(Error::Domain(format!("range bin {center} out of {n_bins}")));
        }
        let before = (width - 1) / 2;
        let after = width - 1 - before;
        Ok(Self {
            center,
            lo: center.saturating_sub(before),
            hi: (center + after).min(n_bins - 1),
        })
    }
}

/// Pick the range bin with the most slow-time energy and centre a window on it.
pub fn select_window<S: Scalar>(map: &RangeSlowTimeMap<S>, width: usize) -> Result<RangeWindow> {
    if width == 0 || width > map.n_bins {
        return Err(Error::Domain(format!(
            "range window width {width} must lie in [1, {}]",
            map.n_bins
        )));
    }
    let energy = map.bin_energy();
    let (center, best) = energy
        .iter()
        .copied()
        .enumerate()
        .fold((0, 0.0), |acc, (i, e)| if e > acc.1 { (i, e) } else { acc });
    if best <= 0.0 {
        return Err(Error::NoEnergy);
    }
    RangeWindow::centered(center, width, map.n_bins)
}

/// Coherent sum of the complex slow-time series over the bins of `window`.
pub fn window_series<S: Scalar>(map: &ComplexRangeMap<S>, window: RangeWindow) -> Vec<Complex<S>> {
    (0..map.n_pulses)
        .map(|p| {
            let row = &map.data[p * map.n_bins..(p + 1) * map.n_bins];
            row[window.lo..=window.hi]
                .iter()
                .fold(Complex::new(S::zero(), S::zero()), |a, z| a + z)
        })
        .collect()
}

/// Select the max-energy bin of a single complex map and return its window
/// together with the coherently summed slow-time series.
pub fn select_range_cells<S: Scalar>(
    map: &ComplexRangeMap<S>,
    width: usize,
) -> Result<(RangeWindow, Vec<Complex<S>>)> {
    let window = select_window(&map.magnitude(), width)?;
    Ok((window, window_series(map, window)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{synthesize_gait_echo, GaitScene, RadarParams};

    fn map_from(rows: &[&[Complex<f64>]]) -> ComplexRangeMap<f64> {
        ComplexRangeMap {
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
            n_pulses: rows.len(),
            n_bins: rows[0].len(),
            range_resolution: 1.0,
            prf: 1000.0,
        }
    }

    fn c(re: f64) -> Complex<f64> {
        Complex::new(re, 0.0)
    }

    #[test]
    fn point_target_lands_in_expected_range_bin() {
        let radar = RadarParams {
            n_pulses: 16,
            n_fast: 64,
            ..RadarParams::default()
        };
        let scene = GaitScene::point_target(0.0, 0.0, 5.0);
        let cube = synthesize_gait_echo::<f64>(&scene, &radar, 1).unwrap();
        let maps = pulse_compress(&cube).unwrap();
        let acc = nci(&maps).unwrap();
        let (best, _) = acc
            .bin_energy()
            .into_iter()
            .enumerate()
            .fold((0, 0.0), |a, (i, e)| if e > a.1 { (i, e) } else { a });
        assert!((19..=20).contains(&best), "peak at {best}");
        assert!((acc.range_resolution - 0.25641).abs() < 1e-4);
    }

    #[test]
    fn zero_cube_compresses_to_zero() {
        let cube = RadarCube::<f32>::zeros(RadarParams {
            n_pulses: 8,
            n_fast: 16,
            ..RadarParams::default()
        });
        for m in pulse_compress(&cube).unwrap() {
            assert!(m.data.iter().all(|z| z.norm() == 0.0));
        }
    }

    #[test]
    fn non_finite_cube_is_rejected() {
        let mut cube = RadarCube::<f32>::zeros(RadarParams {
            n_pulses: 4,
            n_fast: 8,
            ..RadarParams::default()
        });
        cube.data[5].re = f32::NAN;
        assert!(matches!(pulse_compress(&cube), Err(Error::Data(_))));
    }

    #[test]
    fn nci_sums_unit_magnitudes() {
        let maps: Vec<_> = (0..4)
            .map(|k| map_from(&[&[Complex::from_polar(1.0, k as f64 * 0.7), c(0.0)]]))
            .collect();
        let acc = nci(&maps).unwrap();
        assert!((acc.data[0] - 4.0).abs() < 1e-12);
        assert_eq!(acc.data[1], 0.0);
    }

    #[test]
    fn nci_zeroed_channel_drops_out() {
        let a = map_from(&[&[c(1.0), c(2.0)]]);
        let b = map_from(&[&[c(-3.0), Complex::new(0.0, 1.0)]]);
        let z = map_from(&[&[c(0.0), c(0.0)]]);
        let three = nci(&[a.clone(), b.clone(), a.clone()]).unwrap();
        let four = nci(&[a.clone(), b, z, a]).unwrap();
        assert_eq!(three.data, four.data);
    }

    #[test]
    fn nci_dimension_mismatch() {
        let a = map_from(&[&[c(1.0), c(2.0)]]);
        let b = map_from(&[&[c(1.0)]]);
        assert!(matches!(nci(&[a, b]), Err(Error::Data(_))));
        assert!(nci::<f64>(&[]).is_err());
    }

    #[test]
    fn mti_cancels_constant_and_doubles_alternating() {
        let constant = map_from(&[&[c(3.0)], &[c(3.0)], &[c(3.0)]]);
        let out = mti_filter(&constant).unwrap();
        assert_eq!(out.n_pulses, 2);
        assert!(out.data.iter().all(|z| z.norm() == 0.0));

        let alt = map_from(&[&[c(1.0)], &[c(-1.0)], &[c(1.0)], &[c(-1.0)]]);
        let out = mti_filter(&alt).unwrap();
        assert!(out.data.iter().all(|z| (z.norm() - 2.0).abs() < 1e-12));
    }

    #[test]
    fn mti_transfer_function() {
        let prf = 1000.0;
        let f = 137.0;
        let rows: Vec<Vec<Complex<f64>>> = (0..64)
            .map(|p| vec![Complex::from_polar(1.0, 2.0 * std::f64::consts::PI * f * p as f64 / prf)])
            .collect();
        let refs: Vec<&[Complex<f64>]> = rows.iter().map(|r| r.as_slice()).collect();
        let out = mti_filter(&map_from(&refs)).unwrap();
        let expect = 2.0 * (std::f64::consts::PI * f / prf).sin().abs();
        for z in &out.data {
            assert!((z.norm() - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn mti_needs_two_pulses() {
        let one = map_from(&[&[c(1.0)]]);
        assert!(matches!(mti_filter(&one), Err(Error::Domain(_))));
        let four = map_from(&[&[c(1.0)], &[c(1.0)], &[c(1.0)], &[c(1.0)]]);
        assert!(highpass_filter(&four, HighPass::FourthOrder).is_err());
    }

    #[test]
    fn fourth_order_kills_linear_ramp() {
        let rows: Vec<Vec<Complex<f64>>> = (0..10).map(|p| vec![c(2.0 + 0.5 * p as f64)]).collect();
        let refs: Vec<&[Complex<f64>]> = rows.iter().map(|r| r.as_slice()).collect();
        let out = highpass_filter(&map_from(&refs), HighPass::FourthOrder).unwrap();
        assert_eq!(out.n_pulses, 6);
        assert!(out.data.iter().all(|z| z.norm() < 1e-12));
    }

    #[test]
    fn window_centering_and_clipping() {
        let w = RangeWindow::centered(20, 5, 32).unwrap();
        assert_eq!((w.lo, w.hi), (18, 22));
        let w = RangeWindow::centered(20, 1, 32).unwrap();
        assert_eq!((w.lo, w.hi), (20, 20));
        let w = RangeWindow::centered(0, 5, 32).unwrap();
        assert_eq!((w.lo, w.hi), (0, 2));
        let w = RangeWindow::centered(31, 5, 32).unwrap();
        assert_eq!((w.lo, w.hi), (29, 31));
        assert!(RangeWindow::centered(3, 0, 32).is_err());
        assert!(RangeWindow::centered(3, 33, 32).is_err());
    }

    #[test]
    fn selection_finds_target_bin() {
        let mut rows = vec![vec![c(0.0); 32]; 4];
        for (p, r) in rows.iter_mut().enumerate() {
            r[20] = Complex::from_polar(2.0, p as f64);
            r[3] = c(0.1);
        }
        let refs: Vec<&[Complex<f64>]> = rows.iter().map(|r| r.as_slice()).collect();
        let map = map_from(&refs);
        let (w, series) = select_range_cells(&map, 1).unwrap();
        assert_eq!(w.center, 20);
        assert_eq!(series.len(), 4);
        let (w, _) = select_range_cells(&map, 5).unwrap();
        assert_eq!((w.lo, w.hi), (18, 22));
    }

    #[test]
    fn selection_on_zero_map_has_no_energy() {
        let map = map_from(&[&[c(0.0); 8], &[c(0.0); 8]]);
        assert!(matches!(select_range_cells(&map, 3), Err(Error::NoEnergy)));
    }
}
