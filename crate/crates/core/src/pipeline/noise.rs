//! Controlled SNR reduction of Doppler-time maps.
//!
//! Image SNR is `P_signal / (P_floor + P_added)`, where `P_signal` is the mean
//! square of the map, `P_floor` the mean square of pixels at or below the
//! median (the background) and `P_added` the mean square of the perturbation
//! actually applied after clipping. A drop of `d` dB therefore needs
//! `P_added = P_floor * (10^(d/10) - 1)`. The noise field is drawn once per
//! seed and its scale is found by bisection, since clipping at zero makes the
//! applied power a nonlinear (but monotone) function of the scale.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::stft::Dtm;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Floor on the background power relative to the total, so that a clean map
/// reads as 60 dB SNR instead of infinite.
const MIN_FLOOR_RATIO: f64 = 1e-6;

/// Mean-square power split used by the SNR definition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImagePower {
    pub signal: f64,
    pub floor: f64,
}

impl ImagePower {
    pub fn measure<S: Scalar>(dtm: &Dtm<S>) -> Self {
        let vals: Vec<f64> = dtm.data.iter().map(|v| v.as_f64()).collect();
        if vals.is_empty() {
            return Self { signal: 0.0, floor: 0.0 };
        }
        let signal = vals.iter().map(|v| v * v).sum::<f64>() / vals.len() as f64;
        let mut sorted = vals.clone();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let median = sorted[(sorted.len() - 1) / 2];
        let (sum, n) = vals
            .iter()
            .filter(|&&v| v <= median)
            .fold((0.0, 0usize), |(s, n), v| (s + v * v, n + 1));
        let floor = (sum / n as f64).max(signal * MIN_FLOOR_RATIO);
        Self { signal, floor }
    }

    pub fn snr_db(&self, added: f64) -> f64 {
        10.0 * (self.signal / (self.floor + added)).log10()
    }
}

/// Mean square of `b - a`.
pub fn perturbation_power<S: Scalar>(a: &Dtm<S>, b: &Dtm<S>) -> f64 {
    let n = a.data.len().max(1) as f64;
    a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| {
            let d = y.as_f64() - x.as_f64();
            d * d
        })
        .sum::<f64>()
        / n
}

/// Measured SNR drop (dB) of `noisy` relative to `clean`.
pub fn measured_drop_db<S: Scalar>(clean: &Dtm<S>, noisy: &Dtm<S>) -> f64 {
    let p = ImagePower::measure(clean);
    p.snr_db(0.0) - p.snr_db(perturbation_power(clean, noisy))
}

/// Add non-negative-clipped Gaussian noise lowering image SNR by `drop_db`.
pub fn degrade_snr<S: Scalar>(dtm: &Dtm<S>, drop_db: f64, seed: u64) -> Result<Dtm<S>> {
    if !(drop_db.is_finite() && drop_db >= 0.0) {
        return Err(Error::Domain(format!("drop_db must be >= 0, got {drop_db}")));
    }
    let power = ImagePower::measure(dtm);
    if drop_db == 0.0 || power.signal == 0.0 {
        return Ok(dtm.clone());
    }
    let target = power.floor * (10f64.powf(drop_db / 10.0) - 1.0);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<f64> = (0..dtm.data.len()).map(|_| rng.sample(StandardNormal)).collect();
    let base: Vec<f64> = dtm.data.iter().map(|v| v.as_f64()).collect();
    let applied = |sigma: f64| -> f64 {
        base.iter()
            .zip(&noise)
            .map(|(x, z)| {
                let d = (x + sigma * z).max(0.0) - x;
                d * d
            })
            .sum::<f64>()
            / base.len() as f64
    };

    // Grow the bracket until it covers the target, then bisect.
    let mut lo = 0.0;
    let mut hi = target.sqrt().max(f64::MIN_POSITIVE);
    while applied(hi) < target {
        lo = hi;
        hi *= 2.0;
        if !hi.is_finite() {
            return Err(Error::numeric("degrade_snr", "noise scale diverged"));
        }
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if applied(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if (hi - lo) <= 1e-12 * hi {
            break;
        }
    }
    let sigma = 0.5 * (lo + hi);
    let data = base
        .iter()
        .zip(&noise)
        .map(|(x, z)| S::of((x + sigma * z).max(0.0)))
        .collect();
    Ok(Dtm { data, ..dtm.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ridge(rows: usize, cols: usize) -> Dtm<f64> {
        let mut data = vec![0.01; rows * cols];
        for c in 0..cols {
            let r = (rows / 2 + (c % 7)) % rows;
            data[r * cols + c] = 5.0;
        }
        Dtm::new(rows, cols, data, 1.0, 1.0).unwrap()
    }

    #[test]
    fn zero_drop_is_identity() {
        let d = ridge(16, 16);
        assert_eq!(degrade_snr(&d, 0.0, 4).unwrap(), d);
    }

    #[test]
    fn negative_drop_is_rejected() {
        assert!(degrade_snr(&ridge(4, 4), -1.0, 0).is_err());
        assert!(degrade_snr(&ridge(4, 4), f64::NAN, 0).is_err());
    }

    #[test]
    fn output_is_non_negative_and_deterministic() {
        let d = ridge(32, 20);
        let a = degrade_snr(&d, 8.0, 11).unwrap();
        let b = degrade_snr(&d, 8.0, 11).unwrap();
        let c = degrade_snr(&d, 8.0, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.data.iter().all(|&v| v >= 0.0));
    }
}
