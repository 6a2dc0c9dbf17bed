//! Synthetic human-gait FMCW echoes.
//!
//! The walker is a torso scatterer plus limb scatterers. Every scatterer moves
//! along the walking heading with velocity `speed + amplitude * sin(2π f_gait t + phase)`.
//! Echoes are generated directly in dechirped form: fast-time sample `k` of a
//! pulse carries a beat tone at `2 R B / c` cycles per chirp, and the pulse as a
//! whole carries the carrier phase `-4π f_c R / c`, so approaching scatterers
//! produce positive Doppler.

use std::f64::consts::PI;

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Speed of light used throughout (m/s).
pub const SPEED_OF_LIGHT: f64 = 3.0e8;

/// Default upper bound on `n_channels * n_pulses * n_fast` for a single cube.
pub const DEFAULT_MAX_CUBE_SAMPLES: usize = 1 << 26;

/// FMCW radar constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadarParams {
    /// Carrier frequency (Hz).
    pub fc: f64,
    /// Sweep bandwidth (Hz).
    pub bandwidth: f64,
    /// Fast-time sample rate (Hz).
    pub fs: f64,
    /// Chirp repetition frequency (Hz).
    pub prf: f64,
    pub n_pulses: usize,
    pub n_fast: usize,
    pub n_channels: usize,
}

impl Default for RadarParams {
    /// 77 GHz carrier, 0.585 GHz sweep, one transmitter and four receivers;
    /// 2 s dwell at 4 kHz chirp rate.
    fn default() -> Self {
        Self {
            fc: 77.0e9,
            bandwidth: 0.585e9,
            fs: 2.0e6,
            prf: 4000.0,
            n_pulses: 8000,
            n_fast: 32,
            n_channels: 4,
        }
    }
}

impl RadarParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("fc", self.fc),
            ("bandwidth", self.bandwidth),
            ("fs", self.fs),
            ("prf", self.prf),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("radar.{name} must be positive, got {v}")));
            }
        }
        if self.n_pulses == 0 || self.n_fast == 0 || self.n_channels == 0 {
            return Err(Error::Config("radar dimensions must be at least 1".into()));
        }
        if self.bandwidth >= self.fc {
            return Err(Error::Config(format!(
                "radar.bandwidth ({}) must be below radar.fc ({})",
                self.bandwidth, self.fc
            )));
        }
        Ok(())
    }

    /// Range spanned by one fast-time spectral bin (m).
    pub fn range_resolution(&self) -> f64 {
        SPEED_OF_LIGHT / (2.0 * self.bandwidth)
    }

    pub fn wavelength(&self) -> f64 {
        SPEED_OF_LIGHT / self.fc
    }

    /// Doppler shift of a scatterer closing at `radial_velocity` m/s.
    pub fn doppler_hz(&self, radial_velocity: f64) -> f64 {
        2.0 * radial_velocity * self.fc / SPEED_OF_LIGHT
    }

    pub fn dwell(&self) -> f64 {
        self.n_pulses as f64 / self.prf
    }

    pub fn sample_count(&self) -> usize {
        self.n_channels
            .saturating_mul(self.n_pulses)
            .saturating_mul(self.n_fast)
    }
}

/// The ordered set of motion-direction classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSet {
    pub angles_deg: Vec<f64>,
}

impl Default for LabelSet {
    fn default() -> Self {
        Self {
            angles_deg: vec![0.0, 30.0, 45.0, 60.0, 90.0, 300.0, 315.0, 330.0],
        }
    }
}

impl LabelSet {
    pub fn len(&self) -> usize {
        self.angles_deg.len()
    }

    pub fn is_empty(&self) -> bool {
        self.angles_deg.is_empty()
    }

    /// Class index of `deg`, matched to within 1e-9 degrees.
    pub fn index_of(&self, deg: f64) -> Option<usize> {
        self.angles_deg.iter().position(|a| (a - deg).abs() < 1e-9)
    }

    pub fn validate(&self) -> Result<()> {
        if self.angles_deg.is_empty() {
            return Err(Error::Config("label set is empty".into()));
        }
        for (i, a) in self.angles_deg.iter().enumerate() {
            if !a.is_finite() || *a < 0.0 || *a >= 360.0 {
                return Err(Error::Config(format!("label angle {a} outside [0, 360)")));
            }
            if self.angles_deg[..i].iter().any(|b| (a - b).abs() < 1e-9) {
                return Err(Error::Config(format!("duplicate label angle {a}")));
            }
        }
        Ok(())
    }
}

/// A point scatterer on the walker.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scatterer {
    /// Static range offset from the torso (m).
    pub range_offset: f64,
    /// Peak micro-motion velocity along the heading (m/s).
    pub amplitude: f64,
    /// Micro-motion phase (rad).
    pub phase: f64,
    /// Power reflectivity; the echo amplitude is its square root.
    pub reflectivity: f64,
}

/// How the walker's position maps to radar range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Geometry {
    /// Range changes by `cos(direction)` times the along-heading displacement;
    /// the aspect angle never changes during the dwell.
    ConstantAspect,
    /// The walker moves in the plane from `(lateral_offset, initial_range)`
    /// with the radar at the origin looking along +y. The aspect angle evolves
    /// as the line of sight rotates, and a non-zero offset makes mirrored
    /// headings (e.g. 30 and 330 degrees) distinguishable.
    Planar { lateral_offset: f64 },
}

impl Default for Geometry {
    fn default() -> Self {
        Geometry::ConstantAspect
    }
}

/// Parameters of one walking sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaitScene {
    /// Heading relative to the line of sight; 0 walks straight at the radar.
    pub direction_deg: f64,
    /// Torso speed (m/s).
    pub speed: f64,
    /// Limb cycle rate (Hz).
    pub gait_freq: f64,
    pub scatterers: Vec<Scatterer>,
    /// Torso range at the start of the dwell (m).
    pub initial_range: f64,
    /// Per-sample noise power relative to a unit-reflectivity echo (dB).
    pub noise_floor_db: f64,
    #[serde(default)]
    pub geometry: Geometry,
}

impl GaitScene {
    /// A single non-moving-limb scatterer at `initial_range`.
    pub fn point_target(direction_deg: f64, speed: f64, initial_range: f64) -> Self {
        Self {
            direction_deg,
            speed,
            gait_freq: 1.0,
            scatterers: vec![Scatterer {
                range_offset: 0.0,
                amplitude: 0.0,
                phase: 0.0,
                reflectivity: 1.0,
            }],
            initial_range,
            noise_floor_db: f64::NEG_INFINITY,
            geometry: Geometry::ConstantAspect,
        }
    }

    /// Torso plus two arms and two legs, left and right limbs in antiphase.
    pub fn walker(direction_deg: f64, speed: f64, gait_freq: f64, phase: f64) -> Self {
        Self {
            direction_deg,
            speed,
            gait_freq,
            scatterers: default_body(speed, phase, [1.0; 4]),
            initial_range: 5.0,
            noise_floor_db: f64::NEG_INFINITY,
            geometry: Geometry::ConstantAspect,
        }
    }

    pub fn validate(&self, labels: Option<&LabelSet>) -> Result<()> {
        if !self.direction_deg.is_finite() {
            return Err(Error::Domain("direction must be finite".into()));
        }
        if let Some(labels) = labels {
            if labels.index_of(self.direction_deg).is_none() {
                return Err(Error::Domain(format!(
                    "direction {} deg is not one of the label angles {:?}",
                    self.direction_deg, labels.angles_deg
                )));
            }
        }
        if !(self.speed.is_finite() && self.speed >= 0.0) {
            return Err(Error::Domain(format!("speed must be >= 0, got {}", self.speed)));
        }
        if !(self.gait_freq.is_finite() && self.gait_freq > 0.0) {
            return Err(Error::Domain(format!(
                "gait_freq must be > 0, got {}",
                self.gait_freq
            )));
        }
        if !(self.initial_range.is_finite() && self.initial_range > 0.0) {
            return Err(Error::Domain("initial_range must be > 0".into()));
        }
        if self.noise_floor_db.is_nan() || self.noise_floor_db == f64::INFINITY {
            return Err(Error::Domain("noise_floor_db must be finite or -inf".into()));
        }
        for s in &self.scatterers {
            if !(s.reflectivity.is_finite() && s.reflectivity >= 0.0) {
                return Err(Error::Domain("scatterer reflectivity must be >= 0".into()));
            }
            if !(s.amplitude.is_finite() && s.phase.is_finite() && s.range_offset.is_finite()) {
                return Err(Error::Domain("scatterer parameters must be finite".into()));
            }
        }
        if let Geometry::Planar { lateral_offset } = self.geometry {
            if !lateral_offset.is_finite() {
                return Err(Error::Domain("lateral_offset must be finite".into()));
            }
        }
        Ok(())
    }

    /// Displacement of scatterer `s` along the heading at time `t`.
    fn displacement(&self, s: &Scatterer, t: f64) -> f64 {
        let w = 2.0 * PI * self.gait_freq;
        self.speed * t + s.amplitude / w * (s.phase.cos() - (w * t + s.phase).cos())
    }

    /// Range of scatterer `s` at time `t`.
    pub fn range_at(&self, s: &Scatterer, t: f64) -> f64 {
        let d = self.displacement(s, t);
        let heading = self.direction_deg.to_radians();
        match self.geometry {
            Geometry::ConstantAspect => self.initial_range - heading.cos() * d + s.range_offset,
            Geometry::Planar { lateral_offset } => {
                let x = lateral_offset + heading.sin() * d;
                let y = self.initial_range - heading.cos() * d;
                x.hypot(y) + s.range_offset
            }
        }
    }

    /// Closing velocity of scatterer `s` at time `t` under constant aspect.
    pub fn radial_velocity(&self, s: &Scatterer, t: f64) -> f64 {
        let w = 2.0 * PI * self.gait_freq;
        self.direction_deg.to_radians().cos() * (self.speed + s.amplitude * (w * t + s.phase).sin())
    }
}

/// Torso + arms + legs. `jitter` scales the four limb amplitudes.
pub fn default_body(speed: f64, phase: f64, jitter: [f64; 4]) -> Vec<Scatterer> {
    vec![
        Scatterer {
            range_offset: 0.0,
            amplitude: 0.15 * speed,
            phase: 2.0 * phase,
            reflectivity: 1.0,
        },
        Scatterer {
            range_offset: 0.05,
            amplitude: 0.6 * speed * jitter[0],
            phase,
            reflectivity: 0.25,
        },
        Scatterer {
            range_offset: 0.05,
            amplitude: 0.6 * speed * jitter[1],
            phase: phase + PI,
            reflectivity: 0.25,
        },
        Scatterer {
            range_offset: -0.05,
            amplitude: speed * jitter[2],
            phase: phase + PI,
            reflectivity: 0.35,
        },
        Scatterer {
            range_offset: -0.05,
            amplitude: speed * jitter[3],
            phase,
            reflectivity: 0.35,
        },
    ]
}

/// Provenance carried by a cube.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CubeMeta {
    pub seed: u64,
    pub scene: Option<GaitScene>,
}

/// Complex raw echoes indexed `[channel][pulse][fast_sample]`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RadarCube<S> {
    pub data: Vec<Complex<S>>,
    pub params: RadarParams,
    pub label: Option<usize>,
    pub meta: CubeMeta,
}

impl<S: Scalar> RadarCube<S> {
    pub fn zeros(params: RadarParams) -> Self {
        let n = params.sample_count();
        Self {
            data: vec![Complex::new(S::zero(), S::zero()); n],
            params,
            label: None,
            meta: CubeMeta {
                seed: 0,
                scene: None,
            },
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.params.n_channels, self.params.n_pulses, self.params.n_fast)
    }

    #[inline]
    pub fn index(&self, channel: usize, pulse: usize, fast: usize) -> usize {
        (channel * self.params.n_pulses + pulse) * self.params.n_fast + fast
    }

    /// The `[pulse][fast]` block of one channel.
    pub fn channel(&self, channel: usize) -> &[Complex<S>] {
        let len = self.params.n_pulses * self.params.n_fast;
        &self.data[channel * len..(channel + 1) * len]
    }

    pub fn channel_mut(&mut self, channel: usize) -> &mut [Complex<S>] {
        let len = self.params.n_pulses * self.params.n_fast;
        &mut self.data[channel * len..(channel + 1) * len]
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr().as_f64()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        if self.data.len() != self.params.sample_count() {
            return Err(Error::Data(format!(
                "cube holds {} samples, params imply {}",
                self.data.len(),
                self.params.sample_count()
            )));
        }
        if self.data.iter().any(|z| !(z.re.is_finite() && z.im.is_finite())) {
            return Err(Error::Data("cube contains non-finite samples".into()));
        }
        Ok(())
    }

    pub fn scale(&mut self, a: S) {
        for z in &mut self.data {
            *z = *z * a;
        }
    }
}

/// Fixed receive-channel phase offsets: 0, π/8, π/4, 3π/8, ...
pub fn channel_phase(channel: usize) -> f64 {
    channel as f64 * PI / 8.0
}

/// Simulate one dechirped FMCW echo cube. Uses the default sample cap.
pub fn synthesize_gait_echo<S: Scalar>(
    scene: &GaitScene,
    radar: &RadarParams,
    seed: u64,
) -> Result<RadarCube<S>> {
    synthesize_gait_echo_capped(scene, radar, seed, DEFAULT_MAX_CUBE_SAMPLES)
}

pub fn synthesize_gait_echo_capped<S: Scalar>(
    scene: &GaitScene,
    radar: &RadarParams,
    seed: u64,
    max_samples: usize,
) -> Result<RadarCube<S>> {
    radar.validate()?;
    scene.validate(None)?;
    let total = radar
        .n_channels
        .checked_mul(radar.n_pulses)
        .and_then(|v| v.checked_mul(radar.n_fast));
    match total {
        Some(n) if n <= max_samples => {}
        _ => {
            return Err(Error::Resource(format!(
                "{} x {} x {} samples exceeds the cap of {max_samples}",
                radar.n_channels, radar.n_pulses, radar.n_fast
            )))
        }
    }

    let n_fast = radar.n_fast;
    let n_pulses = radar.n_pulses;
    let carrier_k = -4.0 * PI * radar.fc / SPEED_OF_LIGHT;
    let beat_k = 2.0 * PI * 2.0 * radar.bandwidth / SPEED_OF_LIGHT / n_fast as f64;
    let amps: Vec<f64> = scene.scatterers.iter().map(|s| s.reflectivity.sqrt()).collect();
    let rotations: Vec<Complex<f64>> = (0..radar.n_channels)
        .map(|c| Complex::from_polar(1.0, channel_phase(c)))
        .collect();
    let sigma = if scene.noise_floor_db == f64::NEG_INFINITY {
        0.0
    } else {
        (10f64.powf(scene.noise_floor_db / 10.0) / 2.0).sqrt()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cube = RadarCube::<S>::zeros(radar.clone());
    let mut pulse = vec![Complex::new(0.0f64, 0.0); n_fast];
    for p in 0..n_pulses {
        let t = p as f64 / radar.prf;
        pulse.iter_mut().for_each(|z| *z = Complex::new(0.0, 0.0));
        for (s, &amp) in scene.scatterers.iter().zip(&amps) {
            if amp == 0.0 {
                continue;
            }
            let r = scene.range_at(s, t);
            let mut z = Complex::from_polar(amp, carrier_k * r);
            let step = Complex::from_polar(1.0, beat_k * r);
            for acc in pulse.iter_mut() {
                *acc += z;
                z *= step;
            }
        }
        for (c, rot) in rotations.iter().enumerate() {
            let base = cube.index(c, p, 0);
            for (k, z) in pulse.iter().enumerate() {
                let mut v = z * rot;
                if sigma > 0.0 {
                    let re: f64 = rng.sample(StandardNormal);
                    let im: f64 = rng.sample(StandardNormal);
                    v += Complex::new(re, im) * sigma;
                }
                cube.data[base + k] = Complex::new(S::of(v.re), S::of(v.im));
            }
        }
    }
    cube.meta = CubeMeta {
        seed,
        scene: Some(scene.clone()),
    };
    Ok(cube)
}

/// Noise-free energy implied by the scatterer reflectivities.
pub fn analytic_energy(scene: &GaitScene, radar: &RadarParams) -> f64 {
    let per_sample: f64 = scene.scatterers.iter().map(|s| s.reflectivity).sum();
    per_sample * radar.sample_count() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_radar() -> RadarParams {
        RadarParams {
            n_pulses: 256,
            n_fast: 32,
            ..RadarParams::default()
        }
    }

    #[test]
    fn defaults_match_radar_constants() {
        let r = RadarParams::default();
        assert_eq!(r.fc, 77.0e9);
        assert_eq!(r.bandwidth, 0.585e9);
        assert_eq!(r.n_channels, 4);
        assert!((r.range_resolution() - 0.25641).abs() < 1e-4);
        assert!((r.doppler_hz(1.0) - 513.333).abs() < 1e-2);
        assert_eq!(LabelSet::default().len(), 8);
    }

    #[test]
    fn rejects_invalid_radar() {
        let mut r = small_radar();
        r.bandwidth = r.fc * 2.0;
        assert!(matches!(r.validate(), Err(Error::Config(_))));
        let mut r = small_radar();
        r.n_channels = 0;
        assert!(r.validate().is_err());
    }

    #[test]
    fn resource_cap_is_enforced() {
        let scene = GaitScene::point_target(0.0, 1.0, 5.0);
        let err = synthesize_gait_echo_capped::<f32>(&scene, &small_radar(), 1, 1000).unwrap_err();
        assert!(matches!(err, Error::Resource(_)));
    }

    #[test]
    fn invalid_angle_is_a_domain_error() {
        let scene = GaitScene::point_target(17.0, 1.0, 5.0);
        let err = scene.validate(Some(&LabelSet::default())).unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
    }

    #[test]
    fn static_target_has_constant_slow_time_phase() {
        let scene = GaitScene::point_target(0.0, 0.0, 5.0);
        let cube = synthesize_gait_echo::<f64>(&scene, &small_radar(), 3).unwrap();
        let first = cube.data[cube.index(0, 0, 0)];
        for p in 0..cube.params.n_pulses {
            let z = cube.data[cube.index(0, p, 0)];
            assert!((z - first).norm() < 1e-9);
        }
    }

    #[test]
    fn channels_differ_by_fixed_phase_only() {
        let scene = GaitScene::walker(30.0, 1.2, 1.8, 0.4);
        let cube = synthesize_gait_echo::<f64>(&scene, &small_radar(), 3).unwrap();
        for c in 1..4 {
            let rot = Complex::from_polar(1.0, channel_phase(c));
            for i in [0usize, 17, 999, 5000] {
                let a = cube.channel(0)[i] * rot;
                let b = cube.channel(c)[i];
                assert!((a - b).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let mut scene = GaitScene::walker(45.0, 1.0, 1.7, 1.0);
        scene.noise_floor_db = 0.0;
        let a = synthesize_gait_echo::<f32>(&scene, &small_radar(), 9).unwrap();
        let b = synthesize_gait_echo::<f32>(&scene, &small_radar(), 9).unwrap();
        let c = synthesize_gait_echo::<f32>(&scene, &small_radar(), 10).unwrap();
        assert_eq!(a.data, b.data);
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn constant_aspect_matches_radial_velocity_formula() {
        let scene = GaitScene::walker(60.0, 1.3, 1.9, 0.2);
        let s = scene.scatterers[3];
        let dt = 1e-6;
        for t in [0.0, 0.3, 1.1] {
            let numeric = -(scene.range_at(&s, t + dt) - scene.range_at(&s, t - dt)) / (2.0 * dt);
            assert!((numeric - scene.radial_velocity(&s, t)).abs() < 1e-6);
        }
    }

    #[test]
    fn planar_on_boresight_starts_at_constant_aspect_velocity() {
        let mut scene = GaitScene::walker(45.0, 1.0, 1.5, 0.0);
        scene.geometry = Geometry::Planar { lateral_offset: 0.0 };
        let s = scene.scatterers[0];
        let dt = 1e-7;
        let numeric = -(scene.range_at(&s, dt) - scene.range_at(&s, 0.0)) / dt;
        assert!((numeric - scene.radial_velocity(&s, 0.0)).abs() < 1e-4);
    }
}
