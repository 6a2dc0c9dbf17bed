//! Feature Linking Model augmentation of Doppler-time maps.
//!
//! Every pixel is a neuron driven by its normalized intensity. A neuron
//! integrates `(1 + alpha) * S` each step plus `beta` times the
//! distance-weighted spikes of its neighbours, and fires once its membrane
//! potential exceeds a geometrically decaying threshold. The step at which
//! each neuron first fires forms the time matrix `T`; bright pixels fire
//! early. Reversing and quantizing `T` yields the 8-bit augmented map `J`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::Dtm;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlmParams {
    /// Membrane decay.
    pub f: f64,
    /// Feeding weight.
    pub alpha: f64,
    /// Linking weight.
    pub beta: f64,
    /// Threshold decay.
    pub g: f64,
    /// Threshold jump after a spike.
    pub h: f64,
    /// Global suppression subtracted from the linking input.
    pub eps_link: f64,
    /// Bias added after min-max normalization.
    pub eps_norm: f64,
    /// Neighbourhood radius in pixels.
    pub radius: usize,
    /// Initial threshold.
    pub theta0: f64,
    /// Iteration cap.
    pub n_max: usize,
}

impl Default for FlmParams {
    fn default() -> Self {
        Self {
            f: 0.9,
            alpha: 0.3,
            beta: 0.2,
            g: 0.9,
            h: 1e4,
            eps_link: 0.01,
            eps_norm: 0.01,
            radius: 1,
            theta0: 1.0,
            n_max: 50,
        }
    }
}

impl FlmParams {
    /// Upper bound on the membrane potential for stimuli in `[eps_norm, 1 + eps_norm]`.
    pub fn potential_bound(&self) -> f64 {
        let drive = (1.0 + self.alpha) * (1.0 + self.eps_norm) + self.beta * weight_sum(self.radius);
        drive / (1.0 - self.f)
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("f", (0.0..1.0).contains(&self.f)),
            ("alpha", self.alpha >= 0.0 && self.alpha.is_finite()),
            ("beta", self.beta >= 0.0 && self.beta.is_finite()),
            ("g", self.g > 0.0 && self.g < 1.0),
            ("h", self.h > 0.0 && self.h.is_finite()),
            ("eps_link", self.eps_link >= 0.0 && self.eps_link.is_finite()),
            ("eps_norm", self.eps_norm > 0.0 && self.eps_norm.is_finite()),
            ("radius", self.radius >= 1),
            ("theta0", self.theta0 > 0.0 && self.theta0.is_finite()),
            ("n_max", self.n_max >= 1),
        ];
        if let Some((name, _)) = checks.iter().find(|(_, ok)| !ok) {
            return Err(Error::Config(format!("flm.{name} out of range: {self:?}")));
        }
        // After a spike the threshold is at least h * g^k for k further steps;
        // it must stay above any reachable potential for the whole run.
        let floor = self.h * self.g.powi(self.n_max as i32);
        if floor <= self.potential_bound() {
            return Err(Error::Config(format!(
                "flm.h = {} too small: h * g^n_max = {floor:.3e} must exceed the potential bound {:.3e}",
                self.h,
                self.potential_bound()
            )));
        }
        Ok(())
    }
}

/// One neighbour of the linking stencil.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Link<S> {
    pub dr: isize,
    pub dc: isize,
    pub weight: S,
}

/// Inverse-distance weights over the `(2r+1)^2` square, centre excluded.
pub fn linking_weights<S: Scalar>(radius: usize) -> Vec<Link<S>> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dr in -r..=r {
        for dc in -r..=r {
            if dr == 0 && dc == 0 {
                continue;
            }
            let d = ((dr * dr + dc * dc) as f64).sqrt();
            out.push(Link {
                dr,
                dc,
                weight: S::of(1.0 / d),
            });
        }
    }
    out
}

fn weight_sum(radius: usize) -> f64 {
    linking_weights::<f64>(radius).iter().map(|l| l.weight).sum()
}

/// Normalized stimulus `S` in `[eps_norm, 1 + eps_norm]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Stimulus<S> {
    pub data: Vec<S>,
    pub rows: usize,
    pub cols: usize,
}

/// `(DTM - min) / (max - min) + eps_norm`.
pub fn normalize_dtm<S: Scalar>(dtm: &Dtm<S>, eps_norm: f64) -> Result<Stimulus<S>> {
    if !dtm.is_finite() {
        return Err(Error::Data("DTM contains non-finite values".into()));
    }
    if dtm.data.is_empty() {
        return Err(Error::Data("empty DTM".into()));
    }
    let (lo, hi) = dtm.min_max();
    if hi <= lo {
        return Err(Error::Degenerate("constant DTM cannot be normalized".into()));
    }
    let span = hi - lo;
    let eps = S::of(eps_norm);
    Ok(Stimulus {
        data: dtm.data.iter().map(|&v| (v - lo) / span + eps).collect(),
        rows: dtm.rows,
        cols: dtm.cols,
    })
}

/// Per-step state of the neuron grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FlmState<S> {
    pub rows: usize,
    pub cols: usize,
    /// Membrane potentials.
    pub u: Vec<S>,
    /// Thresholds.
    pub theta: Vec<S>,
    /// Spikes of the current step.
    pub y: Vec<bool>,
    /// First-fire step per neuron, 0 while unfired.
    pub t: Vec<u32>,
    /// Number of neurons that have fired.
    pub xi: usize,
    pub n: usize,
}

impl<S: Scalar> FlmState<S> {
    /// `U = 0`, `theta = theta0`, no spikes, `n = 0`.
    pub fn initial(rows: usize, cols: usize, theta0: f64) -> Self {
        let n = rows * cols;
        Self {
            rows,
            cols,
            u: vec![S::zero(); n],
            theta: vec![S::of(theta0); n],
            y: vec![false; n],
            t: vec![0; n],
            xi: 0,
            n: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn complete(&self) -> bool {
        self.xi == self.len()
    }
}

/// Advance one step. Right-hand sides only read step `n-1` spikes.
pub fn flm_step<S: Scalar>(
    state: &mut FlmState<S>,
    stimulus: &Stimulus<S>,
    links: &[Link<S>],
    params: &FlmParams,
) -> Result<()> {
    if stimulus.rows != state.rows || stimulus.cols != state.cols {
        return Err(Error::Data(format!(
            "stimulus {}x{} does not match state {}x{}",
            stimulus.rows, stimulus.cols, state.rows, state.cols
        )));
    }
    let (rows, cols) = (state.rows as isize, state.cols as isize);
    let f = S::of(params.f);
    let feed = S::of(1.0 + params.alpha);
    let beta = S::of(params.beta);
    let eps_link = S::of(params.eps_link);
    let g = S::of(params.g);
    let h = S::of(params.h);
    let step = state.n + 1;

    let prev = std::mem::take(&mut state.y);
    let mut next = vec![false; prev.len()];
    for r in 0..rows {
        for c in 0..cols {
            let i = (r * cols + c) as usize;
            let mut linked = S::zero();
            if params.beta != 0.0 {
                for l in links {
                    let (rr, cc) = (r + l.dr, c + l.dc);
                    if rr >= 0 && rr < rows && cc >= 0 && cc < cols && prev[(rr * cols + cc) as usize] {
                        linked += l.weight;
                    }
                }
            }
            let u = f * state.u[i] + feed * stimulus.data[i] + beta * (linked - eps_link);
            let spiked = if prev[i] { S::one() } else { S::zero() };
            let theta = g * state.theta[i] + h * spiked;
            if !(u.is_finite() && theta.is_finite()) {
                return Err(Error::numeric(
                    "flm_step",
                    format!("non-finite state at ({r}, {c}) in step {step}"),
                ));
            }
            state.u[i] = u;
            state.theta[i] = theta;
            if u > theta {
                next[i] = true;
                if state.t[i] == 0 {
                    state.t[i] = step as u32;
                    state.xi += 1;
                }
            }
        }
    }
    state.y = next;
    state.n = step;
    Ok(())
}

/// First-fire step of every neuron.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimeMatrix {
    pub data: Vec<u32>,
    pub rows: usize,
    pub cols: usize,
    /// Steps executed.
    pub steps: usize,
}

/// Iterate from rest until every neuron has fired or `n_max` is reached.
pub fn run_flm<S: Scalar>(stimulus: &Stimulus<S>, params: &FlmParams) -> Result<TimeMatrix> {
    params.validate()?;
    let links = linking_weights::<S>(params.radius);
    let mut state = FlmState::<S>::initial(stimulus.rows, stimulus.cols, params.theta0);
    while !state.complete() && state.n < params.n_max {
        flm_step(&mut state, stimulus, &links, params)?;
    }
    if !state.complete() {
        return Err(Error::IncompleteCoverage {
            steps: state.n,
            fired: state.xi,
            total: state.len(),
            partial: state.t,
        });
    }
    Ok(TimeMatrix {
        data: state.t,
        rows: stimulus.rows,
        cols: stimulus.cols,
        steps: state.n,
    })
}

/// `R = max(T) + 1 - T`.
pub fn invert_time(t: &TimeMatrix) -> Result<Vec<u32>> {
    if t.data.iter().any(|&v| v == 0) {
        return Err(Error::Domain("time matrix has unfired entries".into()));
    }
    let max = t.data.iter().copied().max().unwrap_or(1);
    Ok(t.data.iter().map(|&v| max + 1 - v).collect())
}

/// `J = floor(255 (R - min R) / (max R - min R) + 0.5)`, all 255 when `R` is constant.
pub fn quantize(r: &[u32]) -> Result<Vec<u8>> {
    if r.iter().any(|&v| v == 0) {
        return Err(Error::Domain("reversed time matrix must be >= 1".into()));
    }
    let (lo, hi) = r
        .iter()
        .fold((u32::MAX, 0), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if r.is_empty() || lo == hi {
        return Ok(vec![255; r.len()]);
    }
    // floor((2 * 255 * (v - lo) + span) / (2 * span)) in exact integers
    let span = u64::from(hi - lo);
    Ok(r.iter()
        .map(|&v| ((2 * 255 * u64::from(v - lo) + span) / (2 * span)) as u8)
        .collect())
}

/// 8-bit augmented map.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedDtm {
    pub j: Vec<u8>,
    pub rows: usize,
    pub cols: usize,
    pub params: FlmParams,
    /// FLM steps run; 0 when the input was constant and bypassed.
    pub steps: usize,
    /// Set when the input was constant and the FLM was bypassed.
    pub degenerate_input: bool,
}

impl AugmentedDtm {
    /// `J / 255` as a DTM-shaped real map.
    pub fn to_dtm<S: Scalar>(&self) -> Dtm<S> {
        Dtm {
            data: self.j.iter().map(|&v| S::of(f64::from(v) / 255.0)).collect(),
            rows: self.rows,
            cols: self.cols,
            doppler_hz_per_bin: 1.0,
            sec_per_frame: 1.0,
        }
    }
}

/// Normalize, run the FLM, reverse and quantize.
pub fn augment<S: Scalar>(dtm: &Dtm<S>, params: &FlmParams) -> Result<AugmentedDtm> {
    let (j, steps, degenerate_input) = match normalize_dtm(dtm, params.eps_norm) {
        Ok(stimulus) => {
            let t = run_flm(&stimulus, params)?;
            (quantize(&invert_time(&t)?)?, t.steps, false)
        }
        Err(Error::Degenerate(_)) => {
            log::warn!("constant {}x{} DTM; FLM bypassed", dtm.rows, dtm.cols);
            params.validate()?;
            (vec![255; dtm.rows * dtm.cols], 0, true)
        }
        Err(e) => return Err(e),
    };
    Ok(AugmentedDtm {
        j,
        rows: dtm.rows,
        cols: dtm.cols,
        params: *params,
        steps,
        degenerate_input,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_params(g: f64) -> FlmParams {
        FlmParams {
            f: 0.0,
            alpha: 0.0,
            beta: 0.0,
            g,
            h: 1e4,
            eps_link: 0.0,
            eps_norm: 0.01,
            radius: 1,
            theta0: 1.0,
            n_max: 10,
        }
    }

    fn one_pixel(s: f64) -> Stimulus<f64> {
        Stimulus {
            data: vec![s],
            rows: 1,
            cols: 1,
        }
    }

    #[test]
    fn defaults_pass_refire_check() {
        FlmParams::default().validate().unwrap();
        let weak = FlmParams {
            h: 1.0,
            ..FlmParams::default()
        };
        assert!(matches!(weak.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn normalize_hand_example() {
        let dtm = Dtm::<f64>::new(2, 2, vec![0.0, 5.0, 10.0, 10.0], 1.0, 1.0).unwrap();
        let s = normalize_dtm(&dtm, 0.01).unwrap();
        let expect = [0.01, 0.51, 1.01, 1.01];
        for (a, b) in s.data.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        let flat = Dtm::<f64>::new(1, 3, vec![2.0; 3], 1.0, 1.0).unwrap();
        assert!(matches!(normalize_dtm(&flat, 0.01), Err(Error::Degenerate(_))));
    }

    #[test]
    fn stencil_radius_one_and_two() {
        let w = linking_weights::<f64>(1);
        assert_eq!(w.len(), 8);
        assert_eq!(w.iter().filter(|l| (l.weight - 1.0).abs() < 1e-15).count(), 4);
        assert_eq!(
            w.iter()
                .filter(|l| (l.weight - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12)
                .count(),
            4
        );
        assert!(w.iter().all(|l| (l.dr, l.dc) != (0, 0)));
        let w2 = linking_weights::<f64>(2);
        assert_eq!(w2.len(), 24);
        let max = w2.iter().map(|l| l.weight).fold(0.0, f64::max);
        let min = w2.iter().map(|l| l.weight).fold(f64::MAX, f64::min);
        assert_eq!(max, 1.0);
        assert!((min - 1.0 / (2.0 * 2f64.sqrt())).abs() < 1e-12);
    }

    #[test]
    fn scalar_recursion_examples() {
        let p = scalar_params(0.5);
        let t = run_flm(&one_pixel(0.6), &p).unwrap();
        assert_eq!(t.data, vec![1]);
        let t = run_flm(&one_pixel(0.3), &p).unwrap();
        assert_eq!(t.data, vec![2]);
    }

    #[test]
    fn quiet_step_is_pure_leaky_integration() {
        let p = FlmParams {
            eps_link: 0.0,
            ..FlmParams::default()
        };
        let s = Stimulus {
            data: vec![0.2, 0.4, 0.6, 0.8],
            rows: 2,
            cols: 2,
        };
        let links = linking_weights::<f64>(1);
        let mut st = FlmState::<f64>::initial(2, 2, 100.0);
        st.u = vec![1.0, 2.0, 3.0, 4.0];
        let before = st.u.clone();
        flm_step(&mut st, &s, &links, &p).unwrap();
        for i in 0..4 {
            assert_eq!(st.u[i], p.f * before[i] + (1.0 + p.alpha) * s.data[i]);
        }
    }

    #[test]
    fn invert_and_quantize_examples() {
        let t = TimeMatrix {
            data: vec![1, 3, 2, 1],
            rows: 2,
            cols: 2,
            steps: 3,
        };
        let r = invert_time(&t).unwrap();
        assert_eq!(r, vec![3, 1, 2, 3]);
        assert_eq!(quantize(&r).unwrap(), vec![255, 0, 128, 255]);
        let flat = TimeMatrix {
            data: vec![4; 6],
            rows: 2,
            cols: 3,
            steps: 4,
        };
        let r = invert_time(&flat).unwrap();
        assert_eq!(r, vec![1; 6]);
        assert_eq!(quantize(&r).unwrap(), vec![255; 6]);
    }

    #[test]
    fn unfired_entries_are_rejected() {
        let t = TimeMatrix {
            data: vec![1, 0],
            rows: 1,
            cols: 2,
            steps: 1,
        };
        assert!(matches!(invert_time(&t), Err(Error::Domain(_))));
        assert!(quantize(&[0, 1]).is_err());
    }

    #[test]
    fn incomplete_coverage_carries_partial_t() {
        let p = FlmParams {
            n_max: 2,
            ..scalar_params(0.5)
        };
        let s = Stimulus {
            data: vec![0.9, 0.05],
            rows: 1,
            cols: 2,
        };
        match run_flm(&s, &p) {
            Err(Error::IncompleteCoverage { fired, total, partial, .. }) => {
                assert_eq!((fired, total), (1, 2));
                assert_eq!(partial, vec![1, 0]);
            }
            other => panic!("expected incomplete coverage, got {other:?}"),
        }
    }

    #[test]
    fn constant_dtm_bypasses_to_all_255() {
        let flat = Dtm::<f32>::new(3, 3, vec![1.5; 9], 1.0, 1.0).unwrap();
        let a = augment(&flat, &FlmParams::default()).unwrap();
        assert!(a.degenerate_input);
        assert!(a.j.iter().all(|&v| v == 255));
    }

    #[test]
    fn uniform_stimulus_fires_together() {
        let s = Stimulus {
            data: vec![0.5f64; 25],
            rows: 5,
            cols: 5,
        };
        let t = run_flm(&s, &FlmParams::default()).unwrap();
        assert!(t.data.iter().all(|&v| v == t.data[0]));
    }
}
