//! Raw cube to Doppler-time map.
//!
//! Per channel: fast-time compression, slow-time high-pass. The channel
//! magnitudes are accumulated non-coherently to pick the target's range
//! window; each channel's coherent window sum is then transformed by the STFT
//! and the per-channel magnitude maps are summed.

mod noise;
mod range;
mod stft;

pub use noise::{degrade_snr, measured_drop_db, perturbation_power, ImagePower};
pub use range::{
    highpass_filter, mti_filter, nci, pulse_compress, select_range_cells, select_window,
    window_series, ComplexRangeMap, HighPass, RangeSlowTimeMap, RangeWindow,
};
pub use stft::{stft, Dtm, StftConfig, Window};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sim::RadarCube;

/// How the range window is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RangeSelection {
    /// Maximum slow-time energy after clutter suppression.
    MaxEnergy { width: usize },
    /// A caller-chosen bin; used for calibration and tests.
    Fixed { center: usize, width: usize },
}

impl Default for RangeSelection {
    fn default() -> Self {
        RangeSelection::MaxEnergy { width: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub stft: StftConfig,
    pub highpass: HighPass,
    pub range: RangeSelection,
    /// Output size `(rows, cols)`; `None` keeps the native STFT grid.
    pub resize: Option<(usize, usize)>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            stft: StftConfig::default(),
            highpass: HighPass::TwoPulse,
            range: RangeSelection::default(),
            resize: Some((128, 128)),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        match self.range {
            RangeSelection::MaxEnergy { width } | RangeSelection::Fixed { width, .. } if width == 0 => {
                Err(Error::Config("range window width must be >= 1".into()))
            }
            _ => Ok(()),
        }?;
        if let Some((r, c)) = self.resize {
            if r == 0 || c == 0 {
                return Err(Error::Config("resize dimensions must be >= 1".into()));
            }
        }
        Ok(())
    }
}

/// Intermediate products of one pipeline run.
#[derive(Debug, Clone)]
pub struct PipelineTrace<S> {
    pub window: RangeWindow,
    /// Channel-accumulated magnitude map after the high-pass.
    pub accumulated: RangeSlowTimeMap<S>,
    /// Native-grid DTM before any resize.
    pub native: Dtm<S>,
}

/// Run the whole chain and return the (optionally resized) DTM.
pub fn cube_to_dtm<S: Scalar>(cube: &RadarCube<S>, cfg: &PipelineConfig) -> Result<Dtm<S>> {
    let trace = cube_to_dtm_traced(cube, cfg)?;
    match cfg.resize {
        Some((r, c)) => trace.native.resize(r, c),
        None => Ok(trace.native),
    }
}

pub fn cube_to_dtm_traced<S: Scalar>(
    cube: &RadarCube<S>,
    cfg: &PipelineConfig,
) -> Result<PipelineTrace<S>> {
    cfg.validate()?;
    let filtered: Vec<ComplexRangeMap<S>> = pulse_compress(cube)?
        .iter()
        .map(|m| highpass_filter(m, cfg.highpass))
        .collect::<Result<_>>()?;
    let accumulated = nci(&filtered)?;
    let window = match cfg.range {
        RangeSelection::MaxEnergy { width } => select_window(&accumulated, width)?,
        RangeSelection::Fixed { center, width } => {
            RangeWindow::centered(center, width, accumulated.n_bins)?
        }
    };
    let mut native: Option<Dtm<S>> = None;
    for m in &filtered {
        let dtm = stft(&window_series(m, window), &cfg.stft, m.prf)?;
        match native.as_mut() {
            Some(acc) => acc.accumulate(&dtm)?,
            None => native = Some(dtm),
        }
    }
    let native = native.expect("nci guarantees at least one channel");
    if !native.is_finite() {
        return Err(Error::numeric("cube_to_dtm", "non-finite DTM"));
    }
    Ok(PipelineTrace {
        window,
        accumulated,
        native,
    })
}
