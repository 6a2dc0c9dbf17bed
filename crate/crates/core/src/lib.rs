//! Radar-based human motion direction determination.
//!
//! * [`sim`] synthesizes labelled gait echoes,
//! * [`pipeline`] turns echo cubes into Doppler-time maps,
//! * [`flm`] augments those maps with a feature linking model,
//! * [`model`] is the hybrid attention/convolution classifier with its own
//!   reverse-mode differentiation and training loop,
//! * [`dataset`] and [`formats`] handle manifests and on-disk containers,
//! * [`harness`] wires everything into reproducible experiments.
//!
//! Numeric code is generic over [`Scalar`]; the aliases below fix the
//! precision used in practice.

pub mod dataset;
pub mod error;
pub mod flm;
pub mod formats;
pub mod harness;
pub mod model;
pub mod pipeline;
pub mod scalar;
pub mod seeds;
pub mod sim;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type RadarCube32 = sim::RadarCube<f32>;
pub type RadarCube64 = sim::RadarCube<f64>;
pub type Dtm32 = pipeline::Dtm<f32>;
pub type Dtm64 = pipeline::Dtm<f64>;
pub type Tensor32 = model::Tensor<f32>;
pub type Tensor64 = model::Tensor<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
