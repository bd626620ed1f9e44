//! Simulation and reconstruction toolkit for low-light lensless imaging.
//!
//! The pipeline has three layers:
//!
//! * **measurement** – [`sensor`] models the photon → electron → ADU chain of
//!   a CMOS sensor and [`optics`] the PSF convolution `b = Hx` plus Bayer
//!   handling; [`datasetgen`] composes them into paired datasets;
//! * **stage 1** – [`recon`] inverts the optics with Wiener filtering (and an
//!   ADMM baseline);
//! * **stage 2** – [`enhance`] splits the stage-1 image with the Haar
//!   transform in [`wavelet`], refines the low band with the conditional
//!   sampler in [`diffusion`] and the high bands with a depthwise-separable
//!   cross-attention network.
//!
//! Everything runs on the small `f64` tensor/autodiff engine in [`tensor`].
//! Quality is scored by [`metrics`]. See the crate's `examples/` directory for
//! one runnable program per capability.

pub mod config;
pub mod datasetgen;
pub mod diffusion;
pub mod enhance;
pub mod error;
pub mod experiment;
mod fft;
pub mod nn;
pub mod imageio;
pub mod metrics;
pub mod optics;
pub mod recon;
pub mod rng;
pub mod sensor;
pub mod tensor;
pub mod wavelet;

pub mod cli;

pub use error::{Error, Result};
pub use rng::SimRng;
pub use tensor::{Tape, Tensor, Var};
