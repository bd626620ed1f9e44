//! Low-light CMOS measurement chain.
//!
//! Scene intensity `x ∈ [0, 1]` becomes a stored digital image through
//!
//! ```text
//! b_p = K·x                      photon flux
//! b_e = η·Poisson(b_p)           shot noise, then quantum efficiency
//! b_r = b_e + N(0, σ²)           read noise
//! b_a = d·b_r + b_l              ADC gain and baseline
//! b   = Quantize(b_a)            clamp to [0, 2^bits − 1], round
//! ```
//!
//! The quantum efficiency multiplies the Poisson draw rather than thinning
//! it; the variance of `b_e` is therefore `η²·b_p`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng::{SimRng, DEFAULT_POISSON_CROSSOVER};
use crate::tensor::Tensor;

/// Reference exposure time in seconds at which `photon_scale` applies.
pub const REFERENCE_EXPOSURE_S: f64 = 0.7;

/// Values inside this distance of `[0, 1]` are clamped instead of rejected,
/// absorbing FFT round-off in simulated scenes.
const INTENSITY_SLACK: f64 = 1e-9;

/// Noise-chain constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorParams {
    /// `K`: photons per unit intensity.
    #[serde(rename = "k")]
    pub photon_scale: f64,
    /// `η` in `(0, 1]`.
    #[serde(rename = "qe")]
    pub quantum_efficiency: f64,
    /// `σ` in electrons.
    #[serde(rename = "read_std")]
    pub read_noise_std: f64,
    /// `d`: digital units per electron.
    #[serde(rename = "adu")]
    pub adc_gain: f64,
    /// `b_l`: digital offset.
    #[serde(rename = "baseline")]
    pub adc_baseline: f64,
    #[serde(rename = "bits")]
    pub bit_depth: u32,
    /// Noise seed for captures made from the command line.
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Poisson means at or above this use the Gaussian approximation.
    #[serde(default = "default_crossover")]
    pub poisson_crossover: f64,
}

fn default_seed() -> u64 {
    42
}

fn default_crossover() -> f64 {
    DEFAULT_POISSON_CROSSOVER
}

impl Default for SensorParams {
    /// Camera used for the simulated low-light dataset: 1000 photons at full
    /// intensity, QE 0.7, read noise 2.63 e⁻, 0.23 ADU/e⁻, baseline 4.48 ADU,
    /// 8-bit output.
    fn default() -> Self {
        SensorParams {
            photon_scale: 1000.0,
            quantum_efficiency: 0.7,
            read_noise_std: 2.63,
            adc_gain: 0.23,
            adc_baseline: 4.48,
            bit_depth: 8,
            seed: default_seed(),
            poisson_crossover: DEFAULT_POISSON_CROSSOVER,
        }
    }
}

impl SensorParams {
    pub fn validate(&self) -> Result<()> {
        let p = self;
        if !(p.photon_scale > 0.0) {
            return Err(invalid!("photon_scale must be > 0, got {}", p.photon_scale));
        }
        if !(p.quantum_efficiency > 0.0 && p.quantum_efficiency <= 1.0) {
            return Err(invalid!("quantum_efficiency must be in (0, 1], got {}", p.quantum_efficiency));
        }
        if !(p.read_noise_std >= 0.0) {
            return Err(invalid!("read_noise_std must be >= 0, got {}", p.read_noise_std));
        }
        if !(p.adc_gain > 0.0) {
            return Err(invalid!("adc_gain must be > 0, got {}", p.adc_gain));
        }
        if !(p.adc_baseline >= 0.0) {
            return Err(invalid!("adc_baseline must be >= 0, got {}", p.adc_baseline));
        }
        if !(1..=16).contains(&p.bit_depth) {
            return Err(invalid!("bit_depth must be in 1..=16, got {}", p.bit_depth));
        }
        if !(p.poisson_crossover > 0.0) {
            return Err(invalid!("poisson_crossover must be > 0"));
        }
        Ok(())
    }

    pub fn max_level(&self) -> f64 {
        ((1u32 << self.bit_depth) - 1) as f64
    }

    /// Expected ADU per unit scene intensity before clamping: `d·η·K`.
    pub fn gain_per_intensity(&self) -> f64 {
        self.adc_gain * self.quantum_efficiency * self.photon_scale
    }

    /// Same sensor at a different exposure time; `K` scales with `t / 0.7 s`.
    pub fn with_exposure(&self, exposure_s: f64) -> Result<Self> {
        if !(exposure_s > 0.0) {
            return Err(invalid!("exposure time must be positive, got {exposure_s}"));
        }
        Ok(SensorParams {
            photon_scale: self.photon_scale * exposure_s / REFERENCE_EXPOSURE_S,
            ..self.clone()
        })
    }
}

pub fn photon_flux(x: &Tensor, params: &SensorParams) -> Result<Tensor> {
    if let Some(bad) = x
        .data()
        .iter()
        .find(|v| !(**v >= -INTENSITY_SLACK && **v <= 1.0 + INTENSITY_SLACK))
    {
        return Err(invalid!("scene intensity {bad} outside [0, 1]"));
    }
    Ok(x.map(|v| params.photon_scale * v.clamp(0.0, 1.0)))
}

pub fn capture_electrons(photons: &Tensor, params: &SensorParams, rng: &mut SimRng) -> Result<Tensor> {
    if let Some(bad) = photons.data().iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(invalid!("Poisson mean must be finite and non-negative, got {bad}"));
    }
    let eta = params.quantum_efficiency;
    Ok(photons.map(|lambda| eta * rng.poisson_with_crossover(lambda, params.poisson_crossover)))
}

pub fn add_read_noise(electrons: &Tensor, params: &SensorParams, rng: &mut SimRng) -> Tensor {
    if params.read_noise_std == 0.0 {
        return electrons.clone();
    }
    let sigma = params.read_noise_std;
    electrons.map(|v| v + sigma * rng.normal())
}

pub fn digitize(b: &Tensor, params: &SensorParams) -> Tensor {
    b.map(|v| params.adc_gain * v + params.adc_baseline)
}

/// Clamp to the ADC range and round half away from zero.
pub fn quantize(b: &Tensor, params: &SensorParams) -> Tensor {
    let top = params.max_level();
    b.map(|v| v.clamp(0.0, top).round())
}

/// Full chain from scene intensity to a quantized capture.
pub fn simulate_capture(x: &Tensor, params: &SensorParams, rng: &mut SimRng) -> Result<Tensor> {
    params.validate()?;
    let photons = photon_flux(x, params)?;
    let electrons = capture_electrons(&photons, params, rng)?;
    let read = add_read_noise(&electrons, params, rng);
    Ok(quantize(&digitize(&read, params), params))
}
