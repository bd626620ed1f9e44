//! Stage-1 inversion of the optics: Wiener filtering, range projection, ADMM
//! and region-of-interest cropping.
//!
//! Reconstructions live on the measurement grid. The OTF is built from the
//! PSF circularly shifted so its center pixel sits at the origin, which puts
//! the recovered scene in the middle of that grid; [`scene_crop`] cuts it
//! back out.

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::fft::{irfft2, rfft2_padded};
use crate::optics::{convolve_fft, Psf};
use crate::sensor::SensorParams;
use crate::tensor::Tensor;

/// `|H|²` at or below this fraction of its peak counts as a zero bin.
const SINGULAR_RATIO: f64 = 1e-20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WienerConfig {
    /// Noise-to-signal regularizer, `≥ 0`.
    pub lambda: f64,
    /// Use each PSF plane for its own channel. When false a multi-plane PSF
    /// is averaged into one.
    pub per_channel: bool,
}

impl Default for WienerConfig {
    fn default() -> Self {
        WienerConfig {
            lambda: 50_000.0,
            per_channel: true,
        }
    }
}

impl WienerConfig {
    /// Stronger regularization for noisier scenes.
    pub fn high_noise() -> Self {
        WienerConfig {
            lambda: 80_000.0,
            ..Self::default()
        }
    }

    pub fn with_lambda(lambda: f64) -> Self {
        WienerConfig {
            lambda,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(invalid!("wiener lambda must be finite and >= 0, got {}", self.lambda));
        }
        Ok(())
    }
}

/// OTF of `k` on an `h × w` circular grid with the PSF center at the origin.
fn centered_otf(k: &[f64], kh: usize, kw: usize, h: usize, w: usize) -> Result<Vec<Complex64>> {
    if kh > h || kw > w {
        return Err(shape_err!("PSF {kh}x{kw} larger than the {h}x{w} grid"));
    }
    let (cr, cc) = ((kh - 1) / 2, (kw - 1) / 2);
    let mut grid = vec![0.0; h * w];
    for p in 0..kh {
        for q in 0..kw {
            let r = (p + h - cr) % h;
            let c = (q + w - cc) % w;
            grid[r * w + c] += k[p * kw + q];
        }
    }
    Ok(rfft2_padded(&grid, h, w, h, w))
}

fn psf_planes(psf: &Psf, channels: usize, per_channel: bool) -> Result<Vec<Vec<f64>>> {
    if per_channel || psf.channels() == 1 {
        return (0..channels).map(|c| Ok(psf.plane_for(c, channels)?.to_vec())).collect();
    }
    let n = psf.channels();
    let len = psf.kernel().plane(0)?.len();
    let mut avg = vec![0.0; len];
    for c in 0..n {
        for (a, v) in avg.iter_mut().zip(psf.kernel().plane(c)?) {
            *a += v / n as f64;
        }
    }
    Ok(vec![avg; channels])
}

fn is_centered_delta(k: &[f64], kh: usize, kw: usize) -> bool {
    let mid = ((kh - 1) / 2) * kw + (kw - 1) / 2;
    k.iter().enumerate().all(|(i, &v)| if i == mid { v == 1.0 } else { v == 0.0 })
}

/// `x̂ = IFFT( B · conj(H) / (λ + |H|²) )` per channel, real part.
pub fn wiener_deconv(b: &Tensor, psf: &Psf, cfg: &WienerConfig) -> Result<Tensor> {
    cfg.validate()?;
    let (c, _, _) = b.image_dims()?;
    let (kh, kw) = psf.dims();
    let kernels = psf_planes(psf, c, cfg.per_channel)?;
    let mut ch = 0;
    let out = b.map_planes(|plane, h, w| {
        let k = &kernels[ch];
        ch += 1;
        if is_centered_delta(k, kh, kw) {
            // The OTF is identically 1, so the filter is a scalar.
            return Ok((plane.iter().map(|v| v / (1.0 + cfg.lambda)).collect(), h, w));
        }
        let otf = centered_otf(k, kh, kw, h, w)?;
        let peak = otf.iter().map(|z| z.norm_sqr()).fold(0.0, f64::max);
        if cfg.lambda == 0.0 && otf.iter().any(|z| z.norm_sqr() <= SINGULAR_RATIO * peak) {
            return Err(Error::Numerical("singular inverse; increase lambda".into()));
        }
        let fb = rfft2_padded(plane, h, w, h, w);
        let spec = fb
            .into_iter()
            .zip(&otf)
            .map(|(bv, hv)| bv * hv.conj() / (cfg.lambda + hv.norm_sqr()))
            .collect();
        Ok((irfft2(spec, h, w), h, w))
    })?;
    if !out.all_finite() {
        return Err(Error::Numerical("Wiener output is not finite".into()));
    }
    Ok(out)
}

/// `x⁺ = crop(Wiener(Hx))`, the component of `x` the optics can see.
pub fn range_project(x: &Tensor, psf: &Psf, cfg: &WienerConfig) -> Result<Tensor> {
    let b = convolve_fft(x, psf)?;
    scene_crop(&wiener_deconv(&b, psf, cfg)?, psf)
}

/// Region of interest. Offsets default to a central crop.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roi {
    pub height: usize,
    pub width: usize,
    pub top: Option<usize>,
    pub left: Option<usize>,
}

impl Roi {
    pub fn central(height: usize, width: usize) -> Self {
        Roi {
            height,
            width,
            top: None,
            left: None,
        }
    }

    /// Resolved `(top, left)` inside an `h × w` image.
    pub fn offsets(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.height == 0 || self.width == 0 {
            return Err(invalid!("ROI must be non-empty"));
        }
        if self.height > h || self.width > w {
            return Err(invalid!("ROI {}x{} exceeds image {h}x{w}", self.height, self.width));
        }
        let top = self.top.unwrap_or((h - self.height) / 2);
        let left = self.left.unwrap_or((w - self.width) / 2);
        if top + self.height > h || left + self.width > w {
            return Err(invalid!("ROI at ({top}, {left}) runs past image {h}x{w}"));
        }
        Ok((top, left))
    }
}

pub fn crop_roi(image: &Tensor, roi: &Roi) -> Result<Tensor> {
    let (_, h, w) = image.image_dims()?;
    let (top, left) = roi.offsets(h, w)?;
    image.map_planes(|p, _, _| {
        let mut out = Vec::with_capacity(roi.height * roi.width);
        for r in top..top + roi.height {
            out.extend_from_slice(&p[r * w + left..r * w + left + roi.width]);
        }
        Ok((out, roi.height, roi.width))
    })
}

/// Cut the scene-sized center out of a measurement-grid reconstruction.
pub fn scene_crop(image: &Tensor, psf: &Psf) -> Result<Tensor> {
    let (_, h, w) = image.image_dims()?;
    let (kh, kw) = psf.dims();
    if h < kh || w < kw {
        return Err(shape_err!("image {h}x{w} smaller than PSF {kh}x{kw}"));
    }
    crop_roi(image, &Roi::central(h - kh + 1, w - kw + 1))
}

/// Digital counts to stage-1 intensity units: `(b − b_l) / (d η K · t / 0.7)`.
/// The exposure time is taken from capture metadata.
pub fn adu_to_intensity(b: &Tensor, sensor: &SensorParams, exposure_s: f64) -> Result<Tensor> {
    let scaled = sensor.with_exposure(exposure_s)?;
    let gain = scaled.gain_per_intensity();
    Ok(b.map(|v| (v - sensor.adc_baseline) / gain))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdmmPrior {
    Nonnegativity,
    AnisotropicTv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdmmConfig {
    pub iterations: usize,
    /// Penalty `ρ > 0`.
    pub rho: f64,
    pub prior: AdmmPrior,
    /// TV weight `τ ≥ 0`; ignored by the nonnegativity prior.
    pub tv_weight: f64,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        AdmmConfig {
            iterations: 100,
            rho: 1e-3,
            prior: AdmmPrior::Nonnegativity,
            tv_weight: 1e-3,
        }
    }
}

impl AdmmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(invalid!("ADMM needs at least one iteration"));
        }
        if !(self.rho > 0.0) {
            return Err(invalid!("ADMM rho must be > 0, got {}", self.rho));
        }
        if !(self.tv_weight >= 0.0) {
            return Err(invalid!("TV weight must be >= 0, got {}", self.tv_weight));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct AdmmResult {
    pub image: Tensor,
    /// `‖Hx_k − b‖` after each iteration.
    pub residuals: Vec<f64>,
}

fn circ_apply(x: &[f64], otf: &[Complex64], h: usize, w: usize, adjoint: bool) -> Vec<f64> {
    let f = rfft2_padded(x, h, w, h, w);
    irfft2(
        f.into_iter()
            .zip(otf)
            .map(|(a, k)| if adjoint { a * k.conj() } else { a * k })
            .collect(),
        h,
        w,
    )
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Circular forward differences `(Dx_v, Dx_h)`.
fn grad(x: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let mut dv = vec![0.0; h * w];
    let mut dh = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            dv[i] = x[((r + 1) % h) * w + c] - x[i];
            dh[i] = x[r * w + (c + 1) % w] - x[i];
        }
    }
    (dv, dh)
}

/// `Dᵀ(gv, gh)`.
fn grad_adjoint(gv: &[f64], gh: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            out[i] = gv[((r + h - 1) % h) * w + c] - gv[i] + gh[r * w + (c + w - 1) % w] - gh[i];
        }
    }
    out
}

fn soft(v: f64, t: f64) -> f64 {
    v.signum() * (v.abs() - t).max(0.0)
}

fn admm_plane(b: &[f64], k: &[f64], kh: usize, kw: usize, h: usize, w: usize, cfg: &AdmmConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    let otf = centered_otf(k, kh, kw, h, w)?;
    let n = h * w;
    let htb = circ_apply(b, &otf, h, w, true);
    let initial = norm(b).max(f64::MIN_POSITIVE);
    let rho = cfg.rho;
    let mut residuals = Vec::with_capacity(cfg.iterations);

    let solve = |rhs: &[f64], denom: &[f64]| -> Vec<f64> {
        let f = rfft2_padded(rhs, h, w, h, w);
        irfft2(f.into_iter().zip(denom).map(|(a, d)| a / *d).collect(), h, w)
    };
    let check = |res: f64, it: usize| -> Result<()> {
        if !res.is_finite() || res > 1e6 * initial {
            return Err(Error::Numerical(format!("ADMM diverged at iteration {it}: residual {res:.3e}")));
        }
        Ok(())
    };
    let residual = |x: &[f64]| {
        let hx = circ_apply(x, &otf, h, w, false);
        norm(&hx.iter().zip(b).map(|(a, c)| a - c).collect::<Vec<_>>())
    };

    match cfg.prior {
        AdmmPrior::Nonnegativity => {
            let denom: Vec<f64> = otf.iter().map(|z| z.norm_sqr() + rho).collect();
            let mut z = vec![0.0; n];
            let mut u = vec![0.0; n];
            for it in 0..cfg.iterations {
                let rhs: Vec<f64> = (0..n).map(|i| htb[i] + rho * (z[i] - u[i])).collect();
                let x = solve(&rhs, &denom);
                for i in 0..n {
                    z[i] = (x[i] + u[i]).max(0.0);
                    u[i] += x[i] - z[i];
                }
                let res = residual(&z);
                check(res, it)?;
                residuals.push(res);
            }
            Ok((z, residuals))
        }
        AdmmPrior::AnisotropicTv => {
            // |FFT of the circular difference stencils|².
            let mut delta = vec![0.0; n];
            delta[0] = 1.0;
            let (dv, dh) = grad(&delta, h, w);
            let lap: Vec<f64> = rfft2_padded(&dv, h, w, h, w)
                .iter()
                .zip(rfft2_padded(&dh, h, w, h, w))
                .map(|(a, b)| a.norm_sqr() + b.norm_sqr())
                .collect();
            let denom: Vec<f64> = otf.iter().zip(&lap).map(|(z, l)| z.norm_sqr() + rho * l + 1e-12).collect();
            let t = cfg.tv_weight / rho;
            let (mut zv, mut zh) = (vec![0.0; n], vec![0.0; n]);
            let (mut uv, mut uh) = (vec![0.0; n], vec![0.0; n]);
            let mut x = vec![0.0; n];
            for it in 0..cfg.iterations {
                let av: Vec<f64> = (0..n).map(|i| zv[i] - uv[i]).collect();
                let ah: Vec<f64> = (0..n).map(|i| zh[i] - uh[i]).collect();
                let dt = grad_adjoint(&av, &ah, h, w);
                let rhs: Vec<f64> = (0..n).map(|i| htb[i] + rho * dt[i]).collect();
                x = solve(&rhs, &denom);
                let (gv, gh) = grad(&x, h, w);
                for i in 0..n {
                    zv[i] = soft(gv[i] + uv[i], t);
                    zh[i] = soft(gh[i] + uh[i], t);
                    uv[i] += gv[i] - zv[i];
                    uh[i] += gh[i] - zh[i];
                }
                let res = residual(&x);
                check(res, it)?;
                residuals.push(res);
            }
            Ok((x, residuals))
        }
    }
}

/// Scaled-form ADMM for `½‖Hx − b‖² + prior(x)` on the measurement grid.
/// Residuals of multi-channel inputs are summed in quadrature.
pub fn admm_reconstruct(b: &Tensor, psf: &Psf, cfg: &AdmmConfig) -> Result<AdmmResult> {
    cfg.validate()?;
    let (c, _, _) = b.image_dims()?;
    let (kh, kw) = psf.dims();
    let mut per_channel: Vec<Vec<f64>> = Vec::with_capacity(c);
    let mut ch = 0;
    let image = b.map_planes(|plane, h, w| {
        let k = psf.plane_for(ch, c)?;
        ch += 1;
        let (x, res) = admm_plane(plane, k, kh, kw, h, w, cfg)?;
        per_channel.push(res);
        Ok((x, h, w))
    })?;
    let residuals = (0..cfg.iterations)
        .map(|i| per_channel.iter().map(|r| r[i] * r[i]).sum::<f64>().sqrt())
        .collect();
    Ok(AdmmResult { image, residuals })
}
