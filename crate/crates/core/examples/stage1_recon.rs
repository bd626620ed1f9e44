//! Stage-1 inversion: Wiener deconvolution against the ADMM baseline on a
//! simulated low-light capture.
//!
//! `cargo run --release --example stage1_recon [lambda]`

use lensless::datasetgen::synthesize_pair;
use lensless::experiment::{toy_psf, toy_scene};
use lensless::metrics::{psnr, ssim};
use lensless::recon::{admm_reconstruct, adu_to_intensity, scene_crop, wiener_deconv, AdmmConfig, AdmmPrior, WienerConfig};
use lensless::sensor::SensorParams;
use lensless::SimRng;

fn main() -> lensless::Result<()> {
    let lambda: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3e-2);
    let scene = toy_scene(&mut SimRng::new(11), 32);
    let psf = toy_psf(7, 2024)?;
    let sensor = SensorParams::default();
    let exposure = 0.5;
    let counts = synthesize_pair(&scene, &psf, &sensor, exposure, 5)?;
    let b = adu_to_intensity(&counts, &sensor, exposure)?;

    let w = scene_crop(&wiener_deconv(&b, &psf, &WienerConfig::with_lambda(lambda))?, &psf)?.map(|v| v.clamp(0.0, 1.0));
    println!("wiener  lambda={lambda:.0e}  PSNR {:.2} dB  SSIM {:.4}", psnr(&w, &scene, 1.0)?, ssim(&w, &scene)?);

    for prior in [AdmmPrior::Nonnegativity, AdmmPrior::AnisotropicTv] {
        let cfg = AdmmConfig { prior, rho: 1e-2, tv_weight: 2e-3, ..AdmmConfig::default() };
        let r = admm_reconstruct(&b, &psf, &cfg)?;
        let x = scene_crop(&r.image, &psf)?.map(|v| v.clamp(0.0, 1.0));
        println!(
            "admm {prior:?} x{}  PSNR {:.2} dB  SSIM {:.4}  residual {:.3} -> {:.3}",
            cfg.iterations,
            psnr(&x, &scene, 1.0)?,
            ssim(&x, &scene)?,
            r.residuals[0],
            r.residuals.last().unwrap()
        );
    }
    Ok(())
}
