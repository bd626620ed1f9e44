//! Lensless forward model: convolve a scene with a random-dot PSF, then
//! mosaic the result onto an RGGB Bayer grid and demosaic it back.
//!
//! `cargo run --release --example optics_forward`

use lensless::experiment::{toy_psf, toy_scene};
use lensless::optics::{convolve_fft, demosaic, mosaic, BayerMosaic};
use lensless::SimRng;

fn main() -> lensless::Result<()> {
    let scene = toy_scene(&mut SimRng::new(3), 32);
    let psf = toy_psf(9, 3)?;
    let b = convolve_fft(&scene, &psf)?;
    println!("scene {:?} -> measurement {:?}", scene.shape(), b.shape());
    println!("PSF mass {:.4}; measurement sum {:.3} vs scene sum {:.3}", psf.kernel().sum(), b.sum(), scene.sum());

    let m = mosaic(&b)?;
    let raw = m.to_raw();
    let back = BayerMosaic::from_raw(&raw)?;
    assert_eq!(back.planes(), m.planes());
    let rgb = demosaic(&m)?;
    println!("raw {:?}, planes {:?}, demosaiced {:?}", raw.shape(), m.planes().shape(), rgb.shape());
    println!("demosaic max error vs full RGB {:.4}", rgb.max_abs_diff(&b)?);
    Ok(())
}
