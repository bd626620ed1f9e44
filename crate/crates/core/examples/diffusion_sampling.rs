//! Sample a Gaussian target with the ancestral and implicit samplers driven
//! by the exact MMSE noise predictor, and compare the sample moments.
//!
//! `cargo run --release --example diffusion_sampling [chains]`

use lensless::diffusion::{ddim_sample, ddpm_sample, make_schedule};
use lensless::{SimRng, Tensor};

fn moments(x: &Tensor) -> (f64, f64) {
    let m = x.mean();
    (m, x.map(|v| (v - m).powi(2)).mean())
}

fn main() -> lensless::Result<()> {
    let chains: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let s = make_schedule(200, 1e-4, 0.02)?;
    let (m, v) = (0.5, 0.04);
    let oracle = |x: &Tensor, _: &Tensor, t: usize| {
        let ab = s.alpha_bar(t);
        let k = (1.0 - ab).sqrt() / (ab * v + 1.0 - ab);
        Ok(x.map(|xv| k * (xv - ab.sqrt() * m)))
    };
    let cond = Tensor::zeros(vec![chains])?;
    let mut rng = SimRng::new(9);
    let x_t = rng.normal_tensor(&[chains]);
    let ddpm = ddpm_sample(&oracle, &cond, x_t, &s, Some(&mut rng))?;
    println!("target mean {m} var {v}");
    println!("DDPM 200 steps: {:?}", moments(&ddpm));

    // Start the short sampler from the exact marginal at t = T.
    let ab = s.alpha_bar(200);
    let sd = (ab * v + 1.0 - ab).sqrt();
    let x_t = rng.normal_tensor(&[chains]).map(|z| ab.sqrt() * m + sd * z);
    let ddim = ddim_sample(&oracle, &cond, x_t, &s, 10, 0.0, None)?;
    println!("DDIM 10 steps:  {:?}", moments(&ddim));
    Ok(())
}
