//! Simulate a low-light capture of a constant scene and compare the sample
//! statistics with the analytic noise chain.
//!
//! `cargo run --release --example sensor_capture [exposure_s]`

use lensless::sensor::{simulate_capture, SensorParams};
use lensless::{SimRng, Tensor};

fn main() -> lensless::Result<()> {
    let exposure: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0.7);
    let sensor = SensorParams::default().with_exposure(exposure)?;
    let scene = Tensor::full(vec![512, 512], 0.5)?;
    let b = simulate_capture(&scene, &sensor, &mut SimRng::new(1))?;
    let mean = b.mean();
    let var = b.map(|v| (v - mean).powi(2)).mean();
    let expect = sensor.gain_per_intensity() * 0.5 + sensor.adc_baseline;
    println!("exposure {exposure}s  K={:.0}", sensor.photon_scale);
    println!("mean ADU {mean:.3} (analytic {expect:.3})  std {:.3}", var.sqrt());
    println!("range [{}, {}] of {}", b.min(), b.max(), sensor.max_level());

    let dark = simulate_capture(&Tensor::zeros(vec![512, 512])?, &sensor, &mut SimRng::new(2))?;
    let m = dark.mean();
    let s = dark.map(|v| (v - m).powi(2)).mean().sqrt();
    println!("dark frame mean {m:.3} std {s:.3} ADU (read noise {:.3} ADU before rounding)", sensor.read_noise_std * sensor.adc_gain);
    Ok(())
}
