//! Train the toy two-stage pipeline and sweep exposure on held-out scenes.
//!
//! `cargo run --release --example toy_experiment [steps]`

use std::time::Instant;

use lensless::experiment::{exposure_sweep, train_toy, ToyConfig};
use lensless::sensor::SensorParams;

fn main() -> lensless::Result<()> {
    let mut cfg = ToyConfig::default();
    let mut args = std::env::args().skip(1).map(|s| s.parse::<usize>().ok());
    if let Some(Some(steps)) = args.next() {
        cfg.eps_train.steps = steps;
    }
    if let Some(Some(steps)) = args.next() {
        cfg.hf_train.steps = steps;
    }
    let t0 = Instant::now();
    let model = train_toy(&cfg, &SensorParams::default())?;
    println!("trained in {:.1}s", t0.elapsed().as_secs_f64());
    for (e, table) in &model.lambda_table {
        let best = model.wiener.for_exposure(*e).lambda;
        let row: Vec<String> = table.iter().map(|(l, p)| format!("{l:.0e}:{p:.2}")).collect();
        println!("  {e}s -> lambda {best:.0e}  [{}]", row.join(" "));
    }
    let tail = |v: &[f64]| v[v.len().saturating_sub(50)..].iter().sum::<f64>() / v.len().min(50) as f64;
    println!("eps loss {:.4} -> {:.4}", model.eps_losses[0], tail(&model.eps_losses));
    println!("hf loss  {:.5} -> {:.5}", model.hf_losses[0], tail(&model.hf_losses));

    let results = exposure_sweep(&model, &cfg, &cfg.exposures)?;
    println!("{:>8} {:>10} {:>10} {:>8} {:>8}", "exposure", "stage1", "stage2", "ssim1", "ssim2");
    for r in &results {
        println!(
            "{:>8.1} {:>10.2} {:>10.2} {:>8.4} {:>8.4}",
            r.exposure_s, r.stage1.mean_psnr, r.stage2.mean_psnr, r.stage1.mean_ssim, r.stage2.mean_ssim
        );
    }
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
    Ok(())
}
