//! PSNR and SSIM of progressively degraded copies of one scene, and an
//! aggregate report as JSON.
//!
//! `cargo run --release --example metrics_eval`

use lensless::experiment::toy_scene;
use lensless::metrics::{EvalReport, ImageScore};
use lensless::SimRng;

fn main() -> lensless::Result<()> {
    let mut rng = SimRng::new(8);
    let truth = toy_scene(&mut rng, 64);
    let mut scores = Vec::new();
    for (i, sigma) in [0.01, 0.03, 0.1].into_iter().enumerate() {
        let noisy = truth.zip_map(&rng.normal_tensor(truth.shape()), |a, n| (a + sigma * n).clamp(0.0, 1.0))?;
        let s = ImageScore::compute(format!("sigma{i}"), &noisy, &truth)?;
        println!("sigma {sigma:<5} PSNR {:6.2} dB  SSIM {:.4}", s.psnr, s.ssim);
        scores.push(s);
    }
    let report = EvalReport::from_scores(scores, serde_json::json!({ "example": "metrics_eval" }))?;
    print!("{}", report.to_json());
    Ok(())
}
