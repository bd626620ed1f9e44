//! Build a small paired dataset from generated scenes, then regenerate one
//! item from its manifest record and check it matches bit for bit.
//!
//! `cargo run --release --example dataset_generation [out_dir]`

use std::path::PathBuf;

use lensless::datasetgen::{build_dataset, load_measurement, regenerate, DatagenConfig, Split};
use lensless::experiment::{toy_psf, toy_scene};
use lensless::imageio::save_image;
use lensless::SimRng;

fn main() -> lensless::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("lensless_dataset"));
    let src = out.join("src");
    std::fs::create_dir_all(&src).map_err(|e| lensless::Error::Format(e.to_string()))?;
    let mut rng = SimRng::new(21);
    for i in 0..10 {
        save_image(src.join(format!("scene{i:02}.png")), &toy_scene(&mut rng, 32))?;
    }
    let psf = toy_psf(7, 21)?;
    let cfg = DatagenConfig { exposure_s: 0.3, ..DatagenConfig::default() };
    let m = build_dataset(&src, &out.join("data"), &psf, &cfg)?;
    println!(
        "{} items ({} train / {} test) at {}s in {}",
        m.items.len(),
        m.split(Split::Train).count(),
        m.split(Split::Test).count(),
        m.exposure_s,
        out.join("data").display()
    );
    let item = &m.items[0];
    let again = regenerate(&m, &out.join("data"), item)?;
    let stored = load_measurement(&out.join("data"), item)?;
    println!("item {} seed {} regenerated identically: {}", item.id, item.seed, again == stored);
    Ok(())
}
