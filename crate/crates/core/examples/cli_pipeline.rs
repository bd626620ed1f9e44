//! The command-line pipeline driven in-process: generate a dataset,
//! reconstruct one measurement with both methods and dump the schedule.
//!
//! `cargo run --release --example cli_pipeline`

use lensless::cli::run;
use lensless::experiment::toy_scene;
use lensless::imageio::save_image;
use lensless::SimRng;

fn main() -> lensless::Result<()> {
    let root = std::env::temp_dir().join("lensless_cli_pipeline");
    let src = root.join("src");
    std::fs::create_dir_all(&src).map_err(|e| lensless::Error::Format(e.to_string()))?;
    let mut rng = SimRng::new(5);
    for i in 0..4 {
        save_image(src.join(format!("s{i}.png")), &toy_scene(&mut rng, 24))?;
    }
    let p = |x: &std::path::Path| x.display().to_string();
    let data = root.join("data");
    let steps: Vec<Vec<String>> = vec![
        vec!["datagen".into(), "--src".into(), p(&src), "--exposure".into(), "0.5".into(), "--out".into(), p(&data)],
        vec![
            "reconstruct".into(), "--method".into(), "wiener".into(), "--lambda".into(), "0.03".into(),
            "--psf".into(), p(&data.join("psf.llt1")), "--in".into(), p(&data.join("measurements/s0.png")),
            "--exposure".into(), "0.5".into(), "--out".into(), p(&root.join("s0_wiener.png")),
        ],
        vec![
            "reconstruct".into(), "--method".into(), "admm".into(), "--iters".into(), "50".into(),
            "--psf".into(), p(&data.join("psf.llt1")), "--in".into(), p(&data.join("measurements/s0.png")),
            "--exposure".into(), "0.5".into(), "--set".into(), "admm.rho=0.01".into(), "--out".into(), p(&root.join("s0_admm.png")),
        ],
        vec!["schedule-dump".into(), "--T".into(), "5".into()],
    ];
    for args in steps {
        println!("$ lensless {}", args.join(" "));
        let code = run(std::iter::once("lensless".to_string()).chain(args));
        println!("exit {code}");
    }
    Ok(())
}
