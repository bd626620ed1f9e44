//! End-to-end runs of the `lensless` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lensless::experiment::toy_scene;
use lensless::imageio::save_image;
use lensless::tensor::llt1;
use lensless::{SimRng, Tensor};
use serde_json::Value;

fn lensless(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lensless")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Value {
    let out = lensless(args);
    assert_eq!(out.status.code(), Some(0), "{args:?}\n{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    serde_json::from_str(&text).unwrap_or(Value::Null)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn scenes(dir: &Path, n: usize, size: usize) {
    std::fs::create_dir_all(dir).unwrap();
    let mut rng = SimRng::new(77);
    for i in 0..n {
        save_image(dir.join(format!("scene{i:02}.png")), &toy_scene(&mut rng, size)).unwrap();
    }
}

/// Every file under `dir`, relative path and bytes, sorted.
fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, d: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        for e in std::fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(dir, dir, &mut out);
    out.sort();
    out
}

const TINY: &[&str] = &[
    "--set", "model.width=4",
    "--set", "model.window=4",
    "--set", "model.total_steps=20",
    "--set", "diffusion.steps=20",
    "--set", "train.steps=3",
    "--set", "train.batch_size=2",
    "--set", "train.recon_every=2",
    "--set", "train.rollout_steps=2",
    "--set", "hf.width=2",
    "--set", "hf.window=4",
    "--set", "hf_train.steps=3",
    "--set", "hf_train.batch_size=2",
    "--set", "stage2.sample_steps=2",
    "--set", "wiener.lambda=0.03",
];

#[test]
fn dataset_to_report_pipeline_is_reproducible() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    scenes(&r.join("src"), 10, 16);
    let data = r.join("data");
    let info = ok(&["datagen", "--src", s(&r.join("src")), "--exposure", "0.5", "--seed", "42", "--out", s(&data)]);
    assert_eq!(info["items"], 10);
    assert_eq!(info["test"], 1);
    ok(&["datagen", "--src", s(&r.join("src")), "--exposure", "0.5", "--seed", "42", "--out", s(&r.join("data2"))]);
    assert_eq!(tree(&data), tree(&r.join("data2")));

    let psf = data.join("psf.llt1");
    let meas = data.join("measurements/scene00.png");
    let w = ok(&[
        "reconstruct", "--method", "wiener", "--lambda", "0.03", "--psf", s(&psf), "--in", s(&meas),
        "--exposure", "0.5", "--out", s(&r.join("w.png")),
    ]);
    assert_eq!(w["shape"], serde_json::json!([3, 16, 16]));
    let a = ok(&[
        "reconstruct", "--method", "admm", "--iters", "20", "--psf", s(&psf), "--in", s(&meas),
        "--exposure", "0.5", "--out", s(&r.join("a.llt1")),
    ]);
    assert_eq!(a["admm"]["iterations"], 20);

    let mut train: Vec<&str> = vec!["train", "--data", s(&data)];
    train.extend(TINY);
    let ck1 = r.join("ck1");
    let ck2 = r.join("ck2");
    let mut t1 = train.clone();
    t1.extend(["--out", s(&ck1)]);
    let mut t2 = train.clone();
    t2.extend(["--out", s(&ck2)]);
    assert_eq!(ok(&t1)["train_items"], 9);
    ok(&t2);
    assert_eq!(tree(&ck1), tree(&ck2));

    // Enhance every test item and score the predictions.
    let m: Value = serde_json::from_str(&std::fs::read_to_string(data.join("manifest.json")).unwrap()).unwrap();
    let pred = r.join("pred");
    for item in m["items"].as_array().unwrap().iter().filter(|i| i["split"] == "test") {
        let id = item["id"].as_str().unwrap();
        let x1 = r.join(format!("{id}_s1.png"));
        ok(&[
            "reconstruct", "--psf", s(&psf), "--in", s(&data.join(item["measurement"].as_str().unwrap())),
            "--exposure", "0.5", "--lambda", "0.03", "--out", s(&x1),
        ]);
        let out = pred.join(format!("{id}.png"));
        let side = ok(&[
            "enhance", "--in", s(&x1), "--ckpt", s(&ck1), "--out", s(&out),
            "--gt", s(&data.join(item["scene"].as_str().unwrap())),
        ]);
        assert!(side["stage1"]["psnr"].as_f64().unwrap() > 5.0);
        assert!(side["stage2"]["ssim"].as_f64().is_some());
        let stored: Value = serde_json::from_str(&std::fs::read_to_string(out.with_extension("json")).unwrap()).unwrap();
        assert_eq!(stored, side);
    }
    let report = r.join("report.json");
    ok(&["eval", "--manifest", s(&data.join("manifest.json")), "--pred", s(&pred), "--split", "test", "--out", s(&report)]);
    let rep: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(rep["count"], 1);
    assert!(rep["mean_psnr"].as_f64().unwrap() > 5.0);

    let z = r.join("z.llt1");
    let info = ok(&["sample", "--ckpt", s(&ck1), "--steps", "2", "--cond", s(&r.join("w.png")), "--out", s(&z)]);
    assert_eq!(info["shape"], serde_json::json!([3, 1, 4, 4]));
    assert!(llt1::load(&z).unwrap().all_finite());
}

#[test]
fn toy_checkpoint_drives_the_exposure_sweep() {
    let root = tempfile::tempdir().unwrap();
    let ck = root.path().join("toy");
    let tiny = [
        "--set", "toy.n_train=4", "--set", "toy.n_test=2", "--set", "toy.size=8", "--set", "toy.psf_size=3",
        "--set", "toy.diffusion_steps=20", "--set", "toy.eps_net.total_steps=20", "--set", "toy.eps_net.width=4",
        "--set", "toy.eps_train.steps=2", "--set", "toy.eps_train.batch_size=2", "--set", "toy.eps_train.rollout_steps=2",
        "--set", "toy.hf_net.width=2", "--set", "toy.hf_net.window=4", "--set", "toy.hf_train.steps=2",
        "--set", "toy.hf_train.batch_size=2", "--set", "toy.stage2.sample_steps=2", "--set", "toy.lambda_grid=[0.01,0.03]",
    ];
    let mut train = vec!["train", "--toy", "--out", s(&ck)];
    train.extend(tiny);
    let info = ok(&train);
    assert_eq!(info["kind"], "toy");
    let out = root.path().join("sweep.json");
    let mut sweep = vec!["sweep-exposure", "--factors", "0.3,0.5,0.7", "--ckpt", s(&ck), "--out", s(&out)];
    sweep.extend(tiny);
    ok(&sweep);
    let reports: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let reports = reports.as_array().unwrap();
    assert_eq!(reports.len(), 3);
    for (r, e) in reports.iter().zip([0.3, 0.5, 0.7]) {
        assert_eq!(r["count"], 2);
        assert_eq!(r["config"]["exposure_s"], e);
        assert!(r["mean_psnr"].as_f64().unwrap().is_finite());
        assert!(r["config"]["stage1"]["mean_psnr"].as_f64().is_some());
    }
    let again = root.path().join("sweep2.json");
    let mut sweep = vec!["sweep-exposure", "--factors", "0.3,0.5,0.7", "--ckpt", s(&ck), "--out", s(&again)];
    sweep.extend(tiny);
    ok(&sweep);
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn gradcheck_and_schedule_dump() {
    let v = ok(&["gradcheck", "--all"]);
    assert_eq!(v["failed"], serde_json::json!([]));
    assert!(v["checks"].as_u64().unwrap() >= 30);
    let rows = ok(&["schedule-dump", "--T", "200"]);
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 200);
    assert_eq!(rows[0]["posterior_var"].as_f64(), Some(0.0));
    assert!(rows[199]["alpha_bar"].as_f64().unwrap() < 0.2);
}

#[test]
fn exit_codes_follow_error_class() {
    let root = tempfile::tempdir().unwrap();
    let r = root.path();
    // Usage.
    assert_eq!(lensless(&["schedule-dump", "--set", "wiener.lamda=5"]).status.code(), Some(1));
    assert_eq!(lensless(&["reconstruct"]).status.code(), Some(1));
    let bad = lensless(&["schedule-dump", "--set", "psf.frozen=false"]);
    assert_eq!(bad.status.code(), Some(1));
    let msg = String::from_utf8_lossy(&bad.stderr);
    assert_eq!(msg.trim().lines().count(), 1, "{msg}");
    // Data.
    let missing = r.join("missing.llt1");
    assert_eq!(
        lensless(&["reconstruct", "--psf", s(&missing), "--in", s(&missing), "--out", s(&r.join("x.png"))]).status.code(),
        Some(2)
    );
    // Numerical.
    let psf = r.join("psf.llt1");
    llt1::save(&psf, &Tensor::new(vec![3, 3], vec![0.0, 0.1, 0.0, 0.1, 0.6, 0.1, 0.0, 0.1, 0.0]).unwrap()).unwrap();
    let meas = r.join("nan.llt1");
    let mut d = vec![5.0; 64];
    d[10] = f64::NAN;
    llt1::save(&meas, &Tensor::new(vec![8, 8], d).unwrap()).unwrap();
    let out = lensless(&["reconstruct", "--psf", s(&psf), "--in", s(&meas), "--out", s(&r.join("x.llt1"))]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn every_subcommand_help_lists_config_keys() {
    for sub in ["datagen", "reconstruct", "train", "enhance", "eval", "gradcheck", "schedule-dump", "sweep-exposure", "sample"] {
        let out = lensless(&[sub, "--help"]);
        assert_eq!(out.status.code(), Some(0));
        let text = String::from_utf8(out.stdout).unwrap();
        for key in ["sensor.k", "sensor.qe", "sensor.read_std", "sensor.adu", "sensor.baseline", "sensor.bits", "sensor.seed", "wiener.lambda"] {
            assert!(text.contains(key), "{sub} help lacks {key}");
        }
    }
}

#[test]
fn config_file_and_overrides_combine() {
    let root = tempfile::tempdir().unwrap();
    let cfg = root.path().join("run.json");
    std::fs::write(&cfg, r#"{"diffusion": {"steps": 50}}"#).unwrap();
    let rows = ok(&["schedule-dump", "--config", s(&cfg)]);
    assert_eq!(rows.as_array().unwrap().len(), 50);
    let rows = ok(&["schedule-dump", "--config", s(&cfg), "--set", "diffusion.steps=30"]);
    assert_eq!(rows.as_array().unwrap().len(), 30);
    std::fs::write(&cfg, r#"{"diffusion": {"stepz": 50}}"#).unwrap();
    assert_eq!(lensless(&["schedule-dump", "--config", s(&cfg)]).status.code(), Some(1));
}
