//! Command-line front end. Every subcommand takes `--config <file.json>` and
//! repeated `--set key=value` overrides; results are JSON on stdout or in
//! `--out`. Exit codes: 1 usage, 2 data, 3 numerical.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use crate::config::{key_table_text, RunConfig};
use crate::datasetgen::{build_dataset, load_measurement, DatagenConfig, DatasetManifest, Split, MANIFEST_FILE};
use crate::diffusion::{ddim_sample, train_epsilon, EpsNet, EpsilonSample, NoisePredictor, TrainConfig};
use crate::enhance::{hf_pairs, latent_samples, latent_to_ll, ll_to_latent, loss_gradcheck_suite, train_hf, HfNetParams, HfTrainConfig, Stage2Model, STAGE2_FILE};
use crate::error::{Error, ErrorClass, Result};
use crate::experiment::{exposure_sweep, stage1, toy_psf, train_toy, ToyModel};
use crate::imageio::{load_image, read_png_counts, save_image};
use crate::metrics::{EvalReport, ImageScore};
use crate::optics::Psf;
use crate::recon::{admm_reconstruct, adu_to_intensity, scene_crop, wiener_deconv, AdmmConfig, WienerConfig};
use crate::rng::SimRng;
use crate::tensor::{llt1, primitive_suite, Tensor};
use crate::wavelet::dwt2_multi;

#[derive(Parser, Debug)]
#[command(name = "lensless", version, about = "Low-light lensless imaging pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct ConfigArgs {
    /// JSON config file overlaid on the defaults.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Dotted-key override, e.g. `wiener.lambda=80000`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        RunConfig::build(self.config.as_deref(), &self.set)
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Method {
    Wiener,
    Admm,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize a paired dataset from a directory of scenes.
    Datagen {
        #[arg(long)]
        src: PathBuf,
        /// PSF (LLT1). Defaults to `psf.path`, else the toy PSF.
        #[arg(long)]
        psf: Option<PathBuf>,
        /// Exposure time in seconds (0.7 is the reference).
        #[arg(long)]
        exposure: Option<f64>,
        /// Noise seed; defaults to `sensor.seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Stage-1 reconstruction of one measurement (PNG counts or LLT1).
    Reconstruct {
        #[arg(long, value_enum, default_value = "wiener")]
        method: Method,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        psf: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        /// Exposure of the capture in seconds; defaults to `datagen.exposure_s`.
        #[arg(long)]
        exposure: Option<f64>,
        /// Image output (`.png` or `.llt1`).
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train stage 2 on a dataset, or the toy model with `--toy`.
    Train {
        #[arg(long, required_unless_present = "toy")]
        data: Option<PathBuf>,
        #[arg(long, conflicts_with = "data")]
        toy: bool,
        /// Checkpoint directory.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Stage-2 enhancement of a stage-1 image.
    Enhance {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Ground truth; adds per-stage scores to the `.json` sidecar.
        #[arg(long)]
        gt: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score predictions `<pred>/<id>.png` against a dataset manifest.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long, value_enum)]
        split: Option<SplitArg>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Finite-difference gradient checks; exits 3 if any check fails.
    Gradcheck {
        /// Include every loss term, not just the tensor primitives.
        #[arg(long)]
        all: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Noise schedule table, one row per step `t = 1..=T`.
    ScheduleDump {
        #[arg(long = "T", value_name = "T")]
        steps: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Toy-corpus exposure sweep: one stage-2 report per exposure.
    SweepExposure {
        /// Exposure times in seconds; the relative factor is `t / 0.7`.
        #[arg(long, value_delimiter = ',', default_values_t = [0.3, 0.5, 0.7])]
        factors: Vec<f64>,
        /// Toy checkpoint from `train --toy`; trained on the fly if absent.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Draw one latent with the implicit sampler.
    Sample {
        /// Stage-2 or toy checkpoint directory, or a bare predictor.
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        eta: Option<f64>,
        /// Stage-1 image whose low band conditions the sampler.
        #[arg(long)]
        cond: Option<PathBuf>,
        /// Latent side length when no condition image is given.
        #[arg(long, default_value_t = 8)]
        size: usize,
        /// LLT1 output of the low band (image units).
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn exit_code(e: &Error) -> i32 {
    match e.class() {
        ErrorClass::Usage => 1,
        ErrorClass::Data => 2,
        ErrorClass::Numerical => 3,
    }
}

fn command() -> clap::Command {
    let table = key_table_text();
    Cli::command().mut_subcommands(|s| s.after_help(table.clone()))
}

/// Parse `args` (including the program name), run, and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 1;
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            exit_code(&e)
        }
    }
}

fn emit(out: Option<&Path>, v: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(v).map_err(|e| Error::Format(e.to_string()))? + "\n";
    match out {
        Some(p) => {
            ensure_parent(p)?;
            std::fs::write(p, text).map_err(|e| Error::io(p, e))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn ensure_parent(p: &Path) -> Result<()> {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => std::fs::create_dir_all(d).map_err(|e| Error::io(d, e)),
        _ => Ok(()),
    }
}

fn to_value<S: serde::Serialize>(s: &S) -> Value {
    serde_json::to_value(s).expect("serializable")
}

fn load_counts(path: &Path) -> Result<Tensor> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
        Ok(read_png_counts(path)?.0)
    } else {
        llt1::load(path)
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Datagen { src, psf, exposure, seed, out, cfg } => {
            let cfg = cfg.load()?;
            let psf = match psf.or_else(|| cfg.psf.path.as_ref().map(PathBuf::from)) {
                Some(p) => Psf::load(p)?,
                None => toy_psf(cfg.toy.psf_size, cfg.toy.seed)?,
            };
            let gen = DatagenConfig {
                sensor: cfg.sensor.clone(),
                exposure_s: exposure.unwrap_or(cfg.datagen.exposure_s),
                seed: seed.unwrap_or(cfg.sensor.seed),
                train_fraction: cfg.datagen.train_fraction,
            };
            let m = build_dataset(&src, &out, &psf, &gen)?;
            emit(
                None,
                &json!({
                    "out": out.display().to_string(),
                    "manifest": MANIFEST_FILE,
                    "items": m.items.len(),
                    "train": m.split(Split::Train).count(),
                    "test": m.split(Split::Test).count(),
                    "exposure_s": m.exposure_s,
                }),
            )
        }
        Command::Reconstruct { method, lambda, iters, psf, input, exposure, out, cfg } => {
            let cfg = cfg.load()?;
            let psf = Psf::load(&psf)?;
            let exposure_s = exposure.unwrap_or(cfg.datagen.exposure_s);
            let b = adu_to_intensity(&load_counts(&input)?, &cfg.sensor, exposure_s)?;
            let (x, info) = match method {
                Method::Wiener => {
                    let w = WienerConfig { lambda: lambda.unwrap_or(cfg.wiener.lambda), ..cfg.wiener.clone() };
                    w.validate()?;
                    (wiener_deconv(&b, &psf, &w)?, json!({ "method": "wiener", "lambda": w.lambda }))
                }
                Method::Admm => {
                    let a = AdmmConfig { iterations: iters.unwrap_or(cfg.admm.iterations), ..cfg.admm.clone() };
                    let r = admm_reconstruct(&b, &psf, &a)?;
                    let info = json!({ "method": "admm", "admm": to_value(&a), "final_residual": r.residuals.last() });
                    (r.image, info)
                }
            };
            let x = scene_crop(&x, &psf)?.map(|v| v.clamp(0.0, 1.0));
            if !x.all_finite() {
                return Err(Error::Numerical("reconstruction is not finite".into()));
            }
            ensure_parent(&out)?;
            save_image(&out, &x)?;
            let mut info = info;
            info["out"] = json!(out.display().to_string());
            info["shape"] = json!(x.shape());
            info["exposure_s"] = json!(exposure_s);
            emit(None, &info)
        }
        Command::Train { data, toy, out, cfg } => {
            let cfg = cfg.load()?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let summary = if toy {
                let model = train_toy(&cfg.toy, &cfg.sensor)?;
                model.save(&out)?;
                json!({
                    "kind": "toy",
                    "lambda": model.wiener.0.iter().map(|(e, w)| json!({ "exposure_s": e, "lambda": w.lambda })).collect::<Vec<_>>(),
                    "eps_final_loss": model.eps_losses.last(),
                    "hf_final_loss": model.hf_losses.last(),
                })
            } else {
                let data = data.expect("clap requires --data without --toy");
                let (model, eps_losses, hf_losses, n) = train_on_dataset(&data, &cfg)?;
                model.save(&out)?;
                json!({
                    "kind": "stage2",
                    "train_items": n,
                    "eps_final_loss": eps_losses.last(),
                    "hf_final_loss": hf_losses.last(),
                })
            };
            std::fs::write(out.join("config.json"), cfg.to_json()).map_err(|e| Error::io(out.join("config.json"), e))?;
            emit(None, &summary)
        }
        Command::Enhance { input, ckpt, out, gt, cfg } => {
            let cfg = cfg.load()?;
            let model = load_stage2(&ckpt)?;
            let x1 = load_image(&input)?.map(|v| v.clamp(0.0, 1.0));
            let x2 = model.enhance(&x1, &mut SimRng::new(cfg.seed))?;
            ensure_parent(&out)?;
            save_image(&out, &x2)?;
            let mut side = json!({ "in": input.display().to_string(), "out": out.display().to_string(), "seed": cfg.seed });
            if let Some(gt) = gt {
                let truth = load_image(&gt)?;
                side["stage1"] = to_value(&ImageScore::compute("stage1", &x1, &truth)?);
                side["stage2"] = to_value(&ImageScore::compute("stage2", &x2, &truth)?);
            }
            emit(Some(&out.with_extension("json")), &side)?;
            emit(None, &side)
        }
        Command::Eval { manifest, pred, split, out, cfg } => {
            cfg.load()?;
            let dir = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
            let m = DatasetManifest::load(&manifest)?;
            let report = crate::metrics::evaluate_pairs(&m, &dir, &pred, split.map(Split::from))?;
            write_report(out.as_deref(), &report)
        }
        Command::Gradcheck { all, out, cfg } => {
            let cfg = cfg.load()?;
            let mut reports = primitive_suite(cfg.seed)?;
            if all {
                reports.extend(loss_gradcheck_suite(cfg.seed)?);
            }
            let failed: Vec<String> = reports.iter().filter(|r| !r.passed).map(|r| r.name.clone()).collect();
            emit(
                out.as_deref(),
                &json!({ "checks": reports.len(), "failed": failed, "reports": to_value(&reports) }),
            )?;
            if failed.is_empty() {
                Ok(())
            } else {
                Err(Error::Numerical(format!("gradient check failed: {}", failed.join(", "))))
            }
        }
        Command::ScheduleDump { steps, out, cfg } => {
            let cfg = cfg.load()?;
            let mut d = cfg.diffusion.clone();
            if let Some(t) = steps {
                d.steps = t;
            }
            let s = d.schedule()?;
            let rows: Vec<Value> = (1..=s.steps())
                .map(|t| {
                    json!({
                        "t": t,
                        "beta": s.beta(t),
                        "alpha": s.alpha(t),
                        "alpha_bar": s.alpha_bar(t),
                        "posterior_var": s.posterior_var(t),
                    })
                })
                .collect();
            emit(out.as_deref(), &Value::Array(rows))
        }
        Command::SweepExposure { factors, ckpt, out, cfg } => {
            let cfg = cfg.load()?;
            let model = match ckpt {
                Some(dir) => ToyModel::load(dir)?,
                None => train_toy(&cfg.toy, &cfg.sensor)?,
            };
            let results = exposure_sweep(&model, &cfg.toy, &factors)?;
            let reports: Vec<Value> = results
                .iter()
                .map(|r| {
                    let mut v = to_value(&r.stage2);
                    v["config"]["exposure_s"] = json!(r.exposure_s);
                    v["config"]["factor"] = json!(r.factor);
                    v["config"]["stage1"] = json!({
                        "mean_mse": r.stage1.mean_mse,
                        "mean_psnr": r.stage1.mean_psnr,
                        "mean_ssim": r.stage1.mean_ssim,
                    });
                    v
                })
                .collect();
            emit(out.as_deref(), &Value::Array(reports))
        }
        Command::Sample { ckpt, steps, eta, cond, size, out, cfg } => {
            let cfg = cfg.load()?;
            let (eps, schedule, levels, default_steps, default_eta) = match load_stage2(&ckpt) {
                Ok(m) => (m.eps, m.schedule, m.cfg.levels, m.cfg.sample_steps, m.cfg.eta),
                Err(_) => (EpsNet::load(&ckpt)?, cfg.diffusion.schedule()?, cfg.stage2.levels, cfg.stage2.sample_steps, cfg.stage2.eta),
            };
            let (steps, eta) = (steps.unwrap_or(default_steps), eta.unwrap_or(default_eta));
            let c = eps.cfg.cond_channels;
            let cond = match cond {
                Some(p) => {
                    let ll = ll_to_latent(dwt2_multi(&load_image(&p)?, levels)?.ll(), levels);
                    let (ch, h, w) = ll.image_dims()?;
                    ll.reshape(vec![ch, c, h, w])?
                }
                None => Tensor::zeros(vec![1, c, size, size])?,
            };
            let mut rng = SimRng::new(cfg.seed);
            let shape = [cond.shape()[0], eps.cfg.data_channels, cond.shape()[2], cond.shape()[3]];
            let x_t = rng.normal_tensor(&shape);
            let p: &dyn NoisePredictor = &eps;
            let z = ddim_sample(p, &cond, x_t, &schedule, steps, eta, if eta > 0.0 { Some(&mut rng) } else { None })?;
            let ll = latent_to_ll(&z, levels);
            ensure_parent(&out)?;
            llt1::save(&out, &ll)?;
            emit(None, &json!({ "out": out.display().to_string(), "shape": ll.shape(), "steps": steps, "eta": eta }))
        }
    }
}

fn write_report(out: Option<&Path>, r: &EvalReport) -> Result<()> {
    match out {
        Some(p) => {
            ensure_parent(p)?;
            std::fs::write(p, r.to_json()).map_err(|e| Error::io(p, e))
        }
        None => {
            print!("{}", r.to_json());
            Ok(())
        }
    }
}

/// A stage-2 checkpoint directory, or a toy checkpoint holding one in `stage2/`.
fn load_stage2(dir: &Path) -> Result<Stage2Model> {
    if dir.join(STAGE2_FILE).exists() {
        Stage2Model::load(dir)
    } else {
        Stage2Model::load(dir.join("stage2"))
    }
}

type Trained = (Stage2Model, Vec<f64>, Vec<f64>, usize);

/// Stage-1 reconstructions of the training split feed both stage-2 branches.
fn train_on_dataset(data: &Path, cfg: &RunConfig) -> Result<Trained> {
    let manifest = DatasetManifest::load(data.join(MANIFEST_FILE))?;
    manifest.validate(data)?;
    let psf = Psf::load(data.join(&manifest.psf))?;
    let mut eps_data: Vec<EpsilonSample> = Vec::new();
    let mut hf_data = Vec::new();
    let mut n = 0;
    for item in manifest.split(Split::Train) {
        let x1 = stage1(&load_measurement(data, item)?, &psf, &manifest.sensor, manifest.exposure_s, &cfg.wiener)?;
        let gt = load_image(data.join(&item.scene))?;
        eps_data.extend(latent_samples(&x1, &gt, cfg.stage2.levels)?);
        hf_data.extend(hf_pairs(&x1, &gt, &cfg.stage2)?);
        n += 1;
    }
    if n == 0 {
        return Err(Error::Format(format!("{}: no training items", data.display())));
    }
    let schedule = cfg.diffusion.schedule()?;
    let m = &cfg.model;
    if m.data_channels != 1 || m.cond_channels != 1 || m.total_steps != cfg.diffusion.steps {
        return Err(Error::Config(format!(
            "stage 2 needs model.data_channels = model.cond_channels = 1 and model.total_steps = diffusion.steps ({})",
            cfg.diffusion.steps
        )));
    }
    let net = EpsNet::new(m.clone(), &mut SimRng::derive(cfg.seed, 4))?;
    let train_cfg = TrainConfig { seed: SimRng::derive(cfg.seed, 6).next_u64() ^ cfg.train.seed, ..cfg.train.clone() };
    let outcome = train_epsilon(&net, &eps_data, &schedule, &train_cfg)?;
    let eps = EpsNet { cfg: net.cfg.clone(), params: outcome.ema };
    let mut hf = HfNetParams::new(cfg.hf.clone(), &mut SimRng::derive(cfg.seed, 5))?;
    let hf_cfg = HfTrainConfig { seed: SimRng::derive(cfg.seed, 7).next_u64() ^ cfg.hf_train.seed, ..cfg.hf_train.clone() };
    let hf_losses = train_hf(&mut hf, &hf_data, &cfg.train.loss, &hf_cfg)?;
    Ok((Stage2Model { eps, hf, schedule, cfg: cfg.stage2.clone() }, outcome.losses, hf_losses, n))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> i32 {
        run(std::iter::once("lensless").chain(args.iter().copied()))
    }

    #[test]
    fn usage_errors_exit_1() {
        assert_eq!(run_args(&["nope"]), 1);
        assert_eq!(run_args(&["schedule-dump", "--set", "wiener.lamda=1"]), 1);
        assert_eq!(run_args(&["schedule-dump", "--T", "0"]), 1);
        assert_eq!(run_args(&["--help"]), 0);
    }

    #[test]
    fn data_errors_exit_2() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("none.json");
        let m = missing.to_str().unwrap();
        assert_eq!(run_args(&["eval", "--manifest", m, "--pred", m]), 2);
    }

    #[test]
    fn help_lists_keys_on_every_subcommand() {
        let mut cmd = command();
        for sub in cmd.get_subcommands_mut() {
            let help = sub.render_help().to_string();
            assert!(help.contains("wiener.lambda") && help.contains("sensor.read_std"), "{}", sub.get_name());
        }
    }

    #[test]
    fn schedule_dump_rows() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("s.json");
        assert_eq!(run_args(&["schedule-dump", "--T", "200", "--out", out.to_str().unwrap()]), 0);
        let v: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
        let rows = v.as_array().unwrap();
        assert_eq!(rows.len(), 200);
        assert_eq!(rows[0]["t"], 1);
        assert_eq!(rows[0]["posterior_var"].as_f64().unwrap(), 0.0);
    }
}
