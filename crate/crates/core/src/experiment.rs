//! Desk-scale end-to-end experiment: a synthetic corpus of small gradient and
//! blob scenes, a fixed random-dot PSF, stage-1 Wiener reconstruction with a
//! tuned regularizer, stage-2 training and an exposure sweep.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasetgen::synthesize_pair;
use crate::diffusion::{make_schedule, train_epsilon, EpsNet, EpsNetConfig, EpsilonSample, TrainConfig};
use crate::enhance::{hf_pairs, latent_samples, train_hf, HfNetConfig, HfNetParams, HfRouting, HfTrainConfig, Stage2Config, Stage2Model};
use crate::error::{invalid, Error, Result};
use crate::metrics::{EvalReport, ImageScore};
use crate::nn::AdamConfig;
use crate::optics::Psf;
use crate::recon::{adu_to_intensity, scene_crop, wiener_deconv, WienerConfig};
use crate::rng::SimRng;
use crate::sensor::SensorParams;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub size: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub psf_size: usize,
    /// Exposures (seconds) used for training measurements and the sweep.
    pub exposures: Vec<f64>,
    pub lambda_grid: Vec<f64>,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub eps_net: EpsNetConfig,
    pub eps_train: TrainConfig,
    pub hf_net: HfNetConfig,
    pub hf_train: HfTrainConfig,
    pub stage2: Stage2Config,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            size: 16,
            n_train: 200,
            n_test: 20,
            psf_size: 7,
            exposures: vec![0.3, 0.5, 0.7],
            lambda_grid: vec![1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 3e-2, 1e-1, 3e-1],
            diffusion_steps: crate::diffusion::DEFAULT_STEPS,
            beta_start: crate::diffusion::DEFAULT_BETA_START,
            beta_end: crate::diffusion::DEFAULT_BETA_END,
            eps_net: EpsNetConfig { width: 16, ..EpsNetConfig::default() },
            eps_train: TrainConfig {
                steps: 1500,
                batch_size: 32,
                adam: AdamConfig { lr: 2e-3, decay_every: 500, ..AdamConfig::default() },
                ema_rate: 0.995,
                ..TrainConfig::default()
            },
            hf_net: HfNetConfig { width: 8, window: 8 },
            hf_train: HfTrainConfig { steps: 1500, batch_size: 32, ..HfTrainConfig::default() },
            stage2: Stage2Config { routing: HfRouting::AllLevels, ..Stage2Config::default() },
            seed: 2024,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 4 || !self.size.is_multiple_of(4) {
            return Err(invalid!("toy size must be a positive multiple of 4, got {}", self.size));
        }
        if self.n_train == 0 || self.n_test == 0 {
            return Err(invalid!("toy corpus needs train and test scenes"));
        }
        if self.psf_size.is_multiple_of(2) {
            return Err(invalid!("toy PSF size must be odd, got {}", self.psf_size));
        }
        if self.exposures.is_empty() || self.lambda_grid.is_empty() {
            return Err(invalid!("toy exposures and lambda grid must be non-empty"));
        }
        let e = &self.eps_net;
        if e.data_channels != 1 || e.cond_channels != 1 || e.total_steps != self.diffusion_steps {
            return Err(invalid!("toy eps_net needs one data and one condition channel and total_steps = diffusion_steps"));
        }
        self.stage2.validate()
    }
}

/// RGB scene in `[0, 1]`: a linear color gradient plus up to three blobs.
pub fn toy_scene(rng: &mut SimRng, size: usize) -> Tensor {
    let theta = rng.uniform_range(0.0, std::f64::consts::TAU);
    let (ct, st) = (theta.cos(), theta.sin());
    let ends: Vec<(f64, f64)> = (0..3).map(|_| (rng.uniform_range(0.1, 0.8), rng.uniform_range(0.1, 0.8))).collect();
    let n_blobs = 1 + rng.below(3);
    let blobs: Vec<(f64, f64, f64, [f64; 3])> = (0..n_blobs)
        .map(|_| {
            let s = size as f64;
            (
                rng.uniform_range(0.0, s),
                rng.uniform_range(0.0, s),
                rng.uniform_range(1.5, s / 4.0),
                [0; 3].map(|_| rng.uniform_range(-0.4, 0.4)),
            )
        })
        .collect();
    let half = (size as f64 - 1.0) / 2.0;
    let reach = half * std::f64::consts::SQRT_2;
    Tensor::from_fn(vec![3, size, size], |i| {
        let (c, r, x) = (i / (size * size), (i / size) % size, i % size);
        let (dy, dx) = (r as f64 - half, x as f64 - half);
        let u = 0.5 + 0.5 * (dx * ct + dy * st) / reach;
        let mut v = ends[c].0 + (ends[c].1 - ends[c].0) * u;
        for &(br, bc, s, amp) in &blobs {
            v += amp[c] * (-((r as f64 - br).powi(2) + (x as f64 - bc).powi(2)) / (2.0 * s * s)).exp();
        }
        v.clamp(0.0, 1.0)
    })
    .expect("valid shape")
}

/// `(train, test)` scenes from independent streams of `seed`.
pub fn toy_corpus(cfg: &ToyConfig) -> (Vec<Tensor>, Vec<Tensor>) {
    let mut tr = SimRng::derive(cfg.seed, 1);
    let mut te = SimRng::derive(cfg.seed, 2);
    let train = (0..cfg.n_train).map(|_| toy_scene(&mut tr, cfg.size)).collect();
    let test = (0..cfg.n_test).map(|_| toy_scene(&mut te, cfg.size)).collect();
    (train, test)
}

/// Sparse random dots plus a central peak, normalized.
pub fn toy_psf(size: usize, seed: u64) -> Result<Psf> {
    let mut rng = SimRng::derive(seed, 3);
    let mut k: Vec<f64> = (0..size * size)
        .map(|_| if rng.uniform() < 0.3 { rng.uniform_range(0.2, 1.0) } else { 0.0 })
        .collect();
    k[(size / 2) * size + size / 2] += 1.0;
    Psf::new(Tensor::new(vec![size, size], k)?, None)
}

/// Stage-1 image from counts: normalize by the known exposure, deconvolve,
/// crop to the scene and clamp to `[0, 1]`.
pub fn stage1(meas: &Tensor, psf: &Psf, sensor: &SensorParams, exposure_s: f64, wiener: &WienerConfig) -> Result<Tensor> {
    let b = adu_to_intensity(meas, sensor, exposure_s)?;
    let x = scene_crop(&wiener_deconv(&b, psf, wiener)?, psf)?;
    Ok(x.map(|v| v.clamp(0.0, 1.0)))
}

/// One simulated capture per (scene, exposure); the seed depends on the
/// scene index, the exposure slot and the split stream.
pub fn capture_set(scenes: &[Tensor], psf: &Psf, sensor: &SensorParams, exposure_s: f64, seed: u64) -> Result<Vec<Tensor>> {
    scenes
        .iter()
        .enumerate()
        .map(|(i, s)| synthesize_pair(s, psf, sensor, exposure_s, SimRng::derive(seed, i as u64).next_u64()))
        .collect()
}

fn mean_psnr(preds: &[Tensor], truth: &[Tensor]) -> Result<f64> {
    let mut s = 0.0;
    for (p, t) in preds.iter().zip(truth) {
        s += crate::metrics::psnr(p, t, 1.0)?;
    }
    Ok(s / preds.len() as f64)
}

/// λ from `grid` maximizing mean PSNR over all `(measurement, exposure)`
/// groups. Ties keep the smaller λ.
pub fn tune_lambda(
    groups: &[(f64, Vec<Tensor>)],
    truth: &[Tensor],
    psf: &Psf,
    sensor: &SensorParams,
    grid: &[f64],
) -> Result<(f64, Vec<(f64, f64)>)> {
    let mut table = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let cfg = WienerConfig::with_lambda(lambda);
        let mut total = 0.0;
        for (exp, meas) in groups {
            let recon = meas.iter().map(|m| stage1(m, psf, sensor, *exp, &cfg)).collect::<Result<Vec<_>>>()?;
            total += mean_psnr(&recon, truth)?;
        }
        table.push((lambda, total / groups.len() as f64));
    }
    let best = table.iter().fold(table[0], |b, e| if e.1 > b.1 { *e } else { b });
    Ok((best.0, table))
}

/// Wiener settings tuned per exposure time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExposureWiener(pub Vec<(f64, WienerConfig)>);

impl ExposureWiener {
    /// Settings of the nearest tuned exposure.
    pub fn for_exposure(&self, exposure_s: f64) -> &WienerConfig {
        let d = |e: f64| (e.ln() - exposure_s.ln()).abs();
        &self.0.iter().min_by(|a, b| d(a.0).total_cmp(&d(b.0))).expect("at least one exposure").1
    }
}

/// Everything produced by [`train_toy`].
#[derive(Clone, Debug)]
pub struct ToyModel {
    pub psf: Psf,
    pub sensor: SensorParams,
    pub wiener: ExposureWiener,
    pub stage2: Stage2Model,
    /// `(exposure, [(λ, mean train PSNR)])`.
    pub lambda_table: Vec<(f64, Vec<(f64, f64)>)>,
    pub eps_losses: Vec<f64>,
    pub hf_losses: Vec<f64>,
}

fn stream(cfg: &ToyConfig, split: u64, slot: usize) -> u64 {
    SimRng::derive(cfg.seed, 100 + 10 * split + slot as u64).next_u64()
}

/// Tune λ, then fit the LL predictor and the HF network on stage-1 outputs
/// of the training scenes at every configured exposure.
pub fn train_toy(cfg: &ToyConfig, sensor: &SensorParams) -> Result<ToyModel> {
    cfg.validate()?;
    let psf = toy_psf(cfg.psf_size, cfg.seed)?;
    let (train, _) = toy_corpus(cfg);
    let groups = cfg
        .exposures
        .iter()
        .enumerate()
        .map(|(k, &e)| Ok((e, capture_set(&train, &psf, sensor, e, stream(cfg, 0, k))?)))
        .collect::<Result<Vec<_>>>()?;
    let mut wiener = Vec::with_capacity(groups.len());
    let mut lambda_table = Vec::with_capacity(groups.len());
    for g in &groups {
        let (lambda, table) = tune_lambda(std::slice::from_ref(g), &train, &psf, sensor, &cfg.lambda_grid)?;
        wiener.push((g.0, WienerConfig::with_lambda(lambda)));
        lambda_table.push((g.0, table));
    }
    let model_wiener = ExposureWiener(wiener);

    let mut eps_data: Vec<EpsilonSample> = Vec::new();
    let mut hf_data = Vec::new();
    for (e, meas) in &groups {
        let wiener = model_wiener.for_exposure(*e);
        for (m, gt) in meas.iter().zip(&train) {
            let x1 = stage1(m, &psf, sensor, *e, wiener)?;
            eps_data.extend(latent_samples(&x1, gt, cfg.stage2.levels)?);
            hf_data.extend(hf_pairs(&x1, gt, &cfg.stage2)?);
        }
    }
    let schedule = make_schedule(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end)?;
    let net_cfg = EpsNetConfig { data_channels: 1, cond_channels: 1, total_steps: cfg.diffusion_steps, ..cfg.eps_net.clone() };
    let net = EpsNet::new(net_cfg, &mut SimRng::derive(cfg.seed, 4))?;
    let train_cfg = TrainConfig { seed: stream(cfg, 2, 0) ^ cfg.eps_train.seed, ..cfg.eps_train.clone() };
    let outcome = train_epsilon(&net, &eps_data, &schedule, &train_cfg)?;
    let eps = EpsNet { cfg: net.cfg.clone(), params: outcome.ema };

    let mut hf = HfNetParams::new(cfg.hf_net.clone(), &mut SimRng::derive(cfg.seed, 5))?;
    let hf_cfg = HfTrainConfig { seed: stream(cfg, 3, 0) ^ cfg.hf_train.seed, ..cfg.hf_train.clone() };
    let hf_losses = train_hf(&mut hf, &hf_data, &cfg.eps_train.loss, &hf_cfg)?;

    Ok(ToyModel {
        psf,
        sensor: sensor.clone(),
        wiener: model_wiener,
        stage2: Stage2Model { eps, hf, schedule, cfg: cfg.stage2.clone() },
        lambda_table,
        eps_losses: outcome.losses,
        hf_losses,
    })
}

#[derive(Serialize, Deserialize)]
struct ToyMeta {
    sensor: SensorParams,
    wiener: ExposureWiener,
    lambda_table: Vec<(f64, Vec<(f64, f64)>)>,
}

pub const TOY_FILE: &str = "toy.json";

impl ToyModel {
    /// `stage2/`, `psf.llt1` and `toy.json` under `dir`. Loss histories are
    /// not stored.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        self.stage2.save(dir.join("stage2"))?;
        self.psf.save(dir.join("psf.llt1"))?;
        let meta = ToyMeta {
            sensor: self.sensor.clone(),
            wiener: self.wiener.clone(),
            lambda_table: self.lambda_table.clone(),
        };
        let path = dir.join(TOY_FILE);
        let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(TOY_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: ToyMeta = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if meta.wiener.0.is_empty() {
            return Err(Error::Format(format!("{}: no Wiener settings", path.display())));
        }
        Ok(ToyModel {
            psf: Psf::load(dir.join("psf.llt1"))?,
            sensor: meta.sensor,
            wiener: meta.wiener,
            stage2: Stage2Model::load(dir.join("stage2"))?,
            lambda_table: meta.lambda_table,
            eps_losses: Vec::new(),
            hf_losses: Vec::new(),
        })
    }
}

/// Stage-1 and stage-2 reports on the held-out scenes at one exposure.
#[derive(Clone, Debug, Serialize)]
pub struct ExposureResult {
    pub exposure_s: f64,
    pub factor: f64,
    pub stage1: EvalReport,
    pub stage2: EvalReport,
}

pub fn evaluate_exposure(model: &ToyModel, cfg: &ToyConfig, exposure_s: f64, slot: usize) -> Result<ExposureResult> {
    let (_, test) = toy_corpus(cfg);
    let meas = capture_set(&test, &model.psf, &model.sensor, exposure_s, stream(cfg, 1, slot))?;
    let (mut s1, mut s2) = (Vec::new(), Vec::new());
    for (i, (m, gt)) in meas.iter().zip(&test).enumerate() {
        let id = format!("test{i:03}");
        let x1 = stage1(m, &model.psf, &model.sensor, exposure_s, model.wiener.for_exposure(exposure_s))?;
        let mut rng = SimRng::derive(cfg.seed, 1000 + i as u64);
        let x2 = model.stage2.enhance(&x1, &mut rng)?;
        s1.push(ImageScore::compute(&id, &x1, gt)?);
        s2.push(ImageScore::compute(&id, &x2, gt)?);
    }
    let echo = serde_json::json!({ "exposure_s": exposure_s, "lambda": model.wiener.for_exposure(exposure_s).lambda, "seed": cfg.seed });
    Ok(ExposureResult {
        exposure_s,
        factor: exposure_s / crate::sensor::REFERENCE_EXPOSURE_S,
        stage1: EvalReport::from_scores(s1, serde_json::json!({ "stage": 1, "run": echo }))?,
        stage2: EvalReport::from_scores(s2, serde_json::json!({ "stage": 2, "run": echo }))?,
    })
}

/// [`evaluate_exposure`] at each exposure, in the given order.
pub fn exposure_sweep(model: &ToyModel, cfg: &ToyConfig, exposures: &[f64]) -> Result<Vec<ExposureResult>> {
    exposures
        .iter()
        .enumerate()
        .map(|(k, &e)| evaluate_exposure(model, cfg, e, k))
        .collect()
}
