//! Stage 2: Haar split of the stage-1 image, conditional diffusion on the
//! coarsest low band, attention refinement of the detail bands, and
//! recombination. Also the training losses for both branches.

mod hfnet;
mod losses;

pub use hfnet::{hf_forward, stack_bands, train_hf, unstack_bands, HfNetConfig, HfNetParams, HfTrainConfig, BANDS};
pub use losses::{
    gaussian_1d, loss_hf, loss_recon, loss_total, ssim_taped, ssim_window, tv_taped, ConvFeatures, FeatureExtractor,
    LossConfig, FEATURE_WIDTH, SSIM_K1, SSIM_K2, SSIM_SIGMA,
};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::{ddim_sample, make_schedule, DiffusionSchedule, EpsNet, EpsilonSample, NoisePredictor};
use crate::error::{invalid, shape_err, Error, Result};
use crate::rng::SimRng;
use crate::tensor::{check_scalar_fn, GradCheckReport, Tensor};
use crate::wavelet::{dwt2_multi, idwt_multi, Pyramid};

/// Which detail levels pass through the HF network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HfRouting {
    /// Only the coarsest level (the one whose LL is diffused).
    #[default]
    Coarsest,
    /// Every level of the pyramid.
    AllLevels,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Config {
    pub levels: usize,
    pub sample_steps: usize,
    pub eta: f64,
    pub routing: HfRouting,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            levels: 2,
            sample_steps: 10,
            eta: 0.0,
            routing: HfRouting::Coarsest,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(invalid!("stage 2 needs at least one wavelet level"));
        }
        if self.sample_steps == 0 {
            return Err(invalid!("stage 2 needs at least one sampling step"));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(invalid!("eta must be finite and >= 0, got {}", self.eta));
        }
        Ok(())
    }
}

/// Orthonormal Haar scales the mean by 2 per level; this maps an image in
/// `[0, 1]` to a latent in `[-1, 1]`.
pub fn ll_to_latent(ll: &Tensor, levels: usize) -> Tensor {
    let k = 2.0 / (1u64 << levels) as f64;
    ll.map(|v| k * v - 1.0)
}

pub fn latent_to_ll(z: &Tensor, levels: usize) -> Tensor {
    let k = (1u64 << levels) as f64 / 2.0;
    z.map(|v| k * (v + 1.0))
}

/// `[H, W]` or `[C, H, W]` → `[C, 1, H, W]` (channels as a batch).
fn channels_as_batch(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.image_dims()?;
    x.reshape(vec![c, 1, h, w])
}

fn refine_level(p: &mut Pyramid, k: usize, net: &HfNetParams) -> Result<()> {
    let lvl = &mut p.levels[k];
    let [lh, hl, hh] = hf_forward([&lvl.lh, &lvl.hl, &lvl.hh], net)?;
    lvl.lh = lh;
    lvl.hl = hl;
    lvl.hh = hh;
    Ok(())
}

fn routed_levels(cfg: &Stage2Config) -> std::ops::Range<usize> {
    match cfg.routing {
        HfRouting::Coarsest => cfg.levels - 1..cfg.levels,
        HfRouting::AllLevels => 0..cfg.levels,
    }
}

/// Enhance a stage-1 image (`[H, W]` or `[C, H, W]`, values nominally in
/// `[0, 1]`). The initial latent noise comes from `rng`; the sampler itself
/// is deterministic when `eta = 0`.
pub fn stage2_with(
    x_init: &Tensor,
    predictor: &dyn NoisePredictor,
    hf: &HfNetParams,
    schedule: &DiffusionSchedule,
    cfg: &Stage2Config,
    rng: &mut SimRng,
) -> Result<Tensor> {
    cfg.validate()?;
    if !x_init.all_finite() {
        return Err(Error::Numerical("stage-1 image contains non-finite values".into()));
    }
    let mut pyr = dwt2_multi(x_init, cfg.levels)?;
    let ll = pyr.ll().clone();
    let cond = channels_as_batch(&ll_to_latent(&ll, cfg.levels))?;
    let x_t = rng.normal_tensor(cond.shape());
    let z = if cfg.eta > 0.0 {
        ddim_sample(predictor, &cond, x_t, schedule, cfg.sample_steps, cfg.eta, Some(rng))?
    } else {
        ddim_sample(predictor, &cond, x_t, schedule, cfg.sample_steps, 0.0, None)?
    };
    pyr = pyr.with_ll(latent_to_ll(&z, cfg.levels).reshape(ll.shape().to_vec())?)?;
    for k in routed_levels(cfg) {
        refine_level(&mut pyr, k, hf)?;
    }
    Ok(idwt_multi(&pyr)?.map(|v| v.clamp(0.0, 1.0)))
}

/// Trained stage-2 components.
#[derive(Clone, Debug, PartialEq)]
pub struct Stage2Model {
    pub eps: EpsNet,
    pub hf: HfNetParams,
    pub schedule: DiffusionSchedule,
    pub cfg: Stage2Config,
}

#[derive(Serialize, Deserialize)]
struct Stage2Meta {
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    stage2: Stage2Config,
}

pub const STAGE2_FILE: &str = "stage2.json";

impl Stage2Model {
    pub fn enhance(&self, x_init: &Tensor, rng: &mut SimRng) -> Result<Tensor> {
        stage2_with(x_init, &self.eps, &self.hf, &self.schedule, &self.cfg, rng)
    }

    /// Writes `eps/`, `hf/` and `stage2.json` under `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        self.eps.save(dir.join("eps"))?;
        self.hf.save(dir.join("hf"))?;
        let t = self.schedule.steps();
        let meta = Stage2Meta {
            steps: t,
            beta_start: self.schedule.beta(1),
            beta_end: self.schedule.beta(t),
            stage2: self.cfg.clone(),
        };
        let path = dir.join(STAGE2_FILE);
        let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(STAGE2_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: Stage2Meta =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        meta.stage2.validate()?;
        let eps = EpsNet::load(dir.join("eps"))?;
        if eps.cfg.data_channels != 1 || eps.cfg.cond_channels != 1 {
            return Err(Error::Format(format!("{}: stage 2 needs a single-channel predictor", dir.display())));
        }
        Ok(Stage2Model {
            eps,
            hf: HfNetParams::load(dir.join("hf"))?,
            schedule: make_schedule(meta.steps, meta.beta_start, meta.beta_end)?,
            cfg: meta.stage2,
        })
    }
}

/// Training samples for the LL predictor: one per channel, condition from
/// the stage-1 image and target from the ground truth.
pub fn latent_samples(x_init: &Tensor, gt: &Tensor, levels: usize) -> Result<Vec<EpsilonSample>> {
    if x_init.shape() != gt.shape() {
        return Err(shape_err!("stage-1 {:?} vs ground truth {:?}", x_init.shape(), gt.shape()));
    }
    let cond = ll_to_latent(dwt2_multi(x_init, levels)?.ll(), levels);
    let x0 = ll_to_latent(dwt2_multi(gt, levels)?.ll(), levels);
    let (c, h, w) = cond.image_dims()?;
    (0..c)
        .map(|ch| {
            Ok(EpsilonSample {
                cond: Tensor::new(vec![1, h, w], cond.plane(ch)?.to_vec())?,
                x0: Tensor::new(vec![1, h, w], x0.plane(ch)?.to_vec())?,
            })
        })
        .collect()
}

/// `(input, target)` detail-band stacks `[3, h, w]` per channel for the
/// levels selected by `cfg.routing`.
pub fn hf_pairs(x_init: &Tensor, gt: &Tensor, cfg: &Stage2Config) -> Result<Vec<(Tensor, Tensor)>> {
    if x_init.shape() != gt.shape() {
        return Err(shape_err!("stage-1 {:?} vs ground truth {:?}", x_init.shape(), gt.shape()));
    }
    let (pi, pg) = (dwt2_multi(x_init, cfg.levels)?, dwt2_multi(gt, cfg.levels)?);
    let mut out = Vec::new();
    for k in routed_levels(cfg) {
        let a = stack_bands(pi.levels[k].high_bands())?;
        let b = stack_bands(pg.levels[k].high_bands())?;
        let &[c, _, h, w] = a.shape() else { unreachable!() };
        let n = BANDS * h * w;
        for ch in 0..c {
            out.push((
                Tensor::new(vec![BANDS, h, w], a.data()[ch * n..(ch + 1) * n].to_vec())?,
                Tensor::new(vec![BANDS, h, w], b.data()[ch * n..(ch + 1) * n].to_vec())?,
            ));
        }
    }
    Ok(out)
}

/// Finite-difference checks of every training loss term, the ε-prediction
/// loss through a small predictor, and the HF network.
pub fn loss_gradcheck_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = SimRng::new(seed);
    let x = rng.uniform_tensor(&[1, 2, 8, 8], 0.0, 1.0);
    let y = rng.uniform_tensor(&[1, 2, 8, 8], 0.0, 1.0);
    let fx = ConvFeatures::new(seed);
    let only = |w1, w2, w3| LossConfig { w1, w2, w3, ..LossConfig::default() };
    let mut out = Vec::new();
    for (name, cfg) in [
        ("loss_recon.mae", only(1.0, 0.0, 0.0)),
        ("loss_recon.ssim", only(0.0, 1.0, 0.0)),
        ("loss_recon.features", only(0.0, 0.0, 1.0)),
        ("loss_recon", LossConfig::default()),
    ] {
        out.push(check_scalar_fn(name, std::slice::from_ref(&y), |tape, v| {
            loss_recon(tape, v[0], tape.constant(x.clone()), &cfg, &fx)
        })?);
    }
    let h = rng.normal_tensor(&[1, 3, 6, 6]);
    let g = rng.normal_tensor(&[1, 3, 6, 6]);
    for (name, cfg) in [
        ("loss_hf.mse", LossConfig { w5: 0.0, ..LossConfig::default() }),
        ("loss_hf.tv", LossConfig { w4: 0.0, ..LossConfig::default() }),
        ("loss_hf", LossConfig::default()),
    ] {
        out.push(check_scalar_fn(name, std::slice::from_ref(&g), |tape, v| loss_hf(tape, v[0], tape.constant(h.clone()), &cfg))?);
    }
    let parts = [rng.normal_tensor(&[1]), rng.normal_tensor(&[1]), rng.normal_tensor(&[1])];
    out.push(check_scalar_fn("loss_total", &parts, |_, v| Ok(loss_total(&[v[0], v[1], v[2]])?.sum()))?);

    let net = EpsNet::new(
        crate::diffusion::EpsNetConfig { width: 2, window: 2, total_steps: 20, ..Default::default() },
        &mut rng,
    )?;
    let xt = rng.normal_tensor(&[2, 1, 4, 4]);
    let cond = rng.normal_tensor(&[2, 1, 4, 4]);
    let eps = rng.normal_tensor(&[2, 1, 4, 4]);
    out.push(check_scalar_fn("loss_eps", net.params.tensors(), |tape, vars| {
        let b = net.params.bind_vars(vars)?;
        let pred = net.forward(tape, &b, tape.constant(xt.clone()), tape.constant(cond.clone()), &[3, 17])?;
        Ok(pred.sub(tape.constant(eps.clone()))?.square().mean())
    })?);

    let mut hf = HfNetParams::new(HfNetConfig { width: 2, window: 3 }, &mut rng)?;
    for i in 0..BANDS {
        hf.params.set(&format!("post{i}.pw"), rng.normal_tensor(&[1, 2, 1, 1]))?;
        hf.params.set(&format!("lin{i}.dw"), rng.normal_tensor(&[1, 3, 3]).scale(0.3))?;
    }
    let w = rng.normal_tensor(&[1, 3, 6, 6]);
    let mut inputs = vec![h.clone()];
    inputs.extend(hf.params.tensors().iter().cloned());
    out.push(check_scalar_fn("hf_forward", &inputs, |tape, vars| {
        let b = hf.params.bind_vars(&vars[1..])?;
        Ok(hf.forward(tape, &b, vars[0])?.mul(tape.constant(w.clone()))?.sum())
    })?);
    Ok(out)
}
