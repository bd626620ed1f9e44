use serde::{Deserialize, Serialize};

use super::{ddim_timesteps, DiffusionSchedule, EpsNet};
use crate::enhance::{loss_recon, ConvFeatures, LossConfig};
use crate::error::{invalid, shape_err, Error, Result};
use crate::nn::{Adam, AdamConfig, Bound, Ema, ParamStore};
use crate::rng::SimRng;
use crate::tensor::{Tape, Tensor, Var};

/// One training pair in the diffusion space.
#[derive(Clone, Debug, PartialEq)]
pub struct EpsilonSample {
    /// Condition `s`, `[C_s, H, W]`.
    pub cond: Tensor,
    /// Clean target `x₀`, `[C, H, W]`.
    pub x0: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub ema_rate: f64,
    /// Every this many steps the batch also runs a differentiable implicit
    /// rollout scored by the reconstruction loss; 0 disables it.
    pub recon_every: usize,
    pub rollout_steps: usize,
    /// Rollout output `z` is compared as `scale·z + shift`.
    pub rollout_scale: f64,
    pub rollout_shift: f64,
    pub loss: LossConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch_size: 16,
            adam: AdamConfig::default(),
            ema_rate: 0.9999,
            recon_every: 10,
            rollout_steps: 10,
            rollout_scale: 0.5,
            rollout_shift: 0.5,
            loss: LossConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParamStore,
    pub ema: ParamStore,
    /// ε-prediction loss per step.
    pub losses: Vec<f64>,
    /// `(step, reconstruction loss)` of every rollout step.
    pub recon_losses: Vec<(usize, f64)>,
}

fn stack(items: impl Iterator<Item = Tensor>, shape: &[usize], n: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(n * shape.iter().product::<usize>());
    for t in items {
        if t.shape() != shape {
            return Err(shape_err!("batch item {:?} vs {:?}", t.shape(), shape));
        }
        data.extend_from_slice(t.data());
    }
    let mut full = vec![n];
    full.extend_from_slice(shape);
    Tensor::new(full, data)
}

/// Deterministic implicit sampler recorded on a tape, so losses on its output
/// reach the predictor parameters.
pub fn ddim_rollout_taped<'t>(
    net: &EpsNet,
    b: &Bound<'t>,
    tape: &'t Tape,
    x_t: Tensor,
    cond: Var<'t>,
    s: &DiffusionSchedule,
    steps: usize,
) -> Result<Var<'t>> {
    let ts = ddim_timesteps(s.steps(), steps)?;
    let n = x_t.shape()[0];
    let mut x = tape.constant(x_t);
    for (i, &t) in ts.iter().enumerate().rev() {
        let prev = if i == 0 { 0 } else { ts[i - 1] };
        let eps = net.forward(tape, b, x, cond, &vec![t; n])?;
        let (ab, ap) = (s.alpha_bar(t), s.alpha_bar(prev));
        let c_x = (ap / ab).sqrt();
        let c_e = (1.0 - ap).sqrt() - (ap * (1.0 - ab) / ab).sqrt();
        x = x.scale(c_x).add(eps.scale(c_e))?;
    }
    Ok(x)
}

/// Minimize `E‖ε − ε_θ(√ᾱ_t x₀ + √(1 − ᾱ_t) ε, s, t)‖²` with Adam, keeping
/// an EMA shadow of the weights.
pub fn train_epsilon(
    net: &EpsNet,
    data: &[EpsilonSample],
    s: &DiffusionSchedule,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if data.is_empty() || cfg.batch_size == 0 {
        return Err(invalid!("training needs data and a positive batch size"));
    }
    if cfg.recon_every > 0 {
        cfg.loss.validate()?;
        ddim_timesteps(s.steps(), cfg.rollout_steps)?;
    }
    let (xs, cs) = (data[0].x0.shape().to_vec(), data[0].cond.shape().to_vec());
    let fx = ConvFeatures::new(cfg.loss.feature_seed);
    let mut rng = SimRng::new(cfg.seed);
    let mut model = net.clone();
    let mut opt = Adam::new(cfg.adam.clone(), &model.params)?;
    let mut ema = Ema::new(cfg.ema_rate, &model.params)?;
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut recon_losses = Vec::new();
    let bs = cfg.batch_size;

    for step in 0..cfg.steps {
        let idx: Vec<usize> = (0..bs).map(|_| rng.below(data.len())).collect();
        let ts: Vec<usize> = (0..bs).map(|_| 1 + rng.below(s.steps())).collect();
        let x0 = stack(idx.iter().map(|&i| data[i].x0.clone()), &xs, bs)?;
        let cond = stack(idx.iter().map(|&i| data[i].cond.clone()), &cs, bs)?;
        let eps = rng.normal_tensor(x0.shape());
        let per = x0.numel() / bs;
        let mut xt = Vec::with_capacity(x0.numel());
        for (k, &t) in ts.iter().enumerate() {
            let (a, c) = (s.alpha_bar(t).sqrt(), (1.0 - s.alpha_bar(t)).sqrt());
            let r = k * per..(k + 1) * per;
            xt.extend(x0.data()[r.clone()].iter().zip(&eps.data()[r]).map(|(x, e)| a * x + c * e));
        }
        let xt = Tensor::new(x0.shape().to_vec(), xt)?;
        let rollout_noise = (cfg.recon_every > 0 && (step + 1) % cfg.recon_every == 0)
            .then(|| rng.normal_tensor(x0.shape()));

        let tape = Tape::new();
        let b = model.params.bind(&tape);
        let cond_v = tape.constant(cond);
        let pred = model.forward(&tape, &b, tape.constant(xt), cond_v, &ts)?;
        let eps_loss = pred.sub(tape.constant(eps))?.square().mean();
        let lv = eps_loss.value().item()?;
        if !lv.is_finite() {
            return Err(Error::Numerical(format!("training loss not finite at step {step}")));
        }
        let mut total = eps_loss;
        if let Some(noise) = rollout_noise {
            let z = ddim_rollout_taped(&model, &b, &tape, noise, cond_v, s, cfg.rollout_steps)?;
            let img = z.scale(cfg.rollout_scale).add_scalar(cfg.rollout_shift);
            let target = x0.scale(cfg.rollout_scale).add_scalar(cfg.rollout_shift);
            let rl = loss_recon(&tape, img, tape.constant(target), &cfg.loss, &fx)?;
            let rv = rl.value().item()?;
            if !rv.is_finite() {
                return Err(Error::Numerical(format!("rollout loss not finite at step {step}")));
            }
            recon_losses.push((step, rv));
            total = total.add(rl)?;
        }
        let g = tape.backward(total)?;
        opt.step(&mut model.params, &b.grads(&g))?;
        ema.update(&model.params)?;
        losses.push(lv);
    }
    Ok(TrainOutcome {
        params: model.params,
        ema: ema.into_shadow(),
        losses,
        recon_losses,
    })
}
