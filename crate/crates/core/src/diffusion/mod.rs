//! Denoising diffusion: noise schedule, forward process, ancestral and
//! implicit samplers, and the ε-prediction network with its training loop.
//!
//! All schedule arrays are indexed `0..=T` with `ᾱ₀ = 1`, so `t = 0` is the
//! clean sample and the reverse chain ends there.

mod model;
mod train;

pub use model::{time_embedding, EpsNet, EpsNetConfig, TIME_EMBED_DIM};
pub use train::{ddim_rollout_taped, train_epsilon, EpsilonSample, TrainConfig, TrainOutcome};

use serde::Serialize;

use crate::error::{invalid, shape_err, Error, Result};
use crate::rng::SimRng;
use crate::tensor::Tensor;

/// Linear-β schedule with its derived products.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiffusionSchedule {
    steps: usize,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    posterior_var: Vec<f64>,
}

pub const DEFAULT_STEPS: usize = 200;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// `β_t` linear from `beta_start` (t = 1) to `beta_end` (t = T).
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if steps == 0 {
        return Err(invalid!("diffusion needs T >= 1"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(invalid!("need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"));
    }
    let mut beta = vec![0.0; steps + 1];
    for (t, b) in beta.iter_mut().enumerate().skip(1) {
        *b = if steps == 1 {
            beta_start
        } else {
            beta_start + (beta_end - beta_start) * (t - 1) as f64 / (steps - 1) as f64
        };
    }
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = vec![1.0; steps + 1];
    for t in 1..=steps {
        alpha_bar[t] = alpha_bar[t - 1] * alpha[t];
    }
    let mut posterior_var = vec![0.0; steps + 1];
    for t in 1..=steps {
        posterior_var[t] = (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t]) * beta[t];
    }
    Ok(DiffusionSchedule {
        steps,
        beta,
        alpha,
        alpha_bar,
        posterior_var,
    })
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        make_schedule(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("valid defaults")
    }
}

impl DiffusionSchedule {
    /// `T`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn posterior_var(&self, t: usize) -> f64 {
        self.posterior_var[t]
    }

    fn check_t(&self, t: usize, allow_zero: bool) -> Result<()> {
        if t > self.steps || (!allow_zero && t == 0) {
            return Err(invalid!("timestep {t} outside {}..={}", if allow_zero { 0 } else { 1 }, self.steps));
        }
        Ok(())
    }
}

/// `x_t = √ᾱ_t·x₀ + √(1 − ᾱ_t)·ε`.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, s: &DiffusionSchedule) -> Result<Tensor> {
    s.check_t(t, true)?;
    let (a, b) = (s.alpha_bar[t].sqrt(), (1.0 - s.alpha_bar[t]).sqrt());
    x0.zip_map(eps, |x, e| a * x + b * e)
}

/// One forward step `x_t ~ N(√α_t·x_{t−1}, β_t I)`.
pub fn forward_step(x_prev: &Tensor, t: usize, s: &DiffusionSchedule, rng: &mut SimRng) -> Result<Tensor> {
    s.check_t(t, false)?;
    let (a, sd) = (s.alpha[t].sqrt(), s.beta[t].sqrt());
    Ok(x_prev.map(|x| a * x + sd * rng.normal()))
}

/// Reverse-step Gaussian `p(x_{t−1} | x_t)` given a noise estimate:
/// `μ = (x_t − β_t/√(1 − ᾱ_t)·ε̂) / √α_t`, variance `β̃_t`.
pub fn posterior_mean_variance(
    x_t: &Tensor,
    eps_hat: &Tensor,
    t: usize,
    s: &DiffusionSchedule,
) -> Result<(Tensor, f64)> {
    s.check_t(t, false)?;
    let c = s.beta[t] / (1.0 - s.alpha_bar[t]).sqrt();
    let inv = 1.0 / s.alpha[t].sqrt();
    let mu = x_t.zip_map(eps_hat, |x, e| inv * (x - c * e))?;
    if !mu.all_finite() {
        return Err(Error::Numerical(format!("posterior mean not finite at t={t}")));
    }
    Ok((mu, s.posterior_var[t]))
}

/// `ε_θ(x_t, s, t)`: output has the shape of `x_t`.
pub trait NoisePredictor {
    fn predict(&self, x_t: &Tensor, cond: &Tensor, t: usize) -> Result<Tensor>;
}

impl<F> NoisePredictor for F
where
    F: Fn(&Tensor, &Tensor, usize) -> Result<Tensor>,
{
    fn predict(&self, x_t: &Tensor, cond: &Tensor, t: usize) -> Result<Tensor> {
        self(x_t, cond, t)
    }
}

fn checked_predict(p: &dyn NoisePredictor, x: &Tensor, cond: &Tensor, t: usize) -> Result<Tensor> {
    let e = p.predict(x, cond, t)?;
    if e.shape() != x.shape() {
        return Err(shape_err!("predictor returned {:?} for input {:?}", e.shape(), x.shape()));
    }
    if !e.all_finite() {
        return Err(Error::Numerical(format!("noise prediction not finite at t={t}")));
    }
    Ok(e)
}

fn check_iterate(x: &Tensor, step: usize) -> Result<()> {
    if !x.all_finite() {
        return Err(Error::Numerical(format!("sampler produced a non-finite iterate at t={step}")));
    }
    Ok(())
}

/// Ancestral sampler, returning every iterate `x_T, x_{T−1}, …, x_0`.
/// Without an RNG the injected noise is zero.
pub fn ddpm_trajectory(
    p: &dyn NoisePredictor,
    cond: &Tensor,
    x_t: Tensor,
    s: &DiffusionSchedule,
    mut rng: Option<&mut SimRng>,
) -> Result<Vec<Tensor>> {
    check_iterate(&x_t, s.steps)?;
    let mut traj = vec![x_t];
    for t in (1..=s.steps).rev() {
        let x = traj.last().unwrap();
        let eps = checked_predict(p, x, cond, t)?;
        let (mu, var) = posterior_mean_variance(x, &eps, t, s)?;
        let next = match rng.as_deref_mut() {
            Some(r) if t > 1 && var > 0.0 => {
                let sd = var.sqrt();
                mu.map(|m| m + sd * r.normal())
            }
            _ => mu,
        };
        check_iterate(&next, t - 1)?;
        traj.push(next);
    }
    Ok(traj)
}

/// Ancestral sampling from `x_T` down to `x_0`.
pub fn ddpm_sample(
    p: &dyn NoisePredictor,
    cond: &Tensor,
    x_t: Tensor,
    s: &DiffusionSchedule,
    rng: Option<&mut SimRng>,
) -> Result<Tensor> {
    Ok(ddpm_trajectory(p, cond, x_t, s, rng)?.pop().unwrap())
}

/// Evenly spaced sub-schedule `⌊iT/steps⌋, i = 1..=steps`, ascending.
pub fn ddim_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(invalid!("implicit steps must be in 1..={total}, got {steps}"));
    }
    Ok((1..=steps).map(|i| i * total / steps).collect())
}

/// One implicit update from `t` to `prev` (`prev < t`) with stochasticity
/// `η`: returns the deterministic part and the noise scale `σ`.
pub fn ddim_step(x: &Tensor, eps: &Tensor, t: usize, prev: usize, eta: f64, s: &DiffusionSchedule) -> Result<(Tensor, f64)> {
    let (ab, ap) = (s.alpha_bar[t], s.alpha_bar[prev]);
    let sigma = eta * ((1.0 - ap) / (1.0 - ab)).sqrt() * (1.0 - ab / ap).sqrt();
    let dir = (1.0 - ap - sigma * sigma).max(0.0).sqrt();
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let spa = ap.sqrt();
    let out = x.zip_map(eps, |xv, e| spa * (xv - sb * e) / sa + dir * e)?;
    Ok((out, sigma))
}

/// Implicit sampler trajectory over [`ddim_timesteps`]. `η = 0` is fully
/// deterministic; with `η > 0` fresh noise is drawn from `rng` (zero when
/// `rng` is `None`).
pub fn ddim_trajectory(
    p: &dyn NoisePredictor,
    cond: &Tensor,
    x_t: Tensor,
    s: &DiffusionSchedule,
    steps: usize,
    eta: f64,
    mut rng: Option<&mut SimRng>,
) -> Result<Vec<Tensor>> {
    if !(eta >= 0.0) {
        return Err(invalid!("eta must be >= 0, got {eta}"));
    }
    let ts = ddim_timesteps(s.steps, steps)?;
    check_iterate(&x_t, s.steps)?;
    let mut traj = vec![x_t];
    for (i, &t) in ts.iter().enumerate().rev() {
        let prev = if i == 0 { 0 } else { ts[i - 1] };
        let x = traj.last().unwrap();
        let eps = checked_predict(p, x, cond, t)?;
        let (mean, sigma) = ddim_step(x, &eps, t, prev, eta, s)?;
        let next = match rng.as_deref_mut() {
            Some(r) if sigma > 0.0 => mean.map(|m| m + sigma * r.normal()),
            _ => mean,
        };
        check_iterate(&next, prev)?;
        traj.push(next);
    }
    Ok(traj)
}

/// Implicit sampling from `x_T` to `x_0`.
pub fn ddim_sample(
    p: &dyn NoisePredictor,
    cond: &Tensor,
    x_t: Tensor,
    s: &DiffusionSchedule,
    steps: usize,
    eta: f64,
    rng: Option<&mut SimRng>,
) -> Result<Tensor> {
    Ok(ddim_trajectory(p, cond, x_t, s, steps, eta, rng)?.pop().unwrap())
}

#[cfg(test)]
mod tests;
