use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Result};
use crate::nn::init_normal;
use crate::rng::SimRng;
use crate::tensor::{Tape, Tensor, Var};

/// Weights of the reconstruction (`w1..w3`) and high-frequency (`w4, w5`)
/// losses, plus the seed of the default feature extractor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub w4: f64,
    pub w5: f64,
    pub feature_seed: u64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            w1: 1.0,
            w2: 0.2,
            w3: 0.01,
            w4: 1.0,
            w5: 0.1,
            feature_seed: 7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let w = [self.w1, self.w2, self.w3, self.w4, self.w5];
        if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(invalid!("loss weights must be finite and >= 0, got {:?}", w));
        }
        if w.iter().all(|v| *v == 0.0) {
            return Err(invalid!("at least one loss weight must be positive"));
        }
        Ok(())
    }
}

/// Intermediate activations compared by the perceptual term.
pub trait FeatureExtractor {
    /// Features after the second and fourth layer of `[N, C, H, W]` input.
    fn features<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)>;
}

/// Fixed random 4-layer stack of 3×3 convolutions (8 channels, ReLU),
/// applied to each input channel separately.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvFeatures {
    kernels: Vec<Tensor>,
}

pub const FEATURE_WIDTH: usize = 8;

impl ConvFeatures {
    pub fn new(seed: u64) -> Self {
        let mut rng = SimRng::new(seed);
        let kernels = (0..4)
            .map(|i| {
                let cin = if i == 0 { 1 } else { FEATURE_WIDTH };
                init_normal(&mut rng, &[FEATURE_WIDTH, cin, 3, 3], 9 * cin, 2f64.sqrt())
            })
            .collect();
        ConvFeatures { kernels }
    }
}

impl FeatureExtractor for ConvFeatures {
    fn features<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let s = x.shape();
        let &[n, c, h, w] = s.as_slice() else {
            return Err(shape_err!("features expect [N, C, H, W], got {:?}", s));
        };
        let mut y = x.reshape(vec![n * c, 1, h, w])?;
        let mut f2 = None;
        for (i, k) in self.kernels.iter().enumerate() {
            y = y.conv2d(tape.constant(k.clone()), 1, 1)?.relu();
            if i == 1 {
                f2 = Some(y);
            }
        }
        Ok((f2.expect("four layers"), y))
    }
}

/// Largest odd window `≤ 11` that fits in `h × w`.
pub fn ssim_window(h: usize, w: usize) -> usize {
    let m = h.min(w).min(11);
    if m.is_multiple_of(2) {
        m - 1
    } else {
        m
    }
}

/// Normalized 1D Gaussian of odd length.
pub fn gaussian_1d(size: usize, sigma: f64) -> Vec<f64> {
    let m = (size / 2) as f64;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - m).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Mean SSIM of `[N, C, H, W]` tensors on the tape (dynamic range 1, valid
/// Gaussian windows).
pub fn ssim_taped<'t>(tape: &'t Tape, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let s = a.shape();
    let &[_, c, h, w] = s.as_slice() else {
        return Err(shape_err!("ssim expects [N, C, H, W], got {:?}", s));
    };
    if b.shape() != s {
        return Err(shape_err!("ssim operands {:?} vs {:?}", s, b.shape()));
    }
    let win = ssim_window(h, w);
    let g = gaussian_1d(win, SSIM_SIGMA);
    let k2: Vec<f64> = (0..c * win * win).map(|i| {
        let j = i % (win * win);
        g[j / win] * g[j % win]
    }).collect();
    let kernel = tape.constant(Tensor::new(vec![c, win, win], k2)?);
    let blur = |x: Var<'t>| x.depthwise_conv2d(kernel, 1, 0);
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let (ma, mb) = (blur(a)?, blur(b)?);
    let (maa, mbb, mab) = (ma.square(), mb.square(), ma.mul(mb)?);
    let va = blur(a.square())?.sub(maa)?;
    let vb = blur(b.square())?.sub(mbb)?;
    let cov = blur(a.mul(b)?)?.sub(mab)?;
    let num = mab.scale(2.0).add_scalar(c1).mul(cov.scale(2.0).add_scalar(c2))?;
    let den = maa.add(mbb)?.add_scalar(c1).mul(va.add(vb)?.add_scalar(c2))?;
    Ok(num.div(den)?.mean())
}

/// `w1·mean|x̂ − x| + w2·(1 − SSIM) + w3·(mean (Δf₂)² + mean (Δf₄)²)`.
pub fn loss_recon<'t>(
    tape: &'t Tape,
    x_hat: Var<'t>,
    x: Var<'t>,
    cfg: &LossConfig,
    fx: &dyn FeatureExtractor,
) -> Result<Var<'t>> {
    if x_hat.shape() != x.shape() {
        return Err(shape_err!("loss_recon operands {:?} vs {:?}", x_hat.shape(), x.shape()));
    }
    let mut total = x_hat.sub(x)?.abs().mean().scale(cfg.w1);
    if cfg.w2 > 0.0 {
        let ssim = ssim_taped(tape, x_hat, x)?;
        total = total.add(ssim.scale(-cfg.w2).add_scalar(cfg.w2))?;
    }
    if cfg.w3 > 0.0 {
        let (h2, h4) = fx.features(tape, x_hat)?;
        let (t2, t4) = fx.features(tape, x)?;
        let feat = h2.sub(t2)?.square().mean().add(h4.sub(t4)?.square().mean())?;
        total = total.add(feat.scale(cfg.w3))?;
    }
    Ok(total)
}

fn diff_kernel(c: usize, vertical: bool) -> Result<Tensor> {
    let data = (0..c).flat_map(|_| [-1.0, 1.0]).collect();
    if vertical {
        Tensor::new(vec![c, 2, 1], data)
    } else {
        Tensor::new(vec![c, 1, 2], data)
    }
}

/// Anisotropic total variation `mean|∂_y r| + mean|∂_x r|` of `[N, C, H, W]`.
pub fn tv_taped<'t>(tape: &'t Tape, r: Var<'t>) -> Result<Var<'t>> {
    let s = r.shape();
    let &[_, c, h, w] = s.as_slice() else {
        return Err(shape_err!("tv expects [N, C, H, W], got {:?}", s));
    };
    let mut terms = Vec::new();
    if h > 1 {
        terms.push(r.depthwise_conv2d(tape.constant(diff_kernel(c, true)?), 1, 0)?.abs().mean());
    }
    if w > 1 {
        terms.push(r.depthwise_conv2d(tape.constant(diff_kernel(c, false)?), 1, 0)?.abs().mean());
    }
    let mut it = terms.into_iter();
    match it.next() {
        None => Ok(tape.constant(Tensor::scalar(0.0))),
        Some(first) => it.try_fold(first, |acc, t| acc.add(t)),
    }
}

/// `w4·mean (ĥ − h)² + w5·TV(ĥ − h)`.
pub fn loss_hf<'t>(tape: &'t Tape, hf_hat: Var<'t>, hf: Var<'t>, cfg: &LossConfig) -> Result<Var<'t>> {
    let r = hf_hat.sub(hf)?;
    let mse = r.square().mean().scale(cfg.w4);
    if cfg.w5 == 0.0 {
        return Ok(mse);
    }
    mse.add(tv_taped(tape, r)?.scale(cfg.w5))
}

/// Sum of the parts.
pub fn loss_total<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let mut it = parts.iter().copied();
    let first = it.next().ok_or_else(|| invalid!("loss_total needs at least one part"))?;
    it.try_fold(first, |acc, p| acc.add(p))
}
