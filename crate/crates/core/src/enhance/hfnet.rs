use std::path::Path;

use serde::{Deserialize, Serialize};

use super::losses::{loss_hf, LossConfig};
use crate::error::{invalid, shape_err, Error, Result};
use crate::nn::{init_normal, largest_divisor_at_most, window_indices, Adam, AdamConfig, Bound, ParamStore};
use crate::rng::SimRng;
use crate::tensor::{Tape, Tensor, Var};

/// Number of detail subbands per level (LH, HL, HH).
pub const BANDS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HfNetConfig {
    pub width: usize,
    /// Attention window side; the effective window is the largest divisor
    /// of each spatial extent not exceeding this.
    pub window: usize,
}

impl Default for HfNetConfig {
    fn default() -> Self {
        HfNetConfig { width: 8, window: 8 }
    }
}

/// High-frequency refinement network. Input and output are `[B, 3, H, W]`
/// stacks of (LH, HL, HH).
#[derive(Clone, Debug, PartialEq)]
pub struct HfNetParams {
    pub cfg: HfNetConfig,
    pub params: ParamStore,
}

impl HfNetParams {
    /// Random feature layers; the last pointwise layer of every branch
    /// starts at zero so the network begins as the identity.
    pub fn new(cfg: HfNetConfig, rng: &mut SimRng) -> Result<Self> {
        if cfg.width == 0 || cfg.window == 0 {
            return Err(invalid!("HF network width and window must be positive"));
        }
        let f = cfg.width;
        let mut p = ParamStore::new();
        p.push("pre.dw", init_normal(rng, &[BANDS, 3, 3], 9, 1.0))?;
        for i in 0..BANDS {
            p.push(format!("pre{i}.pw"), init_normal(rng, &[f, 1, 1, 1], 1, 1.0))?;
            p.push(format!("pre{i}.b"), Tensor::zeros(vec![f])?)?;
        }
        for i in 0..BANDS {
            for n in ["q", "k", "v"] {
                p.push(format!("{n}{i}"), init_normal(rng, &[f, f, 1, 1], f, 1.0))?;
            }
        }
        for i in 0..BANDS {
            p.push(format!("post{i}.dw"), init_normal(rng, &[f, 3, 3], 9, 1.0))?;
            p.push(format!("post{i}.pw"), Tensor::zeros(vec![1, f, 1, 1])?)?;
            p.push(format!("post{i}.b"), Tensor::zeros(vec![1])?)?;
            p.push(format!("lin{i}.dw"), Tensor::zeros(vec![1, 3, 3])?)?;
        }
        Ok(HfNetParams { cfg, params: p })
    }

    /// Zero every output branch, making the forward pass the exact identity.
    pub fn zero_residual(&mut self) -> Result<()> {
        for i in 0..BANDS {
            for name in [format!("post{i}.pw"), format!("post{i}.b"), format!("lin{i}.dw")] {
                let z = self.params.get(&name)?.zeros_like();
                self.params.set(&name, z)?;
            }
        }
        Ok(())
    }

    /// Taped forward pass: per-band depthwise-separable features, windowed
    /// cross-attention from each band to the other two, depthwise refinement
    /// and a residual add. Each residual also has a linear 3×3 path from its
    /// own band, which lets the network learn plain shrinkage.
    pub fn forward<'t>(&self, tape: &'t Tape, b: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        let &[n, BANDS, h, w] = s.as_slice() else {
            return Err(shape_err!("HF input must be [B, 3, H, W], got {:?}", s));
        };
        let f = self.cfg.width;
        let (wh, ww) = (
            largest_divisor_at_most(h, self.cfg.window),
            largest_divisor_at_most(w, self.cfg.window),
        );
        let (fwd, inv) = window_indices(n, f, h, w, wh, ww);
        let nwin = n * (h / wh) * (w / ww);
        let windows = |v: Var<'t>| v.gather(vec![nwin, wh * ww, f], fwd.clone());
        let unwindow = |v: Var<'t>| v.gather(vec![n, f, h, w], inv.clone());

        let d = x.depthwise_conv2d(b.get("pre.dw"), 1, 1)?;
        let feats = (0..BANDS)
            .map(|i| {
                d.slice_channels(i, 1)?
                    .conv2d(b.get(&format!("pre{i}.pw")), 1, 0)?
                    .add_channel_bias(b.get(&format!("pre{i}.b")))
                    .map(Var::silu)
            })
            .collect::<Result<Vec<_>>>()?;
        let proj = |kind: &str, i: usize| -> Result<Var<'t>> {
            windows(feats[i].conv2d(b.get(&format!("{kind}{i}")), 1, 0)?)
        };
        let keys = (0..BANDS).map(|j| proj("k", j)).collect::<Result<Vec<_>>>()?;
        let vals = (0..BANDS).map(|j| proj("v", j)).collect::<Result<Vec<_>>>()?;

        let mut outs = Vec::with_capacity(BANDS);
        for i in 0..BANDS {
            let q = proj("q", i)?;
            let mut fused = feats[i];
            for j in (0..BANDS).filter(|&j| j != i) {
                fused = fused.add(unwindow(q.cross_attention(keys[j], vals[j])?)?)?;
            }
            let r = fused
                .depthwise_conv2d(b.get(&format!("post{i}.dw")), 1, 1)?
                .silu()
                .conv2d(b.get(&format!("post{i}.pw")), 1, 0)?
                .add_channel_bias(b.get(&format!("post{i}.b")))?;
            let lin = x.slice_channels(i, 1)?.depthwise_conv2d(b.get(&format!("lin{i}.dw")), 1, 1)?;
            outs.push(r.add(lin)?);
        }
        x.add(tape.concat_channels(&outs)?)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        self.params
            .save(dir, serde_json::json!({ "kind": "hf_net", "config": self.cfg }))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let (params, meta) = ParamStore::load(dir)?;
        if meta["kind"] != "hf_net" {
            return Err(Error::Format(format!("{}: not an HF-network checkpoint", dir.display())));
        }
        let cfg: HfNetConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| Error::Format(format!("{}: {e}", dir.display())))?;
        if !HfNetParams::new(cfg.clone(), &mut SimRng::new(0))?.params.same_layout(&params) {
            return Err(Error::Format(format!("{}: parameter layout does not match config", dir.display())));
        }
        Ok(HfNetParams { cfg, params })
    }
}

/// Refine detail bands `[LH, HL, HH]`, each `[H, W]` or `[C, H, W]`.
pub fn hf_forward(bands: [&Tensor; 3], net: &HfNetParams) -> Result<[Tensor; 3]> {
    let shape = bands[0].shape().to_vec();
    if bands.iter().any(|t| t.shape() != shape.as_slice()) {
        return Err(shape_err!(
            "subband shapes disagree: {:?}",
            bands.iter().map(|t| t.shape().to_vec()).collect::<Vec<_>>()
        ));
    }
    let x = stack_bands(bands)?;
    let tape = Tape::new();
    let b = net.params.bind_const(&tape);
    let y = net.forward(&tape, &b, tape.constant(x))?;
    unstack_bands(&y.value(), &shape)
}

/// `[C, H, W]` (or `[H, W]`) bands → `[C, 3, H, W]`.
pub fn stack_bands(bands: [&Tensor; 3]) -> Result<Tensor> {
    let (c, h, w) = bands[0].image_dims()?;
    let mut data = Vec::with_capacity(c * BANDS * h * w);
    for ch in 0..c {
        for band in bands {
            data.extend_from_slice(band.plane(ch)?);
        }
    }
    Tensor::new(vec![c, BANDS, h, w], data)
}

/// Inverse of [`stack_bands`].
pub fn unstack_bands(x: &Tensor, band_shape: &[usize]) -> Result<[Tensor; 3]> {
    let &[c, BANDS, h, w] = x.shape() else {
        return Err(shape_err!("expected [C, 3, H, W], got {:?}", x.shape()));
    };
    let hw = h * w;
    let mut out: [Vec<f64>; 3] = Default::default();
    for ch in 0..c {
        for (i, o) in out.iter_mut().enumerate() {
            let base = (ch * BANDS + i) * hw;
            o.extend_from_slice(&x.data()[base..base + hw]);
        }
    }
    let [a, b, d] = out;
    Ok([
        Tensor::new(band_shape.to_vec(), a)?,
        Tensor::new(band_shape.to_vec(), b)?,
        Tensor::new(band_shape.to_vec(), d)?,
    ])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HfTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for HfTrainConfig {
    fn default() -> Self {
        HfTrainConfig {
            steps: 300,
            batch_size: 16,
            adam: AdamConfig {
                lr: 2e-3,
                decay_every: 200,
                ..AdamConfig::default()
            },
            seed: 0,
        }
    }
}

/// Fit the network on `(input, target)` pairs of `[3, H, W]` band stacks
/// with the high-frequency loss. Pairs may come in several sizes; each batch
/// is drawn from one size, picked in proportion to its count. Returns
/// per-step losses.
pub fn train_hf(
    net: &mut HfNetParams,
    data: &[(Tensor, Tensor)],
    loss: &LossConfig,
    cfg: &HfTrainConfig,
) -> Result<Vec<f64>> {
    loss.validate()?;
    if data.is_empty() || cfg.batch_size == 0 {
        return Err(invalid!("HF training needs data and a positive batch size"));
    }
    let mut groups: Vec<(Vec<usize>, Vec<usize>)> = Vec::new();
    for (i, (a, t)) in data.iter().enumerate() {
        if a.shape() != t.shape() || a.rank() != 3 || a.shape()[0] != BANDS {
            return Err(shape_err!("HF training pair {i}: {:?} vs {:?}", a.shape(), t.shape()));
        }
        match groups.iter_mut().find(|g| g.0 == a.shape()) {
            Some(g) => g.1.push(i),
            None => groups.push((a.shape().to_vec(), vec![i])),
        }
    }
    let mut rng = SimRng::new(cfg.seed);
    let mut opt = Adam::new(cfg.adam.clone(), &net.params)?;
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut pick = rng.below(data.len());
        let (shape, members) = groups
            .iter()
            .find(|g| {
                let hit = pick < g.1.len();
                if !hit {
                    pick -= g.1.len();
                }
                hit
            })
            .expect("pick within total");
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| members[rng.below(members.len())]).collect();
        let mut batch_shape = vec![cfg.batch_size];
        batch_shape.extend_from_slice(shape);
        let gather = |k: usize| -> Result<Tensor> {
            let d = idx.iter().flat_map(|&i| if k == 0 { data[i].0.data() } else { data[i].1.data() }).copied().collect();
            Tensor::new(batch_shape.clone(), d)
        };
        let (inp, tgt) = (gather(0)?, gather(1)?);
        let tape = Tape::new();
        let b = net.params.bind(&tape);
        let out = net.forward(&tape, &b, tape.constant(inp))?;
        let l = loss_hf(&tape, out, tape.constant(tgt), loss)?;
        let lv = l.value().item()?;
        if !lv.is_finite() {
            return Err(Error::Numerical(format!("HF loss not finite at step {step}")));
        }
        let g = tape.backward(l)?;
        opt.step(&mut net.params, &b.grads(&g))?;
        history.push(lv);
    }
    Ok(history)
}
