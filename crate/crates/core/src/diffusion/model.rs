use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::NoisePredictor;
use crate::error::{shape_err, Error, Result};
use crate::nn::{init_normal, largest_divisor_at_most, window_indices, Bound, ParamStore};
use crate::rng::SimRng;
use crate::tensor::{Tape, Tensor, Var};

pub const TIME_EMBED_DIM: usize = 8;

/// `[sin, cos](π 2^k t/T)` for `k = 0..4`.
pub fn time_embedding(t: usize, total: usize) -> [f64; TIME_EMBED_DIM] {
    let tau = t as f64 / total.max(1) as f64;
    let mut e = [0.0; TIME_EMBED_DIM];
    for k in 0..TIME_EMBED_DIM / 2 {
        let a = PI * (1u32 << k) as f64 * tau;
        e[2 * k] = a.sin();
        e[2 * k + 1] = a.cos();
    }
    e
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsNetConfig {
    /// Channels of `x_t` (and of the output).
    pub data_channels: usize,
    /// Channels of the condition `s`.
    pub cond_channels: usize,
    pub width: usize,
    /// Attention window side (see the HF network for the divisor rule).
    pub window: usize,
    /// Total diffusion steps, used to normalize the time embedding.
    pub total_steps: usize,
}

impl Default for EpsNetConfig {
    fn default() -> Self {
        EpsNetConfig {
            data_channels: 1,
            cond_channels: 1,
            width: 32,
            window: 8,
            total_steps: super::DEFAULT_STEPS,
        }
    }
}

/// Noise predictor: `concat(x_t, s, emb(t))` → two depthwise-separable
/// blocks → windowed cross-attention from features to condition tokens → two
/// mirrored blocks (with a skip from the first) → pointwise head.
#[derive(Clone, Debug, PartialEq)]
pub struct EpsNet {
    pub cfg: EpsNetConfig,
    pub params: ParamStore,
}

const BLOCKS: [&str; 4] = ["enc1", "enc2", "dec1", "dec2"];

impl EpsNet {
    pub fn new(cfg: EpsNetConfig, rng: &mut SimRng) -> Result<Self> {
        let f = cfg.width;
        let cin = cfg.data_channels + cfg.cond_channels + TIME_EMBED_DIM;
        let mut p = ParamStore::new();
        for (name, c) in BLOCKS.iter().zip([cin, f, f, f]) {
            p.push(format!("{name}.dw"), init_normal(rng, &[c, 3, 3], 9, 1.0))?;
            p.push(format!("{name}.pw"), init_normal(rng, &[f, c, 1, 1], c, 2f64.sqrt()))?;
            p.push(format!("{name}.b"), Tensor::zeros(vec![f])?)?;
        }
        p.push("attn.cond", init_normal(rng, &[f, cfg.cond_channels, 1, 1], cfg.cond_channels, 1.0))?;
        p.push("attn.cond_b", Tensor::zeros(vec![f])?)?;
        for n in ["attn.q", "attn.k", "attn.v"] {
            p.push(n, init_normal(rng, &[f, f, 1, 1], f, 1.0))?;
        }
        p.push("attn.o", init_normal(rng, &[f, f, 1, 1], f, 0.1))?;
        p.push("out.pw", init_normal(rng, &[cfg.data_channels, f, 1, 1], f, 0.1))?;
        p.push("out.b", Tensor::zeros(vec![cfg.data_channels])?)?;
        Ok(EpsNet { cfg, params: p })
    }

    /// Taped forward pass on `[N, C, H, W]` inputs with one timestep per item.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        b: &Bound<'t>,
        x_t: Var<'t>,
        cond: Var<'t>,
        ts: &[usize],
    ) -> Result<Var<'t>> {
        let xs = x_t.shape();
        let &[n, c, h, w] = xs.as_slice() else {
            return Err(shape_err!("predictor input must be [N, C, H, W], got {:?}", xs));
        };
        if c != self.cfg.data_channels {
            return Err(shape_err!("predictor expects {} data channels, got {c}", self.cfg.data_channels));
        }
        if cond.shape() != [n, self.cfg.cond_channels, h, w] {
            return Err(shape_err!("condition {:?} does not match input {:?}", cond.shape(), xs));
        }
        if ts.len() != n {
            return Err(shape_err!("{} timesteps for batch of {n}", ts.len()));
        }
        let hw = h * w;
        let mut emb = Vec::with_capacity(n * TIME_EMBED_DIM * hw);
        for &t in ts {
            for v in time_embedding(t, self.cfg.total_steps) {
                emb.extend(std::iter::repeat_n(v, hw));
            }
        }
        let emb = tape.constant(Tensor::new(vec![n, TIME_EMBED_DIM, h, w], emb)?);
        let inp = tape.concat_channels(&[x_t, cond, emb])?;

        let block = |name: &str, x: Var<'t>| -> Result<Var<'t>> {
            let y = x.depthwise_conv2d(b.get(&format!("{name}.dw")), 1, 1)?;
            let y = y.conv2d(b.get(&format!("{name}.pw")), 1, 0)?;
            Ok(y.add_channel_bias(b.get(&format!("{name}.b")))?.silu())
        };
        let f = self.cfg.width;
        let (wh, ww) = (
            largest_divisor_at_most(h, self.cfg.window),
            largest_divisor_at_most(w, self.cfg.window),
        );
        let (fwd, inv) = window_indices(n, f, h, w, wh, ww);
        let nwin = n * (h / wh) * (w / ww);
        let tokens = |x: Var<'t>| x.gather(vec![nwin, wh * ww, f], fwd.clone());

        let h1 = block("enc1", inp)?;
        let h2 = block("enc2", h1)?;
        let ctx = cond.conv2d(b.get("attn.cond"), 1, 0)?.add_channel_bias(b.get("attn.cond_b"))?;
        let q = tokens(h2.conv2d(b.get("attn.q"), 1, 0)?)?;
        let k = tokens(ctx.conv2d(b.get("attn.k"), 1, 0)?)?;
        let v = tokens(ctx.conv2d(b.get("attn.v"), 1, 0)?)?;
        let a = q.cross_attention(k, v)?.gather(vec![n, f, h, w], inv.clone())?;
        let h3 = h2.add(a.conv2d(b.get("attn.o"), 1, 0)?)?;
        let d1 = block("dec1", h3)?;
        let d2 = block("dec2", d1.add(h1)?)?;
        d2.conv2d(b.get("out.pw"), 1, 0)?.add_channel_bias(b.get("out.b"))
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let meta = serde_json::json!({ "kind": "eps_net", "config": self.cfg });
        self.params.save(dir, meta)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let (params, meta) = ParamStore::load(dir)?;
        if meta["kind"] != "eps_net" {
            return Err(Error::Format(format!("{}: not a noise-predictor checkpoint", dir.display())));
        }
        let cfg: EpsNetConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| Error::Format(format!("{}: {e}", dir.display())))?;
        let fresh = EpsNet::new(cfg.clone(), &mut SimRng::new(0))?;
        if !fresh.params.same_layout(&params) {
            return Err(Error::Format(format!("{}: parameter layout does not match config", dir.display())));
        }
        Ok(EpsNet { cfg, params })
    }
}

impl NoisePredictor for EpsNet {
    /// Accepts `[N, C, H, W]`, or `[C, H, W]` as a batch of one.
    fn predict(&self, x_t: &Tensor, cond: &Tensor, t: usize) -> Result<Tensor> {
        let rank3 = x_t.rank() == 3;
        let lift = |x: &Tensor| -> Result<Tensor> {
            if x.rank() == 3 {
                let mut s = vec![1];
                s.extend_from_slice(x.shape());
                x.reshape(s)
            } else {
                Ok(x.clone())
            }
        };
        let (x4, c4) = (lift(x_t)?, lift(cond)?);
        let tape = Tape::new();
        let b = self.params.bind_const(&tape);
        let n = x4.shape()[0];
        let out = self.forward(&tape, &b, tape.constant(x4), tape.constant(c4), &vec![t; n])?;
        let out = (*out.value()).clone();
        if rank3 {
            out.reshape(x_t.shape().to_vec())
        } else {
            Ok(out)
        }
    }
}
