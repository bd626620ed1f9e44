//! Named parameter sets, Adam, EMA and checkpoint directories.

use std::collections::HashMap;
use std::path::Path;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::rng::SimRng;
use crate::tensor::{llt1, Gradients, Tape, Tensor, Var};

/// Ordered name → tensor map. Order is insertion order and is what
/// checkpoints and optimizers iterate over.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(invalid!("duplicate parameter name {name}"));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.tensors[i])
            .ok_or_else(|| invalid!("unknown parameter {name}"))
    }

    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        let i = *self.index.get(name).ok_or_else(|| invalid!("unknown parameter {name}"))?;
        if t.shape() != self.tensors[i].shape() {
            return Err(invalid!("parameter {name}: shape {:?} vs {:?}", t.shape(), self.tensors[i].shape()));
        }
        self.tensors[i] = t;
        Ok(())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// Same names and shapes in the same order.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    /// Record every parameter on `tape` as a gradient-tracked leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        self.bind_with(tape, true)
    }

    /// Record parameters as constants (inference).
    pub fn bind_const<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        self.bind_with(tape, false)
    }

    fn bind_with<'t>(&self, tape: &'t Tape, train: bool) -> Bound<'t> {
        let vars = self
            .tensors
            .iter()
            .map(|t| if train { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        Bound {
            vars,
            index: self.index.clone(),
        }
    }

    /// Bind already-recorded vars (one per parameter, in order), e.g. the
    /// inputs of a gradient check.
    pub fn bind_vars<'t>(&self, vars: &[Var<'t>]) -> Result<Bound<'t>> {
        if vars.len() != self.tensors.len() {
            return Err(shape_err!("{} vars for {} parameters", vars.len(), self.tensors.len()));
        }
        Ok(Bound {
            vars: vars.to_vec(),
            index: self.index.clone(),
        })
    }

    /// `params.llt1` (all tensors, in order) and `manifest.json` under `dir`.
    pub fn save(&self, dir: impl AsRef<Path>, meta: serde_json::Value) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        llt1::save_all(dir.join(PARAMS_FILE), &self.tensors)?;
        let manifest = CheckpointManifest {
            format: "LLT1".into(),
            params: self
                .names
                .iter()
                .zip(&self.tensors)
                .map(|(n, t)| ParamEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            meta,
        };
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    /// Inverse of [`ParamStore::save`]; returns the stored metadata too.
    pub fn load(dir: impl AsRef<Path>) -> Result<(Self, serde_json::Value)> {
        let dir = dir.as_ref();
        let mpath = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: CheckpointManifest =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", mpath.display())))?;
        let tensors = llt1::load_all(dir.join(PARAMS_FILE))?;
        if tensors.len() != manifest.params.len() {
            return Err(Error::Format(format!(
                "checkpoint lists {} parameters but holds {}",
                manifest.params.len(),
                tensors.len()
            )));
        }
        let mut store = ParamStore::new();
        for (entry, t) in manifest.params.into_iter().zip(tensors) {
            if entry.shape != t.shape() {
                return Err(Error::Format(format!("parameter {}: manifest shape {:?} vs data {:?}", entry.name, entry.shape, t.shape())));
            }
            store.push(entry.name, t)?;
        }
        Ok((store, manifest.meta))
    }
}

pub const PARAMS_FILE: &str = "params.llt1";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    params: Vec<ParamEntry>,
    meta: serde_json::Value,
}

/// Parameters recorded on one tape.
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
    index: HashMap<String, usize>,
}

impl<'t> Bound<'t> {
    /// Panics on unknown names: network code and its parameter layout are
    /// built together.
    pub fn get(&self, name: &str) -> Var<'t> {
        self.vars[*self.index.get(name).unwrap_or_else(|| panic!("parameter {name} not bound"))]
    }

    /// Gradients in parameter order.
    pub fn grads(&self, g: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|v| g.wrt(*v).clone()).collect()
    }
}

/// He-style normal initialization `N(0, gain² / fan_in)`.
pub fn init_normal(rng: &mut SimRng, shape: &[usize], fan_in: usize, gain: f64) -> Tensor {
    rng.normal_tensor(shape).scale(gain / (fan_in as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Learning rate multiplier applied every `decay_every` steps.
    pub decay: f64,
    pub decay_every: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay: 0.8,
            decay_every: 100,
        }
    }
}

pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamStore) -> Result<Self> {
        if !(cfg.lr > 0.0) || !(0.0..1.0).contains(&cfg.beta1) || !(0.0..1.0).contains(&cfg.beta2) {
            return Err(invalid!("invalid Adam settings {:?}", cfg));
        }
        let zeros = || params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Ok(Adam {
            cfg,
            m: zeros(),
            v: zeros(),
            step: 0,
        })
    }

    pub fn lr(&self) -> f64 {
        let k = if self.cfg.decay_every == 0 { 0 } else { self.step / self.cfg.decay_every as u64 };
        self.cfg.lr * self.cfg.decay.powi(k as i32)
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(invalid!("{} gradients for {} parameters", grads.len(), params.len()));
        }
        let lr = self.lr();
        self.step += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let p = &params.tensors[i];
            if g.shape() != p.shape() {
                return Err(invalid!("gradient {i} shape {:?} vs {:?}", g.shape(), p.shape()));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data: Vec<f64> = p
                .data()
                .iter()
                .zip(g.data())
                .enumerate()
                .map(|(k, (&w, &gk))| {
                    m[k] = b1 * m[k] + (1.0 - b1) * gk;
                    v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
                    w - lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.cfg.eps)
                })
                .collect();
            params.tensors[i] = Tensor::new(p.shape().to_vec(), data)?;
        }
        Ok(())
    }
}

/// Exponential moving average `shadow ← rate·shadow + (1 − rate)·θ`.
pub struct Ema {
    rate: f64,
    shadow: ParamStore,
}

impl Ema {
    pub fn new(rate: f64, params: &ParamStore) -> Result<Self> {
        if !(0.0..=1.0).contains(&rate) {
            return Err(invalid!("EMA rate must be in [0, 1], got {rate}"));
        }
        Ok(Ema {
            rate,
            shadow: params.clone(),
        })
    }

    pub fn update(&mut self, params: &ParamStore) -> Result<()> {
        let r = self.rate;
        for (s, p) in self.shadow.tensors.iter_mut().zip(params.tensors()) {
            *s = s.zip_map(p, |a, b| r * a + (1.0 - r) * b)?;
        }
        Ok(())
    }

    pub fn shadow(&self) -> &ParamStore {
        &self.shadow
    }

    pub fn into_shadow(self) -> ParamStore {
        self.shadow
    }
}

/// Flat indices partitioning `[B, F, H, W]` into `[B·nh·nw, wh·ww, F]`
/// windows; also returns the inverse permutation.
pub(crate) fn window_indices(b: usize, f: usize, h: usize, w: usize, wh: usize, ww: usize) -> (Rc<Vec<usize>>, Rc<Vec<usize>>) {
    let (nh, nw) = (h / wh, w / ww);
    let total = b * f * h * w;
    let mut fwd = Vec::with_capacity(total);
    let mut inv = vec![0; total];
    for bi in 0..b {
        for wy in 0..nh {
            for wx in 0..nw {
                for y in 0..wh {
                    for x in 0..ww {
                        for ch in 0..f {
                            let src = ((bi * f + ch) * h + wy * wh + y) * w + wx * ww + x;
                            inv[src] = fwd.len();
                            fwd.push(src);
                        }
                    }
                }
            }
        }
    }
    (Rc::new(fwd), Rc::new(inv))
}

/// Largest divisor of `n` not exceeding `cap`.
pub(crate) fn largest_divisor_at_most(n: usize, cap: usize) -> usize {
    (1..=cap.min(n)).rev().find(|d| n.is_multiple_of(*d)).unwrap_or(1)
}
