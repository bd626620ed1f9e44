//! Run configuration: a JSON file overlaid on defaults, then `key=value`
//! overrides with dotted keys. Every accepted key appears in the defaults,
//! so the flattened default tree is also the key table.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::diffusion::{make_schedule, DiffusionSchedule, EpsNetConfig, TrainConfig};
use crate::enhance::{HfNetConfig, HfTrainConfig, Stage2Config};
use crate::error::{Error, Result};
use crate::experiment::ToyConfig;
use crate::recon::{AdmmConfig, WienerConfig};
use crate::sensor::{SensorParams, REFERENCE_EXPOSURE_S};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsfConfig {
    /// Calibrated PSF file (LLT1); `null` uses the toy PSF.
    pub path: Option<String>,
    /// The PSF is fixed at calibration; only `true` is supported.
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatagenSection {
    pub exposure_s: f64,
    pub train_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSection {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl DiffusionSection {
    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        make_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub sensor: SensorParams,
    pub psf: PsfConfig,
    pub datagen: DatagenSection,
    pub wiener: WienerConfig,
    pub admm: AdmmConfig,
    pub diffusion: DiffusionSection,
    pub model: EpsNetConfig,
    pub hf: HfNetConfig,
    pub train: TrainConfig,
    pub hf_train: HfTrainConfig,
    pub stage2: Stage2Config,
    pub toy: ToyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            sensor: SensorParams::default(),
            psf: PsfConfig { path: None, frozen: true },
            datagen: DatagenSection { exposure_s: REFERENCE_EXPOSURE_S, train_fraction: 0.9 },
            wiener: WienerConfig::default(),
            admm: AdmmConfig::default(),
            diffusion: DiffusionSection {
                steps: crate::diffusion::DEFAULT_STEPS,
                beta_start: crate::diffusion::DEFAULT_BETA_START,
                beta_end: crate::diffusion::DEFAULT_BETA_END,
            },
            model: EpsNetConfig::default(),
            hf: HfNetConfig::default(),
            train: TrainConfig::default(),
            hf_train: HfTrainConfig::default(),
            stage2: Stage2Config::default(),
            toy: ToyConfig::default(),
        }
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, Value)>) {
    match v {
        Value::Object(m) if !m.is_empty() => {
            for (k, child) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        _ => out.push((prefix.to_string(), v.clone())),
    }
}

fn defaults_value() -> Value {
    serde_json::to_value(RunConfig::default()).expect("defaults serialize")
}

/// `(dotted key, default value)` for every accepted key, sorted.
pub fn key_table() -> Vec<(String, Value)> {
    let mut out = Vec::new();
    flatten("", &defaults_value(), &mut out);
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

/// Key table as aligned text lines, for `--help`.
pub fn key_table_text() -> String {
    let rows = key_table();
    let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
    let mut s = String::from("Config keys (JSON file or --set key=value), with defaults:\n");
    for (k, v) in rows {
        s.push_str(&format!("  {k:<width$}  {v}\n"));
    }
    s
}

fn lookup_default<'a>(defaults: &'a Value, key: &str) -> Option<&'a Value> {
    key.split('.').try_fold(defaults, |v, part| v.get(part))
}

/// Reject keys of `user` that the defaults do not have. Objects are walked;
/// leaves (including arrays) are taken whole.
fn check_keys(user: &Value, defaults: &Value, prefix: &str) -> Result<()> {
    let Value::Object(m) = user else { return Ok(()) };
    for (k, v) in m {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match defaults.get(k) {
            None => return Err(Error::Config(format!("unknown config key {key}"))),
            Some(d @ Value::Object(dm)) if !dm.is_empty() => {
                if !v.is_object() {
                    return Err(Error::Config(format!("config key {key} must be an object")));
                }
                check_keys(v, d, &key)?;
            }
            Some(_) => {}
        }
    }
    Ok(())
}

fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

fn set_path(root: &mut Value, key: &str, v: Value) {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        cur = cur
            .as_object_mut()
            .expect("checked against defaults")
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
    }
    cur.as_object_mut().expect("checked against defaults").insert(parts[parts.len() - 1].to_string(), v);
}

impl RunConfig {
    /// Defaults, overlaid with `file` (if any), then the `key=value`
    /// overrides in order. Values parse as JSON, falling back to a string.
    pub fn build(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let defaults = defaults_value();
        let mut v = defaults.clone();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let user: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            if !user.is_object() {
                return Err(Error::Config(format!("{}: top level must be an object", path.display())));
            }
            check_keys(&user, &defaults, "")?;
            merge(&mut v, &user);
        }
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            let key = key.trim();
            match lookup_default(&defaults, key) {
                None => return Err(Error::Config(format!("unknown config key {key}"))),
                Some(Value::Object(m)) if !m.is_empty() => {
                    return Err(Error::Config(format!("config key {key} is a section, not a value")))
                }
                Some(_) => {}
            }
            let val = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
            set_path(&mut v, key, val);
        }
        let cfg: RunConfig = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |r: Result<()>| r.map_err(|e| Error::Config(e.to_string()));
        if !self.psf.frozen {
            return Err(Error::Config("psf.frozen must be true: a learnable PSF is not supported".into()));
        }
        wrap(self.sensor.validate())?;
        wrap(self.wiener.validate())?;
        wrap(self.admm.validate())?;
        wrap(self.diffusion.schedule().map(|_| ()))?;
        wrap(self.stage2.validate())?;
        wrap(self.train.loss.validate())?;
        wrap(self.toy.validate())?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::build(None, &[]).unwrap();
        assert_eq!(cfg, RunConfig::default());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, cfg.to_json()).unwrap();
        assert_eq!(RunConfig::build(Some(&p), &[]).unwrap(), cfg);
    }

    #[test]
    fn overrides_apply_in_order() {
        let cfg = RunConfig::build(
            None,
            &["wiener.lambda=80000".into(), "stage2.routing=all_levels".into(), "wiener.lambda=7".into()],
        )
        .unwrap();
        assert_eq!(cfg.wiener.lambda, 7.0);
        assert_eq!(cfg.stage2.routing, crate::enhance::HfRouting::AllLevels);
        let cfg = RunConfig::build(None, &["toy.exposures=[0.2,0.7]".into()]).unwrap();
        assert_eq!(cfg.toy.exposures, vec![0.2, 0.7]);
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"seed": 7, "train": {"adam": {"lr": 0.01}}}"#).unwrap();
        let cfg = RunConfig::build(Some(&p), &[]).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.train.adam.lr, 0.01);
        assert_eq!(cfg.train.adam.decay, 0.8);
    }

    #[test]
    fn unknown_and_bad_keys_fail() {
        let err = RunConfig::build(None, &["wiener.lamda=3".into()]).unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("wiener.lamda")));
        assert!(RunConfig::build(None, &["wiener=3".into()]).is_err());
        assert!(RunConfig::build(None, &["seed".into()]).is_err());
        assert!(RunConfig::build(None, &["wiener.lambda=-1".into()]).is_err());
        assert!(RunConfig::build(None, &["psf.frozen=false".into()]).is_err());
        assert!(RunConfig::build(None, &["seed=\"abc\"".into()]).is_err());

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"sensor": {"gain": 1}}"#).unwrap();
        let err = RunConfig::build(Some(&p), &[]).unwrap_err();
        assert!(err.to_string().contains("sensor.gain"), "{err}");
    }

    #[test]
    fn key_table_lists_nested_keys() {
        let keys: Vec<String> = key_table().into_iter().map(|k| k.0).collect();
        for k in ["wiener.lambda", "psf.frozen", "train.adam.lr", "toy.eps_train.loss.w3", "stage2.routing", "psf.path"] {
            assert!(keys.iter().any(|x| x == k), "{k}");
        }
        assert!(key_table_text().contains("wiener.lambda"));
    }
}
