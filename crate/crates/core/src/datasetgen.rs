//! Paired low-light lensless datasets: ground-truth scene → exposure
//! darkening → PSF convolution → sensor noise, with a JSON manifest that is
//! enough to regenerate every measurement bit-exactly.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::imageio::{load_image, read_png_counts, save_image, write_png_counts};
use crate::optics::{convolve_fft, Psf};
use crate::rng::SimRng;
use crate::sensor::{simulate_capture, SensorParams, REFERENCE_EXPOSURE_S};
use crate::tensor::Tensor;

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PSF_FILE: &str = "psf.llt1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub id: String,
    pub split: Split,
    /// Paths are relative to the manifest's directory.
    pub scene: String,
    pub measurement: String,
    pub exposure_factor: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub sensor: SensorParams,
    pub psf: String,
    pub exposure_s: f64,
    pub items: Vec<ItemRecord>,
}

impl DatasetManifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: DatasetManifest = serde_json::from_str(text).map_err(|e| Error::Format(format!("manifest: {e}")))?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::Format(format!("unsupported manifest version {}", m.version)));
        }
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    /// Unique ids and every referenced file present under `dir`.
    pub fn validate(&self, dir: &Path) -> Result<()> {
        self.sensor.validate()?;
        let mut seen = HashSet::new();
        for item in &self.items {
            if !seen.insert(&item.id) {
                return Err(Error::Format(format!("duplicate id {}", item.id)));
            }
        }
        let paths = std::iter::once(&self.psf).chain(self.items.iter().flat_map(|i| [&i.scene, &i.measurement]));
        for p in paths {
            if !dir.join(p).is_file() {
                return Err(Error::Format(format!("manifest references missing file {p}")));
            }
        }
        Ok(())
    }

    pub fn split(&self, s: Split) -> impl Iterator<Item = &ItemRecord> {
        self.items.iter().filter(move |i| i.split == s)
    }
}

/// Linear exposure scaling by `factor ∈ (0, 1]`.
pub fn darken(scene: &Tensor, factor: f64) -> Result<Tensor> {
    if !(factor > 0.0 && factor <= 1.0) {
        return Err(invalid!("exposure factor must be in (0, 1], got {factor}"));
    }
    Ok(scene.scale(factor))
}

/// Exposure time relative to the reference exposure.
pub fn exposure_factor(exposure_s: f64) -> Result<f64> {
    let f = exposure_s / REFERENCE_EXPOSURE_S;
    if !(f > 0.0 && f <= 1.0 + 1e-12) {
        return Err(invalid!("exposure must be in (0, {REFERENCE_EXPOSURE_S}] s, got {exposure_s}"));
    }
    Ok(f.min(1.0))
}

/// Simulated capture of one scene: ADU counts on the full convolution grid.
pub fn synthesize_pair(scene: &Tensor, psf: &Psf, sensor: &SensorParams, exposure_s: f64, seed: u64) -> Result<Tensor> {
    let dark = darken(scene, exposure_factor(exposure_s)?)?;
    let blurred = convolve_fft(&dark, psf)?;
    simulate_capture(&blurred, sensor, &mut SimRng::new(seed))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatagenConfig {
    pub sensor: SensorParams,
    pub exposure_s: f64,
    pub seed: u64,
    pub train_fraction: f64,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        DatagenConfig {
            sensor: SensorParams::default(),
            exposure_s: REFERENCE_EXPOSURE_S,
            seed: 42,
            train_fraction: 0.9,
        }
    }
}

fn digest(text: &str) -> [u8; 32] {
    Sha256::digest(text.as_bytes()).into()
}

/// Per-item seed: first 8 bytes of `sha256("{seed}:{id}")`.
pub fn item_seed(seed: u64, id: &str) -> u64 {
    let d = digest(&format!("{seed}:{id}"));
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Order ids by their SHA-256 and send the first `round(f·n)` to training.
pub fn assign_splits(ids: &[String], train_fraction: f64) -> Result<Vec<Split>> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(invalid!("train fraction must be in [0, 1], got {train_fraction}"));
    }
    let n_train = (train_fraction * ids.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by_key(|&i| (digest(&ids[i]), i));
    let mut out = vec![Split::Test; ids.len()];
    for &i in &order[..n_train] {
        out[i] = Split::Train;
    }
    Ok(out)
}

fn scene_files(src: &Path) -> Result<Vec<(String, PathBuf)>> {
    let rd = std::fs::read_dir(src).map_err(|e| Error::io(src, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let path = entry.map_err(|e| Error::io(src, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if matches!(ext.as_deref(), Some("png") | Some("llt1")) {
            let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            out.push((id, path));
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(Error::Format(format!("{}: no .png or .llt1 scenes", src.display())));
    }
    Ok(out)
}

fn write_item(dir: &Path, item: &ItemRecord, scene: &Tensor, meas: &Tensor, bits: u32) -> Result<()> {
    save_image(dir.join(&item.scene), scene)?;
    write_png_counts(dir.join(&item.measurement), meas, bits)
}

/// Generate every scene in `src` into `out` and write the manifest.
pub fn build_dataset(src: &Path, out: &Path, psf: &Psf, cfg: &DatagenConfig) -> Result<DatasetManifest> {
    cfg.sensor.validate()?;
    let factor = exposure_factor(cfg.exposure_s)?;
    let files = scene_files(src)?;
    let ids: Vec<String> = files.iter().map(|f| f.0.clone()).collect();
    if ids.iter().collect::<HashSet<_>>().len() != ids.len() {
        return Err(Error::Format(format!("{}: scene ids (file stems) are not unique", src.display())));
    }
    let splits = assign_splits(&ids, cfg.train_fraction)?;
    for sub in ["scenes", "measurements"] {
        let d = out.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    psf.save(out.join(PSF_FILE))?;
    let mut items = Vec::with_capacity(files.len());
    for ((id, path), split) in files.iter().zip(splits) {
        let scene = load_image(path)?;
        let ext = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) { "png" } else { "llt1" };
        let item = ItemRecord {
            id: id.clone(),
            split,
            scene: format!("scenes/{id}.{ext}"),
            measurement: format!("measurements/{id}.png"),
            exposure_factor: factor,
            seed: item_seed(cfg.seed, id),
        };
        let meas = synthesize_pair(&scene, psf, &cfg.sensor, cfg.exposure_s, item.seed)?;
        write_item(out, &item, &scene, &meas, cfg.sensor.bit_depth)?;
        items.push(item);
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        sensor: cfg.sensor.clone(),
        psf: PSF_FILE.into(),
        exposure_s: cfg.exposure_s,
        items,
    };
    manifest.save(out.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Recompute one item's measurement from its scene, seed and the manifest.
pub fn regenerate(manifest: &DatasetManifest, dir: &Path, item: &ItemRecord) -> Result<Tensor> {
    let psf = Psf::load(dir.join(&manifest.psf))?;
    let scene = load_image(dir.join(&item.scene))?;
    synthesize_pair(&scene, &psf, &manifest.sensor, manifest.exposure_s, item.seed)
}

/// Stored measurement counts of one item.
pub fn load_measurement(dir: &Path, item: &ItemRecord) -> Result<Tensor> {
    Ok(read_png_counts(dir.join(&item.measurement))?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sensor::{capture_electrons, photon_flux};

    /// Asymptotic two-sample Kolmogorov–Smirnov p-value.
    fn ks_p_value(a: &mut [f64], b: &mut [f64]) -> f64 {
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        let (n, m) = (a.len(), b.len());
        let (mut i, mut j, mut d) = (0, 0, 0.0f64);
        while i < n && j < m {
            let v = a[i].min(b[j]);
            while i < n && a[i] <= v {
                i += 1;
            }
            while j < m && b[j] <= v {
                j += 1;
            }
            d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
        }
        let ne = (n * m) as f64 / (n + m) as f64;
        let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
        let p: f64 = (1..=100)
            .map(|k| {
                let k = k as f64;
                2.0 * (-1f64).powi(k as i32 - 1) * (-2.0 * k * k * lambda * lambda).exp()
            })
            .sum();
        p.clamp(0.0, 1.0)
    }

    #[test]
    fn darken_is_linear() {
        let x = SimRng::new(1).uniform_tensor(&[8, 8], 0.0, 1.0);
        assert_eq!(darken(&x, 1.0).unwrap(), x);
        assert_eq!(darken(&x, 0.5).unwrap(), x.scale(0.5));
        let lo = darken(&x, exposure_factor(0.3).unwrap()).unwrap().mean();
        let hi = darken(&x, exposure_factor(0.7).unwrap()).unwrap().mean();
        assert!((lo / hi - 3.0 / 7.0).abs() < 1e-12);
        assert!(darken(&x, 0.0).is_err());
        assert!(darken(&x, 1.5).is_err());
    }

    #[test]
    fn zero_scene_gives_noise_floor() {
        let scene = Tensor::zeros(vec![64, 64]).unwrap();
        let m = synthesize_pair(&scene, &Psf::delta(3).unwrap(), &SensorParams::default(), 0.7, 3).unwrap();
        assert_eq!(m.shape(), &[66, 66]);
        assert!((m.mean() - 4.48).abs() < 0.1, "{}", m.mean());
    }

    #[test]
    fn synthesis_is_reproducible() {
        let scene = SimRng::new(2).uniform_tensor(&[3, 10, 12], 0.0, 1.0);
        let psf = Psf::delta(3).unwrap();
        let a = synthesize_pair(&scene, &psf, &SensorParams::default(), 0.5, 9).unwrap();
        let b = synthesize_pair(&scene, &psf, &SensorParams::default(), 0.5, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synthesize_pair(&scene, &psf, &SensorParams::default(), 0.5, 10).unwrap());
    }

    #[test]
    fn exposure_trades_against_photon_scale() {
        let n = 100_000;
        let scene = SimRng::new(3).uniform_tensor(&[n], 0.0, 1.0);
        let base = SensorParams { photon_scale: 40.0, ..SensorParams::default() };
        let doubled = SensorParams { photon_scale: 80.0, ..base.clone() };
        let a = capture_electrons(&photon_flux(&scene, &base).unwrap(), &base, &mut SimRng::new(4)).unwrap();
        let half = darken(&scene, 0.5).unwrap();
        let b = capture_electrons(&photon_flux(&half, &doubled).unwrap(), &doubled, &mut SimRng::new(5)).unwrap();
        let p = ks_p_value(&mut a.into_data(), &mut b.into_data());
        assert!(p > 0.01, "p = {p}");
    }

    #[test]
    fn ks_detects_a_shift() {
        let mut rng = SimRng::new(6);
        let mut a = rng.normal_tensor(&[5000]).into_data();
        let mut b = rng.normal_tensor(&[5000]).add_scalar(0.2).into_data();
        assert!(ks_p_value(&mut a, &mut b) < 1e-6);
    }

    #[test]
    fn split_counts_and_determinism() {
        let ids: Vec<String> = (0..10).map(|i| format!("s{i:02}")).collect();
        let s = assign_splits(&ids, 0.9).unwrap();
        assert_eq!(s.iter().filter(|x| **x == Split::Train).count(), 9);
        assert_eq!(s, assign_splits(&ids, 0.9).unwrap());
        let ids: Vec<String> = (0..1000).map(|i| format!("{i}")).collect();
        let s = assign_splits(&ids, 0.9).unwrap();
        assert_eq!(s.iter().filter(|x| **x == Split::Train).count(), 900);
    }

    #[test]
    fn build_round_trip_and_regeneration() {
        let src = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        let mut rng = SimRng::new(7);
        for i in 0..10 {
            let t = rng.uniform_tensor(&[3, 8, 8], 0.0, 1.0);
            save_image(src.path().join(format!("img{i}.png")), &t).unwrap();
        }
        let psf = Psf::new(rng.uniform_tensor(&[3, 3], 0.0, 1.0), None).unwrap();
        let cfg = DatagenConfig { exposure_s: 0.5, ..DatagenConfig::default() };
        let m = build_dataset(src.path(), out.path(), &psf, &cfg).unwrap();
        assert_eq!(m.split(Split::Train).count(), 9);
        assert_eq!(m.split(Split::Test).count(), 1);
        m.validate(out.path()).unwrap();

        let text = std::fs::read_to_string(out.path().join(MANIFEST_FILE)).unwrap();
        let parsed = DatasetManifest::from_json(&text).unwrap();
        assert_eq!(parsed.to_json(), text);

        for item in &m.items {
            let stored = load_measurement(out.path(), item).unwrap();
            assert_eq!(regenerate(&m, out.path(), item).unwrap(), stored);
            let scene = load_image(out.path().join(&item.scene)).unwrap();
            let orig = load_image(src.path().join(format!("{}.png", item.id))).unwrap();
            assert_eq!(scene, orig);
        }

        let out2 = tempfile::tempdir().unwrap();
        let m2 = build_dataset(src.path(), out2.path(), &psf, &cfg).unwrap();
        assert_eq!(m, m2);
        let a = std::fs::read(out.path().join(&m.items[3].measurement)).unwrap();
        let b = std::fs::read(out2.path().join(&m.items[3].measurement)).unwrap();
        assert_eq!(a, b);

        std::fs::remove_file(out.path().join(&m.items[0].scene)).unwrap();
        assert!(m.validate(out.path()).is_err());
    }
}
