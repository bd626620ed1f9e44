//! MSE, PSNR and SSIM, plus per-set evaluation reports.
//!
//! Color images are scored per channel and averaged.

use std::path::Path;

use serde::{Serialize, Serializer};

use crate::datasetgen::{DatasetManifest, Split};
use crate::error::{shape_err, Error, Result};
use crate::imageio::load_image;
use crate::tensor::Tensor;

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err!("metric operands {:?} vs {:?}", a.shape(), b.shape()));
    }
    if a.numel() == 0 {
        return Err(shape_err!("metric operands are empty"));
    }
    Ok(())
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.numel() as f64)
}

/// `10·log10(peak² / mse)`; identical inputs give `+∞`.
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { f64::INFINITY } else { 10.0 * (peak * peak / m).log10() })
}

pub const SSIM_WINDOW: usize = 11;

/// Separable Gaussian filter restricted to fully covered positions.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..k).map(|i| g[i] * x[r * w + c + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..k).map(|i| g[i] * rows[(r + i) * ow + c]).sum();
        }
    }
    (out, oh, ow)
}

fn gaussian(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size - 1) as f64 / 2.0;
    let raw: Vec<f64> = (0..size).map(|i| (-(i as f64 - half).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|v| v / total).collect()
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let mut win = SSIM_WINDOW.min(h).min(w);
    if win.is_multiple_of(2) {
        win -= 1;
    }
    let g = gaussian(win, 1.5);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect() };
    let (mu_a, _, _) = filter_valid(a, h, w, &g);
    let (mu_b, _, _) = filter_valid(b, h, w, &g);
    let (e_aa, _, _) = filter_valid(&prod(&|x, _| x * x), h, w, &g);
    let (e_bb, _, _) = filter_valid(&prod(&|_, y| y * y), h, w, &g);
    let (e_ab, _, _) = filter_valid(&prod(&|x, y| x * y), h, w, &g);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / n as f64
}

/// Mean local SSIM (Gaussian window 11, σ 1.5, dynamic range 1). Images
/// smaller than the window use the largest odd window that fits.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    let (c, h, w) = a.image_dims()?;
    let mut s = 0.0;
    for ch in 0..c {
        s += ssim_plane(a.plane(ch)?, b.plane(ch)?, h, w);
    }
    Ok(s / c as f64)
}

/// Writes non-finite values as the strings `"inf"`, `"-inf"` or `"nan"`.
fn finite_or_tag<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else if v.is_nan() {
        s.serialize_str("nan")
    } else if *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_str("-inf")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageScore {
    pub id: String,
    pub mse: f64,
    #[serde(serialize_with = "finite_or_tag")]
    pub psnr: f64,
    pub ssim: f64,
}

impl ImageScore {
    pub fn compute(id: impl Into<String>, pred: &Tensor, truth: &Tensor) -> Result<Self> {
        Ok(ImageScore {
            id: id.into(),
            mse: mse(pred, truth)?,
            psnr: psnr(pred, truth, 1.0)?,
            ssim: ssim(pred, truth)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub count: usize,
    pub mean_mse: f64,
    #[serde(serialize_with = "finite_or_tag")]
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub images: Vec<ImageScore>,
    pub config: serde_json::Value,
}

impl EvalReport {
    /// Scores sorted by id; means are plain arithmetic means.
    pub fn from_scores(mut images: Vec<ImageScore>, config: serde_json::Value) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Format("evaluation set is empty".into()));
        }
        images.sort_by(|a, b| a.id.cmp(&b.id));
        let n = images.len() as f64;
        Ok(EvalReport {
            count: images.len(),
            mean_mse: images.iter().map(|s| s.mse).sum::<f64>() / n,
            mean_psnr: images.iter().map(|s| s.psnr).sum::<f64>() / n,
            mean_ssim: images.iter().map(|s| s.ssim).sum::<f64>() / n,
            images,
            config,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// Score `<pred_dir>/<id>.png` (or `.llt1`) against each scene of the
/// selected split.
pub fn evaluate_pairs(
    manifest: &DatasetManifest,
    manifest_dir: &Path,
    pred_dir: &Path,
    split: Option<Split>,
) -> Result<EvalReport> {
    let mut scores = Vec::new();
    for item in manifest.items.iter().filter(|i| split.is_none_or(|s| i.split == s)) {
        let truth = load_image(manifest_dir.join(&item.scene))?;
        let png = pred_dir.join(format!("{}.png", item.id));
        let path = if png.exists() { png } else { pred_dir.join(format!("{}.llt1", item.id)) };
        let pred = load_image(&path)?;
        scores.push(ImageScore::compute(&item.id, &pred, &truth)?);
    }
    let config = serde_json::json!({
        "pred_dir": pred_dir.display().to_string(),
        "split": split,
    });
    EvalReport::from_scores(scores, config)
}
