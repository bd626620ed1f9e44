//! Orthonormal 2D Haar transform.
//!
//! Each 2×2 block `[a, b; c, d]` maps to
//!
//! ```text
//! LL = (a + b + c + d) / 2     LH = (a + b − c − d) / 2
//! HL = (a − b + c − d) / 2     HH = (a − b − c + d) / 2
//! ```
//!
//! so the transform preserves energy. Odd extents are padded by repeating the
//! last row/column; the pad flags travel with the subbands so synthesis can
//! drop them again.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::tensor::{llt1, Tensor};

/// One analysis level. All four bands share the shape `[.., ⌈H/2⌉, ⌈W/2⌉]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SubbandSet {
    pub ll: Tensor,
    pub lh: Tensor,
    pub hl: Tensor,
    pub hh: Tensor,
    /// 1 for the first analysis, 2 for the transform of its LL, …
    pub level: usize,
    pub pad_rows: bool,
    pub pad_cols: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Sidecar {
    level: usize,
    pad_rows: bool,
    pad_cols: bool,
    bands: Vec<String>,
}

impl SubbandSet {
    /// `[LH, HL, HH]` stacked along channels, per source channel.
    pub fn high_bands(&self) -> [&Tensor; 3] {
        [&self.lh, &self.hl, &self.hh]
    }

    pub fn energy(&self) -> f64 {
        [&self.ll, &self.lh, &self.hl, &self.hh]
            .iter()
            .map(|t| t.norm().powi(2))
            .sum()
    }

    /// Writes `path` (LL, LH, HL, HH as consecutive LLT1 records) and a JSON
    /// sidecar next to it with the `.json` extension.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        llt1::save_all(path, [&self.ll, &self.lh, &self.hl, &self.hh])?;
        let meta = Sidecar {
            level: self.level,
            pad_rows: self.pad_rows,
            pad_cols: self.pad_cols,
            bands: ["LL", "LH", "HL", "HH"].map(String::from).to_vec(),
        };
        let side = sidecar_path(path);
        let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(&side, text).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let side = sidecar_path(path);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let meta: Sidecar =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", side.display())))?;
        let mut bands = llt1::load_all(path)?;
        if bands.len() != 4 {
            return Err(Error::Format(format!("{}: expected 4 subbands, found {}", path.display(), bands.len())));
        }
        let hh = bands.pop().unwrap();
        let hl = bands.pop().unwrap();
        let lh = bands.pop().unwrap();
        let ll = bands.pop().unwrap();
        if [&lh, &hl, &hh].iter().any(|t| t.shape() != ll.shape()) {
            return Err(Error::Format(format!("{}: subband shapes differ", path.display())));
        }
        Ok(SubbandSet {
            ll,
            lh,
            hl,
            hh,
            level: meta.level,
            pad_rows: meta.pad_rows,
            pad_cols: meta.pad_cols,
        })
    }
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Single-level analysis of an `[H, W]` or `[C, H, W]` image.
pub fn dwt2(x: &Tensor) -> Result<SubbandSet> {
    analyze(x, 1)
}

fn analyze(x: &Tensor, level: usize) -> Result<SubbandSet> {
    let (c, h, w) = x.image_dims()?;
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let squeeze = x.rank() == 2;
    let mut bands = [vec![], vec![], vec![], vec![]];
    for ch in 0..c {
        let p = x.plane(ch)?;
        let at = |r: usize, col: usize| p[r.min(h - 1) * w + col.min(w - 1)];
        for i in 0..oh {
            for j in 0..ow {
                let (a, b) = (at(2 * i, 2 * j), at(2 * i, 2 * j + 1));
                let (cc, d) = (at(2 * i + 1, 2 * j), at(2 * i + 1, 2 * j + 1));
                bands[0].push((a + b + cc + d) / 2.0);
                bands[1].push((a + b - cc - d) / 2.0);
                bands[2].push((a - b + cc - d) / 2.0);
                bands[3].push((a - b - cc + d) / 2.0);
            }
        }
    }
    let shape = if squeeze { vec![oh, ow] } else { vec![c, oh, ow] };
    let [ll, lh, hl, hh] = bands.map(|b| Tensor::new(shape.clone(), b));
    Ok(SubbandSet {
        ll: ll?,
        lh: lh?,
        hl: hl?,
        hh: hh?,
        level,
        pad_rows: h % 2 == 1,
        pad_cols: w % 2 == 1,
    })
}

/// Exact inverse of [`dwt2`], removing any padding recorded in `s`.
pub fn idwt2(s: &SubbandSet) -> Result<Tensor> {
    let shape = s.ll.shape();
    if [&s.lh, &s.hl, &s.hh].iter().any(|t| t.shape() != shape) {
        return Err(shape_err!("subband shapes differ"));
    }
    let (c, bh, bw) = s.ll.image_dims()?;
    let (h, w) = (2 * bh - s.pad_rows as usize, 2 * bw - s.pad_cols as usize);
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        let (ll, lh, hl, hh) = (s.ll.plane(ch)?, s.lh.plane(ch)?, s.hl.plane(ch)?, s.hh.plane(ch)?);
        let mut full = vec![0.0; 4 * bh * bw];
        let fw = 2 * bw;
        for i in 0..bh {
            for j in 0..bw {
                let k = i * bw + j;
                let (a0, a1, a2, a3) = (ll[k], lh[k], hl[k], hh[k]);
                full[2 * i * fw + 2 * j] = (a0 + a1 + a2 + a3) / 2.0;
                full[2 * i * fw + 2 * j + 1] = (a0 + a1 - a2 - a3) / 2.0;
                full[(2 * i + 1) * fw + 2 * j] = (a0 - a1 + a2 - a3) / 2.0;
                full[(2 * i + 1) * fw + 2 * j + 1] = (a0 - a1 - a2 + a3) / 2.0;
            }
        }
        for r in 0..h {
            out.extend_from_slice(&full[r * fw..r * fw + w]);
        }
    }
    if s.ll.rank() == 2 {
        Tensor::new(vec![h, w], out)
    } else {
        Tensor::new(vec![c, h, w], out)
    }
}

/// Multi-level decomposition; `levels[k]` is the analysis at depth `k + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct Pyramid {
    pub levels: Vec<SubbandSet>,
}

impl Pyramid {
    /// Coarsest low-pass band.
    pub fn ll(&self) -> &Tensor {
        &self.levels.last().expect("at least one level").ll
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    /// Squared norm of the coarsest LL plus every detail band; equals the
    /// image energy for even dimensions.
    pub fn energy(&self) -> f64 {
        let detail: f64 = self
            .levels
            .iter()
            .flat_map(|s| s.high_bands())
            .map(|t| t.norm().powi(2))
            .sum();
        self.ll().norm().powi(2) + detail
    }

    /// Same pyramid with the coarsest LL replaced.
    pub fn with_ll(&self, ll: Tensor) -> Result<Self> {
        let mut p = self.clone();
        let last = p.levels.last_mut().expect("at least one level");
        if ll.shape() != last.ll.shape() {
            return Err(shape_err!("replacement LL {:?} vs {:?}", ll.shape(), last.ll.shape()));
        }
        last.ll = ll;
        Ok(p)
    }
}

/// Recursive analysis on LL, `levels ≥ 1`.
pub fn dwt2_multi(x: &Tensor, levels: usize) -> Result<Pyramid> {
    if levels == 0 {
        return Err(invalid!("levels must be at least 1"));
    }
    let mut out = Vec::with_capacity(levels);
    let mut cur = x.clone();
    for level in 1..=levels {
        let s = analyze(&cur, level)?;
        cur = s.ll.clone();
        out.push(s);
    }
    Ok(Pyramid { levels: out })
}

/// Synthesis from the coarsest LL upwards; intermediate LL bands are
/// recomputed, not read.
pub fn idwt_multi(p: &Pyramid) -> Result<Tensor> {
    let mut cur = p.ll().clone();
    for s in p.levels.iter().rev() {
        let step = SubbandSet { ll: cur, ..s.clone() };
        cur = idwt2(&step)?;
    }
    Ok(cur)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SimRng;
    use proptest::prelude::*;

    #[test]
    fn constant_image() {
        let s = dwt2(&Tensor::full(vec![4, 6], 0.3).unwrap()).unwrap();
        assert!(s.ll.data().iter().all(|&v| (v - 0.6).abs() < 1e-15));
        for b in s.high_bands() {
            assert!(b.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn row_alternation_goes_to_lh() {
        let x = Tensor::from_fn(vec![4, 4], |i| if (i / 4) % 2 == 0 { 1.0 } else { 0.0 }).unwrap();
        let s = dwt2(&x).unwrap();
        assert!(s.ll.data().iter().all(|&v| v == 1.0));
        assert!(s.lh.data().iter().all(|&v| v == 1.0));
        assert!(s.hl.data().iter().chain(s.hh.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn hand_block() {
        let s = dwt2(&Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        assert_eq!(
            (s.ll.data()[0], s.lh.data()[0], s.hl.data()[0], s.hh.data()[0]),
            (5.0, -2.0, -1.0, 0.0)
        );
    }

    #[test]
    fn synthesis_edge_cases() {
        let z = Tensor::zeros(vec![3, 3]).unwrap();
        let s = SubbandSet { ll: z.clone(), lh: z.clone(), hl: z.clone(), hh: z.clone(), level: 1, pad_rows: false, pad_cols: false };
        assert_eq!(idwt2(&s).unwrap(), Tensor::zeros(vec![6, 6]).unwrap());

        let x = Tensor::full(vec![6, 4], 0.7).unwrap();
        let mut s = dwt2(&x).unwrap();
        s.lh = s.lh.zeros_like();
        s.hl = s.hl.zeros_like();
        s.hh = s.hh.zeros_like();
        assert!(idwt2(&s).unwrap().max_abs_diff(&x).unwrap() < 1e-15);
    }

    #[test]
    fn random_round_trips() {
        let mut rng = SimRng::new(1);
        let x = rng.uniform_tensor(&[16, 16], -1.0, 1.0);
        assert!(idwt2(&dwt2(&x).unwrap()).unwrap().max_abs_diff(&x).unwrap() < 1e-10);

        let bands: Vec<Tensor> = (0..4).map(|_| rng.uniform_tensor(&[2, 5, 7], -1.0, 1.0)).collect();
        let s = SubbandSet {
            ll: bands[0].clone(),
            lh: bands[1].clone(),
            hl: bands[2].clone(),
            hh: bands[3].clone(),
            level: 1,
            pad_rows: false,
            pad_cols: false,
        };
        let again = dwt2(&idwt2(&s).unwrap()).unwrap();
        for (a, b) in [(&again.ll, &s.ll), (&again.lh, &s.lh), (&again.hl, &s.hl), (&again.hh, &s.hh)] {
            assert!(a.max_abs_diff(b).unwrap() < 1e-10);
        }
    }

    #[test]
    fn odd_dims_are_padded_and_restored() {
        let mut rng = SimRng::new(2);
        let x = rng.uniform_tensor(&[3, 7, 5], 0.0, 1.0);
        let s = dwt2(&x).unwrap();
        assert!(s.pad_rows && s.pad_cols);
        assert_eq!(s.ll.shape(), &[3, 4, 3]);
        assert!(idwt2(&s).unwrap().max_abs_diff(&x).unwrap() < 1e-12);
    }

    #[test]
    fn two_levels_quarter_the_side() {
        let x = Tensor::zeros(vec![384, 384]).unwrap();
        assert_eq!(dwt2_multi(&x, 2).unwrap().ll().shape(), &[96, 96]);
        let mut rng = SimRng::new(3);
        let y = rng.uniform_tensor(&[3, 12, 20], 0.0, 1.0);
        assert_eq!(dwt2_multi(&y, 1).unwrap().levels[0], dwt2(&y).unwrap());
        assert!(dwt2_multi(&y, 0).is_err());
    }

    #[test]
    fn subbands_serialize_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = SimRng::new(4);
        let s = dwt2_multi(&rng.uniform_tensor(&[9, 10], 0.0, 1.0), 2).unwrap().levels[1].clone();
        let p = dir.path().join("lvl2.llt1");
        s.save(&p).unwrap();
        assert!(p.with_extension("json").exists());
        assert_eq!(SubbandSet::load(&p).unwrap(), s);
    }

    proptest! {
        #[test]
        fn perfect_reconstruction_and_parseval(seed in 0u64..10_000, levels in 1usize..=4, hb in 1usize..4, wb in 1usize..4) {
            let mut rng = SimRng::new(seed);
            let side = 1 << levels;
            let x = rng.uniform_tensor(&[hb * side, wb * side], -2.0, 2.0);
            let p = dwt2_multi(&x, levels).unwrap();
            prop_assert!(idwt_multi(&p).unwrap().max_abs_diff(&x).unwrap() < 1e-10);
            let mut src = x.norm().powi(2);
            for s in &p.levels {
                prop_assert!((s.energy() - src).abs() <= 1e-12 * src.max(1e-300));
                src = s.ll.norm().powi(2);
            }
        }

        #[test]
        fn analysis_is_linear(seed in 0u64..10_000, a in -2.0f64..2.0) {
            let mut rng = SimRng::new(seed);
            let x = rng.uniform_tensor(&[6, 8], -1.0, 1.0);
            let y = rng.uniform_tensor(&[6, 8], -1.0, 1.0);
            let lhs = dwt2(&x.scale(a).add(&y).unwrap()).unwrap();
            let (sx, sy) = (dwt2(&x).unwrap(), dwt2(&y).unwrap());
            for (l, (bx, by)) in [(&lhs.ll, (&sx.ll, &sy.ll)), (&lhs.hh, (&sx.hh, &sy.hh))] {
                prop_assert!(l.max_abs_diff(&bx.scale(a).add(by).unwrap()).unwrap() < 1e-12);
            }
        }
    }
}
