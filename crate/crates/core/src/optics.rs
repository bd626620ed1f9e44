//! Lensless forward model `b = h * x` and Bayer handling.
//!
//! The convolution is linear (zero padded): an `H × W` scene and an
//! `Hp × Wp` PSF produce an `(H + Hp − 1) × (W + Wp − 1)` measurement. Its
//! adjoint is the "valid" correlation that maps a measurement back onto the
//! scene grid.

use std::path::Path;

use crate::error::{invalid, shape_err, Result};
use crate::fft::{irfft2, rfft2_padded};
use crate::imageio;
use crate::tensor::{llt1, Tensor};

/// Point spread function, one shared plane or one plane per color channel.
/// Each plane is nonnegative and sums to 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Psf {
    kernel: Tensor,
    pitch_mm: Option<f64>,
}

impl Psf {
    /// Validates and normalizes each plane to unit sum. Planes already within
    /// `1e-12` of unit sum are kept as given, so a saved PSF reloads bit-exactly.
    pub fn new(kernel: Tensor, pitch_mm: Option<f64>) -> Result<Self> {
        let (c, _, _) = kernel.image_dims()?;
        if let Some(p) = pitch_mm {
            if !(p > 0.0) {
                return Err(invalid!("pixel pitch must be positive, got {p}"));
            }
        }
        if kernel.data().iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(invalid!("PSF entries must be finite and nonnegative"));
        }
        for ch in 0..c {
            if kernel.plane(ch)?.iter().sum::<f64>() <= 0.0 {
                return Err(invalid!("PSF plane {ch} is empty (sums to zero)"));
            }
        }
        let kernel = kernel.map_planes(|p, h, w| {
            let s: f64 = p.iter().sum();
            if (s - 1.0).abs() <= 1e-12 {
                return Ok((p.to_vec(), h, w));
            }
            Ok((p.iter().map(|v| v / s).collect(), h, w))
        })?;
        Ok(Psf { kernel, pitch_mm })
    }

    /// Odd-sized PSF with all mass at the center pixel.
    pub fn delta(size: usize) -> Result<Self> {
        if size.is_multiple_of(2) {
            return Err(invalid!("delta PSF size must be odd, got {size}"));
        }
        let mid = size / 2;
        let k = Tensor::from_fn(vec![size, size], |i| if i == mid * size + mid { 1.0 } else { 0.0 })?;
        Psf::new(k, None)
    }

    /// PNG (any bit depth, normalized on load) or LLT1.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Psf::new(imageio::load_image(path)?, None)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        llt1::save(path, &self.kernel)
    }

    pub fn kernel(&self) -> &Tensor {
        &self.kernel
    }

    pub fn pitch_mm(&self) -> Option<f64> {
        self.pitch_mm
    }

    pub fn channels(&self) -> usize {
        self.kernel.image_dims().expect("validated").0
    }

    /// `(Hp, Wp)`.
    pub fn dims(&self) -> (usize, usize) {
        let (_, h, w) = self.kernel.image_dims().expect("validated");
        (h, w)
    }

    /// Center pixel `((Hp − 1) / 2, (Wp − 1) / 2)`, rounded down.
    pub fn center(&self) -> (usize, usize) {
        let (h, w) = self.dims();
        ((h - 1) / 2, (w - 1) / 2)
    }

    /// Plane used for image channel `ch` out of `n` channels.
    pub fn plane_for(&self, ch: usize, n: usize) -> Result<&[f64]> {
        match self.channels() {
            1 => self.kernel.plane(0),
            c if c == n => self.kernel.plane(ch),
            c => Err(shape_err!("PSF has {c} channels but image has {n}")),
        }
    }

    /// PSF rotated by 180°.
    pub fn flipped(&self) -> Psf {
        let kernel = self
            .kernel
            .map_planes(|p, h, w| Ok((p.iter().rev().copied().collect(), h, w)))
            .expect("same dims");
        Psf {
            kernel,
            pitch_mm: self.pitch_mm,
        }
    }
}

fn full_conv_plane(x: &[f64], h: usize, w: usize, k: &[f64], kh: usize, kw: usize) -> Vec<f64> {
    let (oh, ow) = (h + kh - 1, w + kw - 1);
    let fx = rfft2_padded(x, h, w, oh, ow);
    let fk = rfft2_padded(k, kh, kw, oh, ow);
    irfft2(fx.into_iter().zip(fk).map(|(a, b)| a * b).collect(), oh, ow)
}

/// Full linear convolution of every image channel with the PSF.
pub fn convolve_fft(x: &Tensor, psf: &Psf) -> Result<Tensor> {
    let (c, _, _) = x.image_dims()?;
    let (kh, kw) = psf.dims();
    let mut ch = 0;
    x.map_planes(|plane, h, w| {
        let k = psf.plane_for(ch, c)?;
        ch += 1;
        Ok((full_conv_plane(plane, h, w, k, kh, kw), h + kh - 1, w + kw - 1))
    })
}

/// Adjoint of [`convolve_fft`]: `(Hᵀb)[i, j] = Σ h[p, q] b[i + p, j + q]`.
/// Output dims are the measurement dims minus `(Hp − 1, Wp − 1)`.
pub fn adjoint_apply(b: &Tensor, psf: &Psf) -> Result<Tensor> {
    let (c, bh, bw) = b.image_dims()?;
    let (kh, kw) = psf.dims();
    if bh < kh || bw < kw {
        return Err(shape_err!("measurement {bh}x{bw} is smaller than the PSF {kh}x{kw}"));
    }
    let (oh, ow) = (bh - kh + 1, bw - kw + 1);
    let mut ch = 0;
    b.map_planes(|plane, h, w| {
        let k = psf.plane_for(ch, c)?;
        ch += 1;
        let fb = rfft2_padded(plane, h, w, h, w);
        let fk = rfft2_padded(k, kh, kw, h, w);
        let corr = irfft2(fb.into_iter().zip(fk).map(|(a, b)| a * b.conj()).collect(), h, w);
        let mut out = Vec::with_capacity(oh * ow);
        for r in 0..oh {
            out.extend_from_slice(&corr[r * w..r * w + ow]);
        }
        Ok((out, oh, ow))
    })
}

/// Color filter array sample at `(r, c)` of an RGGB sensor: 0 = R, 1 = Gr,
/// 2 = B, 3 = Gb, matching the plane order of [`BayerMosaic`].
pub fn bayer_site(r: usize, c: usize) -> usize {
    match (r % 2, c % 2) {
        (0, 0) => 0,
        (0, 1) => 1,
        (1, 1) => 2,
        _ => 3,
    }
}

/// Raw RGGB capture split into four half-resolution planes `(R, Gr, B, Gb)`.
#[derive(Clone, Debug, PartialEq)]
pub struct BayerMosaic {
    planes: Tensor,
    height: usize,
    width: usize,
}

impl BayerMosaic {
    /// From a single-plane raw mosaic `[H, W]`.
    pub fn from_raw(raw: &Tensor) -> Result<Self> {
        let (height, width) = match raw.shape() {
            &[h, w] => (h, w),
            s => return Err(shape_err!("raw mosaic must be [H, W], got {:?}", s)),
        };
        if height % 2 == 1 || width % 2 == 1 {
            return Err(shape_err!("mosaic dims must be even, got {height}x{width}"));
        }
        let (ph, pw) = (height / 2, width / 2);
        let mut planes = vec![vec![0.0; ph * pw]; 4];
        for r in 0..height {
            for c in 0..width {
                planes[bayer_site(r, c)][(r / 2) * pw + c / 2] = raw.data()[r * width + c];
            }
        }
        Ok(BayerMosaic {
            planes: Tensor::from_planes(planes, ph, pw, false)?,
            height,
            width,
        })
    }

    /// From `[4, H/2, W/2]` planes.
    pub fn from_planes(planes: Tensor) -> Result<Self> {
        match planes.shape() {
            &[4, h, w] => Ok(BayerMosaic {
                planes,
                height: 2 * h,
                width: 2 * w,
            }),
            s => Err(shape_err!("Bayer planes must be [4, H, W], got {:?}", s)),
        }
    }

    pub fn to_raw(&self) -> Tensor {
        let (h, w) = (self.height, self.width);
        let pw = w / 2;
        let d = self.planes.data();
        let plane = h / 2 * pw;
        Tensor::from_fn(vec![h, w], |i| {
            let (r, c) = (i / w, i % w);
            d[bayer_site(r, c) * plane + (r / 2) * pw + c / 2]
        })
        .expect("non-empty")
    }

    pub fn planes(&self) -> &Tensor {
        &self.planes
    }

    /// Full mosaic `(H, W)`.
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

/// Sample an RGB image `[3, H, W]` through the RGGB filter array.
pub fn mosaic(rgb: &Tensor) -> Result<BayerMosaic> {
    let (h, w) = match rgb.shape() {
        &[3, h, w] => (h, w),
        s => return Err(shape_err!("mosaic needs a [3, H, W] image, got {:?}", s)),
    };
    if h % 2 == 1 || w % 2 == 1 {
        return Err(shape_err!("mosaic dims must be even, got {h}x{w}"));
    }
    let d = rgb.data();
    let raw = Tensor::from_fn(vec![h, w], |i| {
        let ch = match bayer_site(i / w, i % w) {
            0 => 0,
            2 => 2,
            _ => 1,
        };
        d[ch * h * w + i]
    })?;
    BayerMosaic::from_raw(&raw)
}

/// Bilinear demosaic with mirrored (edge-excluding) borders.
pub fn demosaic(m: &BayerMosaic) -> Result<Tensor> {
    let raw = m.to_raw();
    let (h, w) = m.dims();
    let d = raw.data();
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let j = if i < 0 { -i } else if i >= n { 2 * (n - 1) - i } else { i };
        j.clamp(0, n - 1) as usize
    };
    let at = |r: isize, c: isize| d[reflect(r, h) * w + reflect(c, w)];
    let cross = |r: isize, c: isize| (at(r - 1, c) + at(r + 1, c) + at(r, c - 1) + at(r, c + 1)) / 4.0;
    let diag = |r: isize, c: isize| (at(r - 1, c - 1) + at(r - 1, c + 1) + at(r + 1, c - 1) + at(r + 1, c + 1)) / 4.0;
    let horiz = |r: isize, c: isize| (at(r, c - 1) + at(r, c + 1)) / 2.0;
    let vert = |r: isize, c: isize| (at(r - 1, c) + at(r + 1, c)) / 2.0;

    let mut out = vec![vec![0.0; h * w]; 3];
    for r in 0..h {
        for c in 0..w {
            let (ri, ci) = (r as isize, c as isize);
            let here = d[r * w + c];
            let (red, green, blue) = match bayer_site(r, c) {
                0 => (here, cross(ri, ci), diag(ri, ci)),
                1 => (horiz(ri, ci), here, vert(ri, ci)),
                2 => (diag(ri, ci), cross(ri, ci), here),
                _ => (vert(ri, ci), here, horiz(ri, ci)),
            };
            out[0][r * w + c] = red;
            out[1][r * w + c] = green;
            out[2][r * w + c] = blue;
        }
    }
    Tensor::from_planes(out, h, w, false)
}
