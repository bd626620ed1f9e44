//! PNG and LLT1 image files.
//!
//! Images are `[H, W]` (grayscale) or `[3, H, W]` (RGB) tensors. "Unit"
//! readers scale to `[0, 1]`; "count" readers return raw integer levels.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use crate::error::{invalid, Error, Result};
use crate::tensor::{llt1, Tensor};

fn open(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    })
}

/// Raw levels plus the bit depth of the stored samples (8 or 16).
pub fn read_png_counts(path: impl AsRef<Path>) -> Result<(Tensor, u32)> {
    let path = path.as_ref();
    let img = open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let sixteen = matches!(
        img,
        DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_) | DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgba16(_)
    );
    let gray = matches!(
        img,
        DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_) | DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_)
    );
    let (c, data): (usize, Vec<f64>) = match (gray, sixteen) {
        (true, false) => (1, img.to_luma8().into_raw().into_iter().map(f64::from).collect()),
        (true, true) => (1, img.to_luma16().into_raw().into_iter().map(f64::from).collect()),
        (false, false) => (3, img.to_rgb8().into_raw().into_iter().map(f64::from).collect()),
        (false, true) => (3, img.to_rgb16().into_raw().into_iter().map(f64::from).collect()),
    };
    let t = if c == 1 {
        Tensor::new(vec![h, w], data)?
    } else {
        interleaved_to_planar(&data, h, w)?
    };
    Ok((t, if sixteen { 16 } else { 8 }))
}

/// Levels divided by the container maximum (255 or 65535).
pub fn read_png_unit(path: impl AsRef<Path>) -> Result<Tensor> {
    let (t, bits) = read_png_counts(path)?;
    let top = ((1u32 << bits) - 1) as f64;
    Ok(t.scale(1.0 / top))
}

fn interleaved_to_planar(data: &[f64], h: usize, w: usize) -> Result<Tensor> {
    let planes = (0..3)
        .map(|ch| (0..h * w).map(|i| data[i * 3 + ch]).collect())
        .collect();
    Tensor::from_planes(planes, h, w, false)
}

fn check_image(t: &Tensor) -> Result<(usize, usize, usize)> {
    let (c, h, w) = t.image_dims()?;
    if c != 1 && c != 3 {
        return Err(invalid!("PNG output needs 1 or 3 channels, got {c}"));
    }
    if !t.all_finite() {
        return Err(invalid!("cannot write non-finite values to PNG"));
    }
    Ok((c, h, w))
}

fn samples(t: &Tensor, c: usize, h: usize, w: usize, scale: f64, top: f64) -> Vec<f64> {
    let d = t.data();
    let mut out = Vec::with_capacity(c * h * w);
    for i in 0..h * w {
        for ch in 0..c {
            out.push((d[ch * h * w + i] * scale).round().clamp(0.0, top));
        }
    }
    out
}

fn save_buffer(path: &Path, t: &Tensor, scale: f64, sixteen: bool) -> Result<()> {
    let (c, h, w) = check_image(t)?;
    let top = if sixteen { 65535.0 } else { 255.0 };
    let s = samples(t, c, h, w, scale, top);
    let (w32, h32) = (w as u32, h as u32);
    let res = match (c, sixteen) {
        (1, false) => ImageBuffer::<Luma<u8>, _>::from_raw(w32, h32, s.iter().map(|&v| v as u8).collect::<Vec<_>>())
            .map(|b| b.save(path)),
        (1, true) => ImageBuffer::<Luma<u16>, _>::from_raw(w32, h32, s.iter().map(|&v| v as u16).collect::<Vec<_>>())
            .map(|b| b.save(path)),
        (_, false) => ImageBuffer::<Rgb<u8>, _>::from_raw(w32, h32, s.iter().map(|&v| v as u8).collect::<Vec<_>>())
            .map(|b| b.save(path)),
        (_, true) => ImageBuffer::<Rgb<u16>, _>::from_raw(w32, h32, s.iter().map(|&v| v as u16).collect::<Vec<_>>())
            .map(|b| b.save(path)),
    };
    match res {
        Some(Ok(())) => Ok(()),
        Some(Err(image::ImageError::IoError(io))) => Err(Error::io(path, io)),
        Some(Err(e)) => Err(Error::Format(format!("{}: {e}", path.display()))),
        None => Err(Error::Format("image buffer size mismatch".into())),
    }
}

/// Write a `[0, 1]` image, clamping and rounding to 8 or 16 bits.
pub fn write_png_unit(path: impl AsRef<Path>, t: &Tensor, sixteen: bool) -> Result<()> {
    let top = if sixteen { 65535.0 } else { 255.0 };
    save_buffer(path.as_ref(), t, top, sixteen)
}

/// Write integer levels; uses a 16-bit container when `bit_depth > 8`.
pub fn write_png_counts(path: impl AsRef<Path>, t: &Tensor, bit_depth: u32) -> Result<()> {
    save_buffer(path.as_ref(), t, 1.0, bit_depth > 8)
}

fn is_png(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// PNG files load as unit images; anything else is read as LLT1.
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    if is_png(path) {
        read_png_unit(path)
    } else {
        llt1::load(path)
    }
}

/// PNG (8-bit unit) or LLT1 depending on the extension.
pub fn save_image(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    if is_png(path) {
        write_png_unit(path, t, false)
    } else {
        llt1::save(path, t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_round_trip_8_and_16_bit() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::from_fn(vec![3, 4], |i| (i * 20) as f64).unwrap();
        let p8 = dir.path().join("a.png");
        write_png_counts(&p8, &t, 8).unwrap();
        assert_eq!(read_png_counts(&p8).unwrap(), (t.clone(), 8));

        let t16 = t.scale(250.0);
        let p16 = dir.path().join("b.png");
        write_png_counts(&p16, &t16, 12).unwrap();
        assert_eq!(read_png_counts(&p16).unwrap(), (t16, 16));
    }

    #[test]
    fn rgb_unit_round_trip_within_one_level() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::from_fn(vec![3, 5, 6], |i| (i % 17) as f64 / 16.0).unwrap();
        let p = dir.path().join("c.png");
        write_png_unit(&p, &t, false).unwrap();
        let back = read_png_unit(&p).unwrap();
        assert_eq!(back.shape(), &[3, 5, 6]);
        assert!(back.max_abs_diff(&t).unwrap() <= 0.5 / 255.0 + 1e-12);
    }

    #[test]
    fn rejects_bad_channel_count_and_nan() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.png");
        assert!(write_png_unit(&p, &Tensor::zeros(vec![2, 3, 3]).unwrap(), false).is_err());
        assert!(write_png_unit(&p, &Tensor::full(vec![2, 2], f64::NAN).unwrap(), false).is_err());
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = read_png_unit("/nonexistent/x.png").unwrap_err();
        assert!(matches!(err, Error::Io { .. }), "{err}");
    }
}
