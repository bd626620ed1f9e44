//! 2D FFT helpers over row-major planes.

use std::cell::RefCell;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plans(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(n)
        } else {
            p.plan_fft_forward(n)
        }
    })
}

fn transform(buf: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    plans(w, inverse).process(buf);
    let mut cols = vec![Complex64::new(0.0, 0.0); h * w];
    for r in 0..h {
        for c in 0..w {
            cols[c * h + r] = buf[r * w + c];
        }
    }
    plans(h, inverse).process(&mut cols);
    for c in 0..w {
        for r in 0..h {
            buf[r * w + c] = cols[c * h + r];
        }
    }
}

/// Forward FFT of an `h × w` real plane zero-padded (bottom/right) to `ph × pw`.
pub(crate) fn rfft2_padded(x: &[f64], h: usize, w: usize, ph: usize, pw: usize) -> Vec<Complex64> {
    debug_assert!(ph >= h && pw >= w);
    let mut buf = vec![Complex64::new(0.0, 0.0); ph * pw];
    for r in 0..h {
        for c in 0..w {
            buf[r * pw + c] = Complex64::new(x[r * w + c], 0.0);
        }
    }
    transform(&mut buf, ph, pw, false);
    buf
}

/// Inverse FFT keeping the real part, normalized by `1 / (h w)`.
pub(crate) fn irfft2(mut spec: Vec<Complex64>, h: usize, w: usize) -> Vec<f64> {
    transform(&mut spec, h, w, true);
    let s = 1.0 / (h * w) as f64;
    spec.into_iter().map(|z| z.re * s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_on_odd_sizes() {
        let (h, w) = (7, 5);
        let x: Vec<f64> = (0..h * w).map(|i| ((i * 37) % 11) as f64 - 3.0).collect();
        let back = irfft2(rfft2_padded(&x, h, w, h, w), h, w);
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dc_bin_is_the_sum() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let f = rfft2_padded(&x, 2, 3, 4, 4);
        assert!((f[0].re - 21.0).abs() < 1e-12 && f[0].im.abs() < 1e-12);
    }
}
