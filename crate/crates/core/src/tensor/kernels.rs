//! Forward and adjoint kernels shared by the plain and taped code paths.

use super::Tensor;
use crate::error::{invalid, shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

fn out_extent(len: usize, k: usize, stride: usize, pad: usize, axis: &str) -> Result<usize> {
    if k > len + 2 * pad {
        return Err(shape_err!(
            "kernel {axis} extent {k} exceeds padded input {axis} {}",
            len + 2 * pad
        ));
    }
    Ok((len + 2 * pad - k) / stride + 1)
}

fn spatial_geom(
    input: &Tensor,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize, usize, usize, usize, usize)> {
    if stride == 0 {
        return Err(invalid!("stride must be positive"));
    }
    let &[n, c, h, w] = input.shape() else {
        return Err(shape_err!("conv input must be [N, C, H, W], got {:?}", input.shape()));
    };
    let oh = out_extent(h, kh, stride, pad, "height")?;
    let ow = out_extent(w, kw, stride, pad, "width")?;
    Ok((n, c, h, w, oh, ow))
}

pub(crate) fn conv2d_geom(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<ConvGeom> {
    let &[f, kc, kh, kw] = kernel.shape() else {
        return Err(shape_err!("conv kernel must be [F, C, kh, kw], got {:?}", kernel.shape()));
    };
    let (n, c, h, w, oh, ow) = spatial_geom(input, kh, kw, stride, pad)?;
    if kc != c {
        return Err(shape_err!(
            "conv channel dimension: input has C={c} but kernel expects C={kc}"
        ));
    }
    Ok(ConvGeom { n, c, h, w, f, kh, kw, stride, pad, oh, ow })
}

pub(crate) fn depthwise_geom(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<ConvGeom> {
    let &[kc, kh, kw] = kernel.shape() else {
        return Err(shape_err!("depthwise kernel must be [C, kh, kw], got {:?}", kernel.shape()));
    };
    let (n, c, h, w, oh, ow) = spatial_geom(input, kh, kw, stride, pad)?;
    if kc != c {
        return Err(shape_err!(
            "depthwise channel count: input has C={c} but kernel has {kc} channels"
        ));
    }
    Ok(ConvGeom { n, c, h, w, f: c, kh, kw, stride, pad, oh, ow })
}

/// Visit every (output index, input index, kernel tap) triple of a 2D
/// cross-correlation restricted to one (input plane, kernel plane) pair.
#[inline]
fn for_each_tap(g: &ConvGeom, mut visit: impl FnMut(usize, usize, usize)) {
    for oy in 0..g.oh {
        for ky in 0..g.kh {
            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
            if iy < 0 || iy >= g.h as isize {
                continue;
            }
            let iy = iy as usize;
            for ox in 0..g.ow {
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    visit(oy * g.ow + ox, iy * g.w + ix as usize, ky * g.kw + kx);
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(input: &Tensor, kernel: &Tensor, g: &ConvGeom) -> Tensor {
    let (hw, ohw, khw) = (g.h * g.w, g.oh * g.ow, g.kh * g.kw);
    let x = input.data();
    let k = kernel.data();
    let mut out = vec![0.0; g.n * g.f * ohw];
    for n in 0..g.n {
        for f in 0..g.f {
            let o = &mut out[(n * g.f + f) * ohw..(n * g.f + f + 1) * ohw];
            for c in 0..g.c {
                let xp = &x[(n * g.c + c) * hw..(n * g.c + c + 1) * hw];
                let kp = &k[(f * g.c + c) * khw..(f * g.c + c + 1) * khw];
                for_each_tap(g, |oi, ii, ki| o[oi] += xp[ii] * kp[ki]);
            }
        }
    }
    Tensor::from_parts(vec![g.n, g.f, g.oh, g.ow], out)
}

/// Returns (d input, d kernel) for an upstream gradient of the conv output.
pub(crate) fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    g: &ConvGeom,
) -> (Tensor, Tensor) {
    let (hw, ohw, khw) = (g.h * g.w, g.oh * g.ow, g.kh * g.kw);
    let x = input.data();
    let k = kernel.data();
    let go = grad_out.data();
    let mut gx = vec![0.0; x.len()];
    let mut gk = vec![0.0; k.len()];
    for n in 0..g.n {
        for f in 0..g.f {
            let gop = &go[(n * g.f + f) * ohw..(n * g.f + f + 1) * ohw];
            for c in 0..g.c {
                let xi = (n * g.c + c) * hw;
                let ki = (f * g.c + c) * khw;
                for_each_tap(g, |oi, ii, kk| {
                    gx[xi + ii] += gop[oi] * k[ki + kk];
                    gk[ki + kk] += gop[oi] * x[xi + ii];
                });
            }
        }
    }
    (
        Tensor::from_parts(input.shape().to_vec(), gx),
        Tensor::from_parts(kernel.shape().to_vec(), gk),
    )
}

pub(crate) fn depthwise_forward(input: &Tensor, kernel: &Tensor, g: &ConvGeom) -> Tensor {
    let (hw, ohw, khw) = (g.h * g.w, g.oh * g.ow, g.kh * g.kw);
    let x = input.data();
    let k = kernel.data();
    let mut out = vec![0.0; g.n * g.c * ohw];
    for n in 0..g.n {
        for c in 0..g.c {
            let o = &mut out[(n * g.c + c) * ohw..(n * g.c + c + 1) * ohw];
            let xp = &x[(n * g.c + c) * hw..(n * g.c + c + 1) * hw];
            let kp = &k[c * khw..(c + 1) * khw];
            for_each_tap(g, |oi, ii, ki| o[oi] += xp[ii] * kp[ki]);
        }
    }
    Tensor::from_parts(vec![g.n, g.c, g.oh, g.ow], out)
}

pub(crate) fn depthwise_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    g: &ConvGeom,
) -> (Tensor, Tensor) {
    let (hw, ohw, khw) = (g.h * g.w, g.oh * g.ow, g.kh * g.kw);
    let x = input.data();
    let k = kernel.data();
    let go = grad_out.data();
    let mut gx = vec![0.0; x.len()];
    let mut gk = vec![0.0; k.len()];
    for n in 0..g.n {
        for c in 0..g.c {
            let gop = &go[(n * g.c + c) * ohw..(n * g.c + c + 1) * ohw];
            let xi = (n * g.c + c) * hw;
            let ki = c * khw;
            for_each_tap(g, |oi, ii, kk| {
                gx[xi + ii] += gop[oi] * k[ki + kk];
                gk[ki + kk] += gop[oi] * x[xi + ii];
            });
        }
    }
    (
        Tensor::from_parts(input.shape().to_vec(), gx),
        Tensor::from_parts(kernel.shape().to_vec(), gk),
    )
}

/// Batch count and (rows, inner, cols) of a 2D or batched 3D matmul.
pub(crate) fn matmul_geom(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match (a.shape(), b.shape()) {
        (&[m, k], &[k2, n]) => {
            if k != k2 {
                return Err(shape_err!("matmul inner dimension: left has {k}, right has {k2}"));
            }
            Ok((1, m, k, n))
        }
        (&[ba, m, k], &[bb, k2, n]) => {
            if ba != bb {
                return Err(shape_err!("matmul batch dimension: left has {ba}, right has {bb}"));
            }
            if k != k2 {
                return Err(shape_err!("matmul inner dimension: left has {k}, right has {k2}"));
            }
            Ok((ba, m, k, n))
        }
        (sa, sb) => Err(shape_err!(
            "matmul expects two rank-2 or two rank-3 operands, got {:?} and {:?}",
            sa,
            sb
        )),
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], batch: usize, m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; batch * m * n];
    for bi in 0..batch {
        let ap = &a[bi * m * k..(bi + 1) * m * k];
        let bp = &b[bi * k * n..(bi + 1) * k * n];
        let op = &mut out[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            let orow = &mut op[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ap[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &bp[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    out
}

/// Transpose of the trailing two axes of a `[batch, rows, cols]` buffer.
pub(crate) fn transpose_raw(a: &[f64], batch: usize, rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for bi in 0..batch {
        let off = bi * rows * cols;
        for r in 0..rows {
            for c in 0..cols {
                out[off + c * rows + r] = a[off + r * cols + c];
            }
        }
    }
    out
}

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (batch, m, k, n) = matmul_geom(a, b)?;
    let out = matmul_raw(a.data(), b.data(), batch, m, k, n);
    let shape = if a.rank() == 2 { vec![m, n] } else { vec![batch, m, n] };
    Ok(Tensor::from_parts(shape, out))
}

pub(crate) fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let d = *x
        .shape()
        .last()
        .ok_or_else(|| shape_err!("softmax needs rank >= 1"))?;
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(d) {
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Plain (untaped) 2D cross-correlation over `[N, C, H, W]` inputs.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = conv2d_geom(input, kernel, stride, padding)?;
    Ok(conv2d_forward(input, kernel, &g))
}

/// Plain per-channel 2D cross-correlation with a `[C, kh, kw]` kernel.
pub fn depthwise_conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = depthwise_geom(input, kernel, stride, padding)?;
    Ok(depthwise_forward(input, kernel, &g))
}

/// `softmax(q kᵀ / √D) v` for `[L, D]`/`[M, D]` operands, or batched
/// `[B, L, D]`/`[B, M, D]`.
pub fn cross_attention(query: &Tensor, key: &Tensor, value: &Tensor) -> Result<Tensor> {
    let tape = super::Tape::new();
    let q = tape.constant(query.clone());
    let k = tape.constant(key.clone());
    let v = tape.constant(value.clone());
    Ok(q.cross_attention(k, v)?.value().as_ref().clone())
}
