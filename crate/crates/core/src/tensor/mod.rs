//! Dense row-major `f64` tensors and a tape-based reverse-mode gradient engine.
//!
//! [`Tensor`] is a plain immutable value: every operation returns a new
//! tensor. Differentiable computation goes through a [`Tape`], which records
//! a closed set of primitives (elementwise arithmetic, activations, matmul,
//! softmax, reductions, 2D convolutions, channel concat and index gathers)
//! and replays them backwards in [`Tape::backward`].
//!
//! Broadcasting is limited to tensor-scalar; anything else needs an explicit
//! reshape.

mod gradcheck;
pub(crate) mod kernels;
pub mod llt1;
mod tape;

pub use gradcheck::{check_scalar_fn, finite_diff_grad, primitive_suite, GradCheckReport, GRADCHECK_STEP, GRADCHECK_TOL};
pub use kernels::{conv2d, cross_attention, depthwise_conv2d};
pub use tape::{Gradients, Tape, Var};

use crate::error::{invalid, shape_err, Result};

/// Dense n-dimensional array of 64-bit floats in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(shape_err!("extents must be positive, got {:?}", shape));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err!(
                "shape {:?} holds {} elements but buffer has {}",
                shape,
                numel,
                data.len()
            ));
        }
        Ok(Tensor { shape, data })
    }

    /// Constructor for internal callers that already guarantee the invariant.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Result<Self> {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor::new(shape, vec![value; n])
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Result<Self> {
        Tensor::full(shape, 1.0)
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f64) -> Result<Self> {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(&mut f).collect())
    }

    pub fn zeros_like(&self) -> Self {
        Tensor::from_parts(self.shape.clone(), vec![0.0; self.data.len()])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(shape_err!("item() on tensor of shape {:?}", self.shape));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(shape_err!(
                "cannot reshape {:?} ({} elements) into {:?}",
                self.shape,
                self.data.len(),
                shape
            ));
        }
        Tensor::new(shape, self.data.clone())
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_same_shape(other, "zip_map")?;
        Ok(Tensor::from_parts(
            self.shape.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_scalar(&self, s: f64) -> Self {
        self.map(|v| v + s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn expect_same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err!(
                "{op}: left operand {:?} vs right operand {:?}",
                self.shape,
                other.shape
            ));
        }
        Ok(())
    }

    /// Treats a rank-2 tensor as one plane and a rank-3 tensor as `[C, H, W]`.
    pub fn image_dims(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[h, w] => Ok((1, h, w)),
            &[c, h, w] => Ok((c, h, w)),
            s => Err(shape_err!("expected an [H, W] or [C, H, W] image, got {:?}", s)),
        }
    }

    /// Borrow channel `c` of an image tensor as a flat `H*W` slice.
    pub fn plane(&self, c: usize) -> Result<&[f64]> {
        let (ch, h, w) = self.image_dims()?;
        if c >= ch {
            return Err(invalid!("channel {c} out of range for {ch} channels"));
        }
        Ok(&self.data[c * h * w..(c + 1) * h * w])
    }

    /// Stack equally sized planes into `[C, H, W]` (or `[H, W]` when `C = 1`
    /// and `squeeze` is set).
    pub fn from_planes(planes: Vec<Vec<f64>>, h: usize, w: usize, squeeze: bool) -> Result<Self> {
        let c = planes.len();
        if c == 0 {
            return Err(invalid!("from_planes needs at least one plane"));
        }
        let mut data = Vec::with_capacity(c * h * w);
        for (i, p) in planes.into_iter().enumerate() {
            if p.len() != h * w {
                return Err(shape_err!("plane {i} has {} values, expected {}x{}", p.len(), h, w));
            }
            data.extend(p);
        }
        if squeeze && c == 1 {
            Tensor::new(vec![h, w], data)
        } else {
            Tensor::new(vec![c, h, w], data)
        }
    }

    /// Apply `f` to every `[H, W]` plane, keeping the rank of `self`.
    pub fn map_planes(
        &self,
        mut f: impl FnMut(&[f64], usize, usize) -> Result<(Vec<f64>, usize, usize)>,
    ) -> Result<Self> {
        let (c, h, w) = self.image_dims()?;
        let mut planes = Vec::with_capacity(c);
        let mut out_dims = None;
        for ch in 0..c {
            let (p, oh, ow) = f(&self.data[ch * h * w..(ch + 1) * h * w], h, w)?;
            out_dims = Some((oh, ow));
            planes.push(p);
        }
        let (oh, ow) = out_dims.expect("at least one channel");
        Tensor::from_planes(planes, oh, ow, self.rank() == 2)
    }
}
