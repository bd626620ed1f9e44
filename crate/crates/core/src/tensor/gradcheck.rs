use std::rc::Rc;

use serde::Serialize;

use super::{Tape, Tensor, Var};
use crate::error::{invalid, Result};
use crate::rng::SimRng;

/// Central finite differences `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> Result<f64>, x: &Tensor, h: f64) -> Result<Tensor> {
    if !(h > 0.0) {
        return Err(invalid!("finite difference step must be positive, got {h}"));
    }
    let mut probe = x.data().to_vec();
    let mut grad = Vec::with_capacity(probe.len());
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&Tensor::from_parts(x.shape().to_vec(), probe.clone()))?;
        probe[i] = orig - h;
        let fm = f(&Tensor::from_parts(x.shape().to_vec(), probe.clone()))?;
        probe[i] = orig;
        grad.push((fp - fm) / (2.0 * h));
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), grad))
}

/// Outcome of one analytic-vs-numeric gradient comparison.
#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    /// max |analytic - numeric| / max(1, |numeric|) over all inputs.
    pub max_rel_err: f64,
    pub passed: bool,
}

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-4;

pub(crate) fn rel_err(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Compare taped gradients of a scalar function of several inputs against
/// central differences.
pub fn check_scalar_fn<F>(name: &str, inputs: &[Tensor], build: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let numeric = finite_diff_grad(
            |probe| {
                let tape = Tape::new();
                let vars: Vec<Var<'_>> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| tape.param(if j == i { probe.clone() } else { t.clone() }))
                    .collect();
                build(&tape, &vars)?.value().item()
            },
            input,
            GRADCHECK_STEP,
        )?;
        worst = worst.max(rel_err(grads.wrt(vars[i]), &numeric));
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        max_rel_err: worst,
        passed: worst < GRADCHECK_TOL,
    })
}

/// Gradient check for a tensor-valued primitive: the output is contracted
/// with fixed random weights so every output coordinate contributes.
fn check_op<F>(name: &str, inputs: Vec<Tensor>, rng: &mut SimRng, op: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let probe = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        op(&tape, &vars)?.shape()
    };
    let weights = rng.uniform_tensor(&probe, -1.0, 1.0);
    check_scalar_fn(name, &inputs, move |tape, vars| {
        let w = tape.constant(weights.clone());
        op(tape, vars)?.mul(w).map(|p| p.sum())
    })
}

/// Finite-difference check of every taped primitive on random inputs in
/// `[-1, 1]`.
pub fn primitive_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = SimRng::new(seed);
    let u = |shape: &[usize], rng: &mut SimRng| rng.uniform_tensor(shape, -1.0, 1.0);
    let mut out = Vec::new();

    let a = u(&[3, 4], &mut rng);
    let b = u(&[3, 4], &mut rng);
    out.push(check_op("add", vec![a.clone(), b.clone()], &mut rng, |_, v| v[0].add(v[1]))?);
    out.push(check_op("sub", vec![a.clone(), b.clone()], &mut rng, |_, v| v[0].sub(v[1]))?);
    out.push(check_op("mul", vec![a.clone(), b.clone()], &mut rng, |_, v| v[0].mul(v[1]))?);
    let denom = b.add_scalar(2.5);
    out.push(check_op("div", vec![a.clone(), denom], &mut rng, |_, v| v[0].div(v[1]))?);
    out.push(check_op("scale", vec![a.clone()], &mut rng, |_, v| Ok(v[0].scale(-1.7)))?);
    out.push(check_op("add_scalar", vec![a.clone()], &mut rng, |_, v| Ok(v[0].add_scalar(0.3)))?);
    out.push(check_op("relu", vec![a.clone()], &mut rng, |_, v| Ok(v[0].relu()))?);
    out.push(check_op("silu", vec![a.clone()], &mut rng, |_, v| Ok(v[0].silu()))?);
    out.push(check_op("abs", vec![a.clone()], &mut rng, |_, v| Ok(v[0].abs()))?);
    out.push(check_op("sum", vec![a.clone()], &mut rng, |_, v| Ok(v[0].sum()))?);
    out.push(check_op("mean", vec![a.clone()], &mut rng, |_, v| Ok(v[0].mean()))?);
    out.push(check_op("softmax", vec![a.clone()], &mut rng, |_, v| v[0].softmax())?);
    out.push(check_op("reshape", vec![a.clone()], &mut rng, |_, v| v[0].reshape(vec![2, 6]))?);
    out.push(check_op("transpose", vec![a.clone()], &mut rng, |_, v| v[0].transpose())?);

    let m = u(&[4, 5], &mut rng);
    out.push(check_op("matmul", vec![a.clone(), m], &mut rng, |_, v| v[0].matmul(v[1]))?);
    let ba = u(&[2, 3, 4], &mut rng);
    let bb = u(&[2, 4, 2], &mut rng);
    out.push(check_op("matmul_batched", vec![ba, bb], &mut rng, |_, v| v[0].matmul(v[1]))?);

    let img = u(&[2, 2, 6, 6], &mut rng);
    let k = u(&[3, 2, 3, 3], &mut rng);
    out.push(check_op("conv2d", vec![img.clone(), k.clone()], &mut rng, |_, v| v[0].conv2d(v[1], 1, 1))?);
    out.push(check_op("conv2d_stride2", vec![img.clone(), k], &mut rng, |_, v| v[0].conv2d(v[1], 2, 0))?);
    let dk = u(&[2, 3, 3], &mut rng);
    out.push(check_op("depthwise_conv2d", vec![img.clone(), dk], &mut rng, |_, v| {
        v[0].depthwise_conv2d(v[1], 1, 1)
    })?);
    let bias = u(&[2], &mut rng);
    out.push(check_op("add_channel_bias", vec![img.clone(), bias], &mut rng, |_, v| {
        v[0].add_channel_bias(v[1])
    })?);
    let img2 = u(&[2, 1, 6, 6], &mut rng);
    out.push(check_op("concat_channels", vec![img.clone(), img2], &mut rng, |t, v| {
        t.concat_channels(&[v[0], v[1]])
    })?);
    out.push(check_op("slice_channels", vec![img.clone()], &mut rng, |_, v| v[0].slice_channels(1, 1))?);
    out.push(check_op("upsample_nearest", vec![img.clone()], &mut rng, |_, v| v[0].upsample_nearest(2))?);
    out.push(check_op("downsample_nearest", vec![img.clone()], &mut rng, |_, v| {
        v[0].downsample_nearest(2)
    })?);
    let index = Rc::new(vec![5, 0, 0, 3, 11, 7]);
    out.push(check_op("gather", vec![a], &mut rng, move |_, v| v[0].gather(vec![6], index.clone()))?);

    let q = u(&[3, 5], &mut rng);
    let kk = u(&[4, 5], &mut rng);
    let vv = u(&[4, 5], &mut rng);
    out.push(check_op("cross_attention", vec![q, kk, vv], &mut rng, |_, v| {
        v[0].cross_attention(v[1], v[2])
    })?);
    Ok(out)
}
