use std::cell::RefCell;
use std::rc::Rc;

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{invalid, shape_err, Result};

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Silu(usize),
    Abs(usize),
    MatMul(usize, usize),
    Softmax(usize),
    Sum(usize),
    Mean(usize),
    Conv2d { x: usize, k: usize, geom: ConvGeom },
    Depthwise { x: usize, k: usize, geom: ConvGeom },
    AddChannelBias { x: usize, b: usize },
    Concat { parts: Vec<usize>, channels: Vec<usize> },
    Gather { x: usize, index: Rc<Vec<usize>> },
    Reshape(usize),
}

#[derive(Debug)]
struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records differentiable operations in evaluation order.
///
/// Nodes are only ever appended, so every parent precedes its children and a
/// reverse sweep is a valid topological order. A tape is single-threaded;
/// use one per worker.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Gradients produced by [`Tape::backward`], indexed by variable.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient for `var`, panicking if it was not a gradient-tracked leaf.
    pub fn wrt(&self, var: Var<'_>) -> &Tensor {
        self.get(var)
            .unwrap_or_else(|| panic!("no gradient recorded for node {}", var.id))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that receives a gradient.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that is treated as a constant.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn record(&self, value: Tensor, op: Op, parents: &[usize]) -> Var<'_> {
        let rg = parents.iter().any(|&p| self.requires_grad(p));
        self.push(value, op, rg)
    }

    /// Concatenate `[N, C_i, H, W]` tensors along the channel axis.
    pub fn concat_channels<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| invalid!("concat_channels needs at least one input"))?
            .value();
        let &[n, _, h, w] = first.shape() else {
            return Err(shape_err!("concat_channels expects [N, C, H, W], got {:?}", first.shape()));
        };
        let mut channels = Vec::with_capacity(parts.len());
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        for (i, v) in values.iter().enumerate() {
            match v.shape() {
                &[n2, c, h2, w2] if n2 == n && h2 == h && w2 == w => channels.push(c),
                s => {
                    return Err(shape_err!(
                        "concat_channels input {i} has shape {:?}, expected [{n}, _, {h}, {w}]",
                        s
                    ))
                }
            }
        }
        let ctot: usize = channels.iter().sum();
        let hw = h * w;
        let mut out = Vec::with_capacity(n * ctot * hw);
        for b in 0..n {
            for (v, &c) in values.iter().zip(&channels) {
                out.extend_from_slice(&v.data()[b * c * hw..(b + 1) * c * hw]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(self.record(
            Tensor::from_parts(vec![n, ctot, h, w], out),
            Op::Concat {
                parts: ids.clone(),
                channels,
            },
            &ids,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every gradient-tracked leaf recorded before `loss` gets an entry, zero
    /// if the loss does not depend on it.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let lv = &nodes[loss.id].value;
        if lv.numel() != 1 {
            return Err(shape_err!("backward needs a scalar loss, got shape {:?}", lv.shape()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::from_parts(lv.shape().to_vec(), vec![1.0]));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                if grads[id].is_none() {
                    grads[id] = Some(node.value.zeros_like());
                }
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, id, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => {
            for (a, b) in acc.data.iter_mut().zip(g.data) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn backprop(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |i: usize| -> &Tensor { &nodes[i].value };
    let rg = |i: usize| nodes[i].requires_grad;
    let elementwise = |a: &Tensor, f: &dyn Fn(f64, f64) -> f64| -> Tensor {
        Tensor::from_parts(
            a.shape().to_vec(),
            a.data().iter().zip(g.data()).map(|(&x, &gy)| f(x, gy)).collect(),
        )
    };

    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.scale(-1.0));
        }
        Op::Mul(a, b) => {
            if rg(*a) {
                accumulate(nodes, grads, *a, g.mul(val(*b)).expect("shapes checked"));
            }
            if rg(*b) {
                accumulate(nodes, grads, *b, g.mul(val(*a)).expect("shapes checked"));
            }
        }
        Op::Div(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            if rg(*a) {
                accumulate(nodes, grads, *a, g.zip_map(vb, |gy, d| gy / d).expect("shapes checked"));
            }
            if rg(*b) {
                let gb: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(va.data().iter().zip(vb.data()))
                    .map(|(&gy, (&n, &d))| -gy * n / (d * d))
                    .collect();
                accumulate(nodes, grads, *b, Tensor::from_parts(vb.shape().to_vec(), gb));
            }
        }
        Op::Scale(a, s) => accumulate(nodes, grads, *a, g.scale(*s)),
        Op::AddScalar(a) => accumulate(nodes, grads, *a, g.clone()),
        Op::Relu(a) => {
            let ga = elementwise(val(*a), &|x, gy| if x > 0.0 { gy } else { 0.0 });
            accumulate(nodes, grads, *a, ga);
        }
        Op::Silu(a) => {
            let ga = elementwise(val(*a), &|x, gy| {
                let s = 1.0 / (1.0 + (-x).exp());
                gy * s * (1.0 + x * (1.0 - s))
            });
            accumulate(nodes, grads, *a, ga);
        }
        Op::Abs(a) => {
            let ga = elementwise(val(*a), &|x, gy| {
                if x > 0.0 {
                    gy
                } else if x < 0.0 {
                    -gy
                } else {
                    0.0
                }
            });
            accumulate(nodes, grads, *a, ga);
        }
        Op::MatMul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            let (batch, m, k, n) = kernels::matmul_geom(va, vb).expect("checked on record");
            if rg(*a) {
                let bt = kernels::transpose_raw(vb.data(), batch, k, n);
                let ga = kernels::matmul_raw(g.data(), &bt, batch, m, n, k);
                accumulate(nodes, grads, *a, Tensor::from_parts(va.shape().to_vec(), ga));
            }
            if rg(*b) {
                let at = kernels::transpose_raw(va.data(), batch, m, k);
                let gb = kernels::matmul_raw(&at, g.data(), batch, k, m, n);
                accumulate(nodes, grads, *b, Tensor::from_parts(vb.shape().to_vec(), gb));
            }
        }
        Op::Softmax(a) => {
            let y = &nodes[id].value;
            let d = *y.shape().last().expect("rank >= 1");
            let mut ga = vec![0.0; y.numel()];
            for ((gr, yr), out) in g.data().chunks(d).zip(y.data().chunks(d)).zip(ga.chunks_mut(d)) {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for ((o, &gy), &yy) in out.iter_mut().zip(gr).zip(yr) {
                    *o = yy * (gy - dot);
                }
            }
            accumulate(nodes, grads, *a, Tensor::from_parts(y.shape().to_vec(), ga));
        }
        Op::Sum(a) => {
            let s = g.data()[0];
            accumulate(nodes, grads, *a, val(*a).map(|_| s));
        }
        Op::Mean(a) => {
            let va = val(*a);
            let s = g.data()[0] / va.numel() as f64;
            accumulate(nodes, grads, *a, va.map(|_| s));
        }
        Op::Conv2d { x, k, geom } => {
            let (gx, gk) = kernels::conv2d_backward(val(*x), val(*k), g, geom);
            accumulate(nodes, grads, *x, gx);
            accumulate(nodes, grads, *k, gk);
        }
        Op::Depthwise { x, k, geom } => {
            let (gx, gk) = kernels::depthwise_backward(val(*x), val(*k), g, geom);
            accumulate(nodes, grads, *x, gx);
            accumulate(nodes, grads, *k, gk);
        }
        Op::AddChannelBias { x, b } => {
            accumulate(nodes, grads, *x, g.clone());
            if rg(*b) {
                let &[n, c, h, w] = g.shape() else { unreachable!() };
                let mut gb = vec![0.0; c];
                for bi in 0..n {
                    for (ci, acc) in gb.iter_mut().enumerate() {
                        let off = (bi * c + ci) * h * w;
                        *acc += g.data()[off..off + h * w].iter().sum::<f64>();
                    }
                }
                accumulate(nodes, grads, *b, Tensor::from_parts(vec![c], gb));
            }
        }
        Op::Concat { parts, channels } => {
            let &[n, ctot, h, w] = g.shape() else { unreachable!() };
            let hw = h * w;
            let mut offset = 0;
            for (&p, &c) in parts.iter().zip(channels) {
                if rg(p) {
                    let mut gp = Vec::with_capacity(n * c * hw);
                    for bi in 0..n {
                        let start = (bi * ctot + offset) * hw;
                        gp.extend_from_slice(&g.data()[start..start + c * hw]);
                    }
                    accumulate(nodes, grads, p, Tensor::from_parts(vec![n, c, h, w], gp));
                }
                offset += c;
            }
        }
        Op::Gather { x, index } => {
            let vx = val(*x);
            let mut gx = vec![0.0; vx.numel()];
            for (&src, &gy) in index.iter().zip(g.data()) {
                gx[src] += gy;
            }
            accumulate(nodes, grads, *x, Tensor::from_parts(vx.shape().to_vec(), gx));
        }
        Op::Reshape(a) => {
            let shape = val(*a).shape().to_vec();
            accumulate(nodes, grads, *a, Tensor::from_parts(shape, g.data().to_vec()));
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    fn binary(self, other: Var<'t>, name: &str, f: fn(f64, f64) -> f64, op: Op) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(shape_err!("{name}: left {:?} vs right {:?}", a.shape(), b.shape()));
        }
        let out = a.zip_map(&b, f)?;
        Ok(self.tape.record(out, op, &[self.id, other.id]))
    }

    fn unary(self, f: impl Fn(f64) -> f64, op: Op) -> Var<'t> {
        let out = self.value().map(f);
        self.tape.record(out, op, &[self.id])
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", |a, b| a / b, Op::Div(self.id, other.id))
    }

    pub fn square(self) -> Var<'t> {
        self.mul(self).expect("same shape")
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        self.unary(|v| v * s, Op::Scale(self.id, s))
    }

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        self.unary(|v| v + s, Op::AddScalar(self.id))
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(|v| v.max(0.0), Op::Relu(self.id))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(self) -> Var<'t> {
        self.unary(|v| v / (1.0 + (-v).exp()), Op::Silu(self.id))
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(f64::abs, Op::Abs(self.id))
    }

    pub fn sum(self) -> Var<'t> {
        let s = self.value().sum();
        self.tape.record(Tensor::scalar(s), Op::Sum(self.id), &[self.id])
    }

    pub fn mean(self) -> Var<'t> {
        let s = self.value().mean();
        self.tape.record(Tensor::scalar(s), Op::Mean(self.id), &[self.id])
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let out = kernels::matmul(&self.value(), &other.value())?;
        Ok(self.tape.record(out, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Result<Var<'t>> {
        let out = kernels::softmax_last(&self.value())?;
        Ok(self.tape.record(out, Op::Softmax(self.id), &[self.id]))
    }

    /// 2D cross-correlation of `[N, C, H, W]` with `[F, C, kh, kw]`.
    pub fn conv2d(self, kernel: Var<'t>, stride: usize, padding: usize) -> Result<Var<'t>> {
        let (x, k) = (self.value(), kernel.value());
        let geom = kernels::conv2d_geom(&x, &k, stride, padding)?;
        let out = kernels::conv2d_forward(&x, &k, &geom);
        Ok(self.tape.record(
            out,
            Op::Conv2d {
                x: self.id,
                k: kernel.id,
                geom,
            },
            &[self.id, kernel.id],
        ))
    }

    /// Per-channel cross-correlation with a `[C, kh, kw]` kernel.
    pub fn depthwise_conv2d(self, kernel: Var<'t>, stride: usize, padding: usize) -> Result<Var<'t>> {
        let (x, k) = (self.value(), kernel.value());
        let geom = kernels::depthwise_geom(&x, &k, stride, padding)?;
        let out = kernels::depthwise_forward(&x, &k, &geom);
        Ok(self.tape.record(
            out,
            Op::Depthwise {
                x: self.id,
                k: kernel.id,
                geom,
            },
            &[self.id, kernel.id],
        ))
    }

    /// Add a `[C]` bias to every spatial site of an `[N, C, H, W]` tensor.
    pub fn add_channel_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        let (x, b) = (self.value(), bias.value());
        let &[n, c, h, w] = x.shape() else {
            return Err(shape_err!("add_channel_bias expects [N, C, H, W], got {:?}", x.shape()));
        };
        if b.shape() != [c] {
            return Err(shape_err!("bias shape {:?} does not match channel count {c}", b.shape()));
        }
        let mut out = x.data().to_vec();
        for bi in 0..n {
            for ci in 0..c {
                let off = (bi * c + ci) * h * w;
                for v in &mut out[off..off + h * w] {
                    *v += b.data()[ci];
                }
            }
        }
        Ok(self.tape.record(
            Tensor::from_parts(x.shape().to_vec(), out),
            Op::AddChannelBias {
                x: self.id,
                b: bias.id,
            },
            &[self.id, bias.id],
        ))
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let out = self.value().reshape(shape)?;
        Ok(self.tape.record(out, Op::Reshape(self.id), &[self.id]))
    }

    /// Build a tensor of `shape` with `out[i] = self[index[i]]` (flat indices).
    ///
    /// Transposes, slices, window partitions and nearest-neighbour resampling
    /// are all expressed through this one primitive.
    pub fn gather(self, shape: Vec<usize>, index: Rc<Vec<usize>>) -> Result<Var<'t>> {
        let x = self.value();
        let n: usize = shape.iter().product();
        if n != index.len() {
            return Err(shape_err!("gather: shape {:?} needs {n} indices, got {}", shape, index.len()));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= x.numel()) {
            return Err(invalid!("gather index {bad} out of range for {} elements", x.numel()));
        }
        let data = index.iter().map(|&i| x.data()[i]).collect();
        Ok(self.tape.record(
            Tensor::new(shape, data)?,
            Op::Gather { x: self.id, index },
            &[self.id],
        ))
    }

    /// Swap the two trailing axes of a rank-2 or rank-3 tensor.
    pub fn transpose(self) -> Result<Var<'t>> {
        let shape = self.shape();
        let (batch, r, c) = match shape.as_slice() {
            &[r, c] => (1, r, c),
            &[b, r, c] => (b, r, c),
            s => return Err(shape_err!("transpose expects rank 2 or 3, got {:?}", s)),
        };
        let mut index = Vec::with_capacity(batch * r * c);
        for b in 0..batch {
            for j in 0..c {
                for i in 0..r {
                    index.push(b * r * c + i * c + j);
                }
            }
        }
        let out_shape = if shape.len() == 2 { vec![c, r] } else { vec![batch, c, r] };
        self.gather(out_shape, Rc::new(index))
    }

    /// Channels `start..start + len` of an `[N, C, H, W]` tensor.
    pub fn slice_channels(self, start: usize, len: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        let &[n, c, h, w] = shape.as_slice() else {
            return Err(shape_err!("slice_channels expects [N, C, H, W], got {:?}", shape));
        };
        if len == 0 || start + len > c {
            return Err(invalid!("channel slice {start}..{} out of range for C={c}", start + len));
        }
        let hw = h * w;
        let mut index = Vec::with_capacity(n * len * hw);
        for b in 0..n {
            let base = (b * c + start) * hw;
            index.extend(base..base + len * hw);
        }
        self.gather(vec![n, len, h, w], Rc::new(index))
    }

    /// Nearest-neighbour upsampling of `[N, C, H, W]` by an integer factor.
    pub fn upsample_nearest(self, factor: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        let &[n, c, h, w] = shape.as_slice() else {
            return Err(shape_err!("upsample_nearest expects [N, C, H, W], got {:?}", shape));
        };
        if factor == 0 {
            return Err(invalid!("upsample factor must be positive"));
        }
        let (oh, ow) = (h * factor, w * factor);
        let mut index = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            for y in 0..oh {
                for x in 0..ow {
                    index.push(p * h * w + (y / factor) * w + x / factor);
                }
            }
        }
        self.gather(vec![n, c, oh, ow], Rc::new(index))
    }

    /// Nearest-neighbour downsampling (keep every `factor`-th site).
    pub fn downsample_nearest(self, factor: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        let &[n, c, h, w] = shape.as_slice() else {
            return Err(shape_err!("downsample_nearest expects [N, C, H, W], got {:?}", shape));
        };
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(invalid!("downsample factor {factor} must divide {h}x{w}"));
        }
        let (oh, ow) = (h / factor, w / factor);
        let mut index = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            for y in 0..oh {
                for x in 0..ow {
                    index.push(p * h * w + y * factor * w + x * factor);
                }
            }
        }
        self.gather(vec![n, c, oh, ow], Rc::new(index))
    }

    /// `softmax(self · keyᵀ / √D) · value`.
    ///
    /// Accepts `[L, D]` queries with `[M, D]` keys and values, or the batched
    /// `[B, L, D]` / `[B, M, D]` form.
    pub fn cross_attention(self, key: Var<'t>, value: Var<'t>) -> Result<Var<'t>> {
        let (qs, ks, vs) = (self.shape(), key.shape(), value.shape());
        let d = *qs.last().ok_or_else(|| shape_err!("query must have rank >= 1"))?;
        if d == 0 {
            return Err(invalid!("attention width D must be positive"));
        }
        if ks.last() != Some(&d) {
            return Err(shape_err!("attention width: query has D={d}, key has {:?}", ks.last()));
        }
        if ks[..ks.len() - 1] != vs[..vs.len() - 1] {
            return Err(shape_err!("attention key {:?} and value {:?} disagree on tokens", ks, vs));
        }
        let scores = self.matmul(key.transpose()?)?.scale(1.0 / (d as f64).sqrt());
        scores.softmax()?.matmul(value)
    }
}
