//! Reverse-mode differentiation over a linear record of primitive ops.
//!
//! A [`Tape`] owns every intermediate value produced during a forward pass.
//! Ops append nodes in execution order, so the node list is already a
//! topological order and [`Tape::backward`] is a single reverse sweep.
//!
//! Non-differentiable points use these conventions:
//! - `abs` at 0 has subgradient 0.
//! - `pow(x, c)` with non-integer `c` evaluates `max(x, 1e-8)^c`; the gradient
//!   is 0 where the floor is active.
//! - `log_floor(x, eps)` evaluates `ln(max(x, eps))`, gradient 0 below `eps`.
//! - `complex_abs(re, im)` is `sqrt(re^2 + im^2 + 1e-12)`.
//! - `atan2` returns zero gradients when `re^2 + im^2 < 1e-24`.
//! - `leaky_relu` uses the negative slope at exactly 0.

use super::kernels::{self, ConvDims, Conv2dSpec};
use super::tensor::{strides, Tensor};
use crate::error::{Error, Result};

/// Floor applied by `pow` for non-integer exponents.
pub const POW_FLOOR: f64 = 1e-8;
/// Bias inside the square root of `complex_abs`.
pub const COMPLEX_ABS_EPS: f64 = 1e-12;
const ATAN2_EPS: f64 = 1e-24;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A linear op with a hand-written adjoint, for transforms that are not worth
/// expressing through the primitive set (the STFT pair).
pub trait CustomOp {
    fn name(&self) -> &'static str;
    /// Gradients for each input, given the upstream gradient of the output.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor>;
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    MatMul { a: Var, b: Var, batch: usize, n: usize, k: usize, m: usize, shared_b: bool },
    Transpose(Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Exp(Var),
    Log { x: Var, floor: f64 },
    Abs(Var),
    ComplexAbs(Var, Var),
    Pow { x: Var, c: f64 },
    Sin(Var),
    Cos(Var),
    Atan2(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    LeakyRelu { x: Var, slope: f64 },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f64 },
    Conv2d { x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec },
    Conv2dTranspose { x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec },
    Sum(Var),
    SumAxis { x: Var, axis: usize },
    Mean(Var),
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when `v` is not on a
    /// path to the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn same_or_scalar(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() {
        Ok(a.shape().to_vec())
    } else if b.numel() == 1 {
        Ok(a.shape().to_vec())
    } else if a.numel() == 1 {
        Ok(b.shape().to_vec())
    } else {
        Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())))
    }
}

fn broadcast_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let (ad, bd) = (a.data(), b.data());
    if ad.len() == bd.len() {
        ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
    } else if bd.len() == 1 {
        ad.iter().map(|&x| f(x, bd[0])).collect()
    } else {
        bd.iter().map(|&y| f(ad[0], y)).collect()
    }
}

/// Reduce `g` onto an operand that may have been broadcast from a scalar.
fn unbroadcast(g: Vec<f64>, operand_numel: usize) -> Vec<f64> {
    if operand_numel == 1 && g.len() != 1 {
        vec![g.iter().sum()]
    } else {
        g
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let new_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let rank = new_shape.len();
    if rank == 0 {
        return (new_shape, data.to_vec());
    }
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    let last = rank - 1;
    let (last_len, last_stride) = (new_shape[last], src_strides[last]);
    if n == 0 {
        return (new_shape, out);
    }
    loop {
        for t in 0..last_len {
            out.push(data[src + t * last_stride]);
        }
        // advance all but the last axis
        let mut ax = last;
        loop {
            if ax == 0 {
                return (new_shape, out);
            }
            ax -= 1;
            idx[ax] += 1;
            src += src_strides[ax];
            if idx[ax] < new_shape[ax] {
                break;
            }
            src -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

fn layer_norm_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    // ---- elementwise binary -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = same_or_scalar("add", self.value(a), self.value(b))?;
        let data = broadcast_binary(self.value(a), self.value(b), |x, y| x + y);
        self.push("add", Tensor::from_parts(shape, data), Op::Add(a, b), self.ng(&[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = same_or_scalar("sub", self.value(a), self.value(b))?;
        let data = broadcast_binary(self.value(a), self.value(b), |x, y| x - y);
        self.push("sub", Tensor::from_parts(shape, data), Op::Sub(a, b), self.ng(&[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = same_or_scalar("mul", self.value(a), self.value(b))?;
        let data = broadcast_binary(self.value(a), self.value(b), |x, y| x * y);
        self.push("mul", Tensor::from_parts(shape, data), Op::Mul(a, b), self.ng(&[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x * c);
        self.push("scale", v, Op::Scale(a, c), self.ng(&[a]))
    }

    /// `x + b` where `b`'s shape equals the trailing dimensions of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x), self.shape(b));
        if bs.len() > xs.len() || xs[xs.len() - bs.len()..] != *bs {
            return Err(Error::shape("add_bias", format!("{:?} + {:?}", xs, bs)));
        }
        let bd = self.value(b).data();
        let n = bd.len().max(1);
        let data: Vec<f64> = self.value(x).data().iter().enumerate().map(|(i, v)| v + bd[i % n]).collect();
        let shape = self.shape(x).to_vec();
        self.push("add_bias", Tensor::from_parts(shape, data), Op::AddBias(x, b), self.ng(&[x, b]))
    }

    // ---- linear algebra & layout ----------------------------------------------

    /// Matrix product over the last two axes. `a` is `[..., n, k]`; `b` is either
    /// `[k, m]` (shared across all leading axes of `a`) or `[..., k, m]` with the
    /// same leading axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || Error::shape("matmul", format!("{:?} x {:?}", ash, bsh));
        if ash.len() < 2 || bsh.len() < 2 {
            return Err(bad());
        }
        let (n, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (kb, m) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        if k != kb {
            return Err(bad());
        }
        let lead = &ash[..ash.len() - 2];
        let shared_b = bsh.len() == 2;
        if !shared_b && bsh[..bsh.len() - 2] != *lead {
            return Err(bad());
        }
        let batch: usize = lead.iter().product();
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), batch, n, k, m, shared_b);
        let mut shape = lead.to_vec();
        shape.extend([n, m]);
        let op = Op::MatMul { a, b, batch, n, k, m, shared_b };
        self.push("matmul", Tensor::from_parts(shape, data), op, self.ng(&[a, b]))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(Error::shape("transpose", format!("{:?}", self.shape(a))));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        let (shape, data) = permute_data(self.value(a).data(), self.shape(a), &axes);
        self.push("transpose", Tensor::from_parts(shape, data), Op::Transpose(a), self.ng(&[a]))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a);
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&x| x >= shape.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(Error::shape("permute", format!("{:?} by {:?}", shape, axes)));
        }
        let (shape, data) = permute_data(self.value(a).data(), shape, axes);
        self.push("permute", Tensor::from_parts(shape, data), Op::Permute(a, axes.to_vec()), self.ng(&[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).numel() {
            return Err(Error::shape("reshape", format!("{:?} -> {:?}", self.shape(a), shape)));
        }
        let data = self.value(a).data().to_vec();
        self.push("reshape", Tensor::from_parts(shape.to_vec(), data), Op::Reshape(a), self.ng(&[a]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} of {:?}", base)));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
                return Err(Error::shape("concat", format!("{:?} vs {:?} on axis {axis}", base, s)));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let len = self.shape(*v)[axis] * inner;
                data.extend_from_slice(&self.value(*v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ng = self.ng(inputs);
        self.push("concat", Tensor::from_parts(shape, data), Op::Concat { inputs: inputs.to_vec(), axis }, ng)
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start > end || end > shape[axis] {
            return Err(Error::shape("slice", format!("{:?} axis {axis} [{start}, {end})", shape)));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            data.extend_from_slice(&src[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = end - start;
        self.push("slice", Tensor::from_parts(out_shape, data), Op::Slice { x, axis, start }, self.ng(&[x]))
    }

    // ---- elementwise unary ---------------------------------------------------

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let v = self.value(x).map(f);
        let ng = self.ng(&[x]);
        self.push(name, v, op, ng)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary("log", x, f64::ln, Op::Log { x, floor: 0.0 })
    }

    /// `ln(max(x, floor))`.
    pub fn log_floor(&mut self, x: Var, floor: f64) -> Result<Var> {
        self.unary("log", x, |v| v.max(floor).ln(), Op::Log { x, floor })
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary("abs", x, f64::abs, Op::Abs(x))
    }

    /// Magnitude of the complex number with planes `re`, `im`.
    pub fn complex_abs(&mut self, re: Var, im: Var) -> Result<Var> {
        if self.shape(re) != self.shape(im) {
            return Err(Error::shape("complex_abs", format!("{:?} vs {:?}", self.shape(re), self.shape(im))));
        }
        let data = broadcast_binary(self.value(re), self.value(im), |a, b| (a * a + b * b + COMPLEX_ABS_EPS).sqrt());
        let shape = self.shape(re).to_vec();
        self.push("complex_abs", Tensor::from_parts(shape, data), Op::ComplexAbs(re, im), self.ng(&[re, im]))
    }

    pub fn pow(&mut self, x: Var, c: f64) -> Result<Var> {
        let f = move |v: f64| if c.fract() == 0.0 { v.powi(c as i32) } else { v.max(POW_FLOOR).powf(c) };
        self.unary("pow", x, f, Op::Pow { x, c })
    }

    pub fn sin(&mut self, x: Var) -> Result<Var> {
        self.unary("sin", x, f64::sin, Op::Sin(x))
    }

    pub fn cos(&mut self, x: Var) -> Result<Var> {
        self.unary("cos", x, f64::cos, Op::Cos(x))
    }

    /// Angle of `re + j*im`.
    pub fn atan2(&mut self, im: Var, re: Var) -> Result<Var> {
        if self.shape(re) != self.shape(im) {
            return Err(Error::shape("atan2", format!("{:?} vs {:?}", self.shape(im), self.shape(re))));
        }
        let data = broadcast_binary(self.value(im), self.value(re), f64::atan2);
        let shape = self.shape(re).to_vec();
        self.push("atan2", Tensor::from_parts(shape, data), Op::Atan2(im, re), self.ng(&[im, re]))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary("tanh", x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.unary("leaky_relu", x, move |v| if v > 0.0 { v } else { slope * v }, Op::LeakyRelu { x, slope })
    }

    // ---- normalisation ---------------------------------------------------------

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", format!("axis {axis} of {:?}", shape)));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |t: usize| (o * len + t) * inner + i;
                let max = (0..len).map(|t| src[idx(t)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for t in 0..len {
                    let e = (src[idx(t)] - max).exp();
                    out[idx(t)] = e;
                    total += e;
                }
                for t in 0..len {
                    out[idx(t)] /= total;
                }
            }
        }
        self.push("softmax", Tensor::from_parts(shape, out), Op::Softmax { x, axis }, self.ng(&[x]))
    }

    /// Normalise over the last axis, then apply per-feature `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!("{:?} with gain {:?} bias {:?}", shape, self.shape(gain), self.shape(bias)),
            ));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut out = Vec::with_capacity(self.value(x).numel());
        for row in self.value(x).data().chunks(d) {
            let (mean, rstd) = layer_norm_stats(row, eps);
            out.extend(row.iter().enumerate().map(|(i, v)| (v - mean) * rstd * g[i] + b[i]));
        }
        let ng = self.ng(&[x, gain, bias]);
        self.push("layer_norm", Tensor::from_parts(shape, out), Op::LayerNorm { x, gain, bias, eps }, ng)
    }

    // ---- convolutions -------------------------------------------------------

    fn conv_dims(&self, op: &'static str, x_ci: (usize, usize, usize), w: Var, transpose: bool) -> Result<ConvDims> {
        let ws = self.shape(w);
        if ws.len() != 4 {
            return Err(Error::shape(op, format!("kernel {:?}", ws)));
        }
        let (wc_out, wc_in) = (ws[0], ws[1]);
        let (c, h, wd) = x_ci;
        let expect_in = if transpose { wc_out } else { wc_in };
        if c != expect_in {
            return Err(Error::shape(op, format!("input channels {c} vs kernel {:?}", ws)));
        }
        Ok(ConvDims { ci: wc_in, h, w: wd, co: wc_out, kh: ws[2], kw: ws[3], ho: 0, wo: 0 })
    }

    /// Cross-correlation of `x: [ci, h, w]` with `w: [co, ci, kh, kw]` plus optional bias `[co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::shape("conv2d", format!("input {:?}", xs)));
        }
        let mut d = self.conv_dims("conv2d", (xs[0], xs[1], xs[2]), w, false)?;
        let (ho, wo) = spec
            .output_size(d.h, d.w, d.kh, d.kw)
            .ok_or_else(|| Error::shape("conv2d", format!("input {:?} too small for kernel", xs)))?;
        d.ho = ho;
        d.wo = wo;
        if let Some(b) = b {
            if self.shape(b) != [d.co] {
                return Err(Error::shape("conv2d", format!("bias {:?} for {} outputs", self.shape(b), d.co)));
            }
        }
        let bias = b.map(|b| self.value(b).data());
        let data = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), bias, &d, &spec);
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        self.push("conv2d", Tensor::from_parts(vec![d.co, ho, wo], data), Op::Conv2d { x, w, b, spec }, ng)
    }

    /// Adjoint of [`Tape::conv2d`] for the same kernel and `spec`: maps
    /// `x: [co, ho, wo]` to `[ci, out_h, out_w]`, plus optional bias `[ci]`.
    /// `(out_h, out_w)` must be a size that `conv2d` maps back to `(ho, wo)`.
    pub fn conv2d_transpose(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: Conv2dSpec,
        out_hw: (usize, usize),
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::shape("conv2d_transpose", format!("input {:?}", xs)));
        }
        let mut d = self.conv_dims("conv2d_transpose", (xs[0], out_hw.0, out_hw.1), w, true)?;
        match spec.output_size(out_hw.0, out_hw.1, d.kh, d.kw) {
            Some((ho, wo)) if ho == xs[1] && wo == xs[2] => {
                d.ho = ho;
                d.wo = wo;
            }
            _ => {
                return Err(Error::shape(
                    "conv2d_transpose",
                    format!("output {:?} inconsistent with input {:?}", out_hw, xs),
                ))
            }
        }
        if let Some(b) = b {
            if self.shape(b) != [d.ci] {
                return Err(Error::shape("conv2d_transpose", format!("bias {:?} for {} outputs", self.shape(b), d.ci)));
            }
        }
        let mut data = kernels::conv2d_adjoint(self.value(x).data(), self.value(w).data(), &d, &spec);
        if let Some(b) = b {
            let plane = out_hw.0 * out_hw.1;
            for (c, bv) in self.value(b).data().iter().enumerate() {
                data[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v += bv);
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        let shape = vec![d.ci, out_hw.0, out_hw.1];
        self.push("conv2d_transpose", Tensor::from_parts(shape, data), Op::Conv2dTranspose { x, w, b, spec }, ng)
    }

    // ---- reductions ---------------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), self.ng(&[x]))
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("sum_axis", format!("axis {axis} of {:?}", shape)));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for t in 0..len {
                let row = &src[(o * len + t) * inner..(o * len + t + 1) * inner];
                for (dst, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *dst += v;
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        self.push("sum_axis", Tensor::from_parts(out_shape, out), Op::SumAxis { x, axis }, self.ng(&[x]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push("mean", Tensor::scalar(m), Op::Mean(x), self.ng(&[x]))
    }

    /// Record a custom op whose forward value has already been computed.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor, op: Box<dyn CustomOp>) -> Result<Var> {
        let ng = self.ng(inputs);
        let name = op.name();
        self.push(name, value, Op::Custom { inputs: inputs.to_vec(), op }, ng)
    }

    // ---- backward -------------------------------------------------------------

    /// Reverse sweep from the single-element node `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                let node = &self.nodes[i];
                g.filter(|_| node.needs_grad).map(|g| Tensor::from_parts(node.value.shape().to_vec(), g))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
            slot => *slot = Some(contrib),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let out = node.value.data();
        let elementwise = |x: Var, f: &dyn Fn(usize) -> f64| -> Vec<f64> { (0..val(x).len()).map(f).collect() };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.wants(*a) {
                    self.acc(grads, *a, unbroadcast(g.to_vec(), val(*a).len()));
                }
                if self.wants(*b) {
                    self.acc(grads, *b, unbroadcast(g.iter().map(|x| sign * x).collect(), val(*b).len()));
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a), val(*b));
                let pick = |d: &[f64], i: usize| if d.len() == 1 { d[0] } else { d[i] };
                if self.wants(*a) {
                    let ga = g.iter().enumerate().map(|(i, gv)| gv * pick(bd, i)).collect();
                    self.acc(grads, *a, unbroadcast(ga, ad.len()));
                }
                if self.wants(*b) {
                    let gb = g.iter().enumerate().map(|(i, gv)| gv * pick(ad, i)).collect();
                    self.acc(grads, *b, unbroadcast(gb, bd.len()));
                }
            }
            Op::Scale(a, c) => self.acc(grads, *a, g.iter().map(|x| x * c).collect()),
            Op::AddBias(x, b) => {
                self.acc(grads, *x, g.to_vec());
                if self.wants(*b) {
                    let n = val(*b).len().max(1);
                    let mut gb = vec![0.0; val(*b).len()];
                    for (i, gv) in g.iter().enumerate() {
                        gb[i % n] += gv;
                    }
                    self.acc(grads, *b, gb);
                }
            }
            Op::MatMul { a, b, batch, n, k, m, shared_b } => {
                if self.wants(*a) {
                    let ga = kernels::matmul_grad_a(g, val(*b), *batch, *n, *k, *m, *shared_b);
                    self.acc(grads, *a, ga);
                }
                if self.wants(*b) {
                    let gb = kernels::matmul_grad_b(val(*a), g, *batch, *n, *k, *m, *shared_b);
                    self.acc(grads, *b, gb);
                }
            }
            Op::Transpose(a) => {
                let r = node.value.rank();
                let mut axes: Vec<usize> = (0..r).collect();
                axes.swap(r - 2, r - 1);
                let (_, gd) = permute_data(g, node.value.shape(), &axes);
                self.acc(grads, *a, gd);
            }
            Op::Permute(a, axes) => {
                let mut inv = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inv[ax] = i;
                }
                let (_, gd) = permute_data(g, node.value.shape(), &inv);
                self.acc(grads, *a, gd);
            }
            Op::Reshape(a) => self.acc(grads, *a, g.to_vec()),
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = split_axis(shape, *axis);
                let mut offset = 0;
                for v in inputs {
                    let len = self.nodes[v.0].value.shape()[*axis];
                    if self.wants(*v) {
                        let mut gv = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            gv.extend_from_slice(&g[(o * total + offset) * inner..(o * total + offset + len) * inner]);
                        }
                        self.acc(grads, *v, gv);
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let xshape = self.nodes[x.0].value.shape();
                let (outer, len, inner) = split_axis(xshape, *axis);
                let width = node.value.shape()[*axis];
                let mut gx = vec![0.0; val(*x).len()];
                for o in 0..outer {
                    let dst = &mut gx[(o * len + start) * inner..(o * len + start + width) * inner];
                    dst.copy_from_slice(&g[o * width * inner..(o + 1) * width * inner]);
                }
                self.acc(grads, *x, gx);
            }
            Op::Exp(x) => self.acc(grads, *x, elementwise(*x, &|i| g[i] * out[i])),
            Op::Log { x, floor } => {
                let xd = val(*x);
                self.acc(grads, *x, elementwise(*x, &|i| if xd[i] > *floor { g[i] / xd[i] } else { 0.0 }));
            }
            Op::Abs(x) => {
                let xd = val(*x);
                self.acc(grads, *x, elementwise(*x, &|i| if xd[i] == 0.0 { 0.0 } else { g[i] * xd[i].signum() }));
            }
            Op::ComplexAbs(re, im) => {
                let (r, m) = (val(*re), val(*im));
                if self.wants(*re) {
                    self.acc(grads, *re, elementwise(*re, &|i| g[i] * r[i] / out[i]));
                }
                if self.wants(*im) {
                    self.acc(grads, *im, elementwise(*im, &|i| g[i] * m[i] / out[i]));
                }
            }
            Op::Pow { x, c } => {
                let xd = val(*x);
                let c = *c;
                let d = |i: usize| {
                    if c == 0.0 {
                        0.0
                    } else if c.fract() == 0.0 {
                        c * xd[i].powi(c as i32 - 1)
                    } else if xd[i] > POW_FLOOR {
                        c * xd[i].powf(c - 1.0)
                    } else {
                        0.0
                    }
                };
                self.acc(grads, *x, elementwise(*x, &|i| g[i] * d(i)));
            }
            Op::Sin(x) => {
                let xd = val(*x);
                self.acc(grads, *x, elementwise(*x, &|i| g[i] * xd[i].cos()));
            }
            Op::Cos(x) => {
                let xd = val(*x);
                self.acc(grads, *x, elementwise(*x, &|i| -g[i] * xd[i].sin()));
            }
            Op::Atan2(im, re) => {
                let (y, x) = (val(*im), val(*re));
                let r2 = |i: usize| x[i] * x[i] + y[i] * y[i];
                if self.wants(*im) {
                    let f = |i: usize| if r2(i) < ATAN2_EPS { 0.0 } else { g[i] * x[i] / r2(i) };
                    self.acc(grads, *im, elementwise(*im, &f));
                }
                if self.wants(*re) {
                    let f = |i: usize| if r2(i) < ATAN2_EPS { 0.0 } else { -g[i] * y[i] / r2(i) };
                    self.acc(grads, *re, elementwise(*re, &f));
                }
            }
            Op::Tanh(x) => self.acc(grads, *x, elementwise(*x, &|i| g[i] * (1.0 - out[i] * out[i]))),
            Op::Sigmoid(x) => self.acc(grads, *x, elementwise(*x, &|i| g[i] * out[i] * (1.0 - out[i]))),
            Op::LeakyRelu { x, slope } => {
                let xd = val(*x);
                self.acc(grads, *x, elementwise(*x, &|i| if xd[i] > 0.0 { g[i] } else { g[i] * slope }));
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let mut gx = vec![0.0; out.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |t: usize| (o * len + t) * inner + i;
                        let dotp: f64 = (0..len).map(|t| g[idx(t)] * out[idx(t)]).sum();
                        for t in 0..len {
                            gx[idx(t)] = out[idx(t)] * (g[idx(t)] - dotp);
                        }
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let d = *node.value.shape().last().unwrap_or(&1);
                let gn = val(*gain);
                let mut gx = vec![0.0; out.len()];
                let mut ggain = vec![0.0; d];
                let mut gbias = vec![0.0; d];
                for (r, row) in val(*x).chunks(d).enumerate() {
                    let (mean, rstd) = layer_norm_stats(row, *eps);
                    let gr = &g[r * d..(r + 1) * d];
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * rstd).collect();
                    let gxhat: Vec<f64> = gr.iter().zip(gn).map(|(a, b)| a * b).collect();
                    let m1 = gxhat.iter().sum::<f64>() / d as f64;
                    let m2 = gxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for i in 0..d {
                        gx[r * d + i] = rstd * (gxhat[i] - m1 - xhat[i] * m2);
                        ggain[i] += gr[i] * xhat[i];
                        gbias[i] += gr[i];
                    }
                }
                self.acc(grads, *x, gx);
                self.acc(grads, *gain, ggain);
                self.acc(grads, *bias, gbias);
            }
            Op::Conv2d { x, w, b, spec } => {
                let xs = self.nodes[x.0].value.shape();
                let ws = self.nodes[w.0].value.shape();
                let os = node.value.shape();
                let d = ConvDims { ci: xs[0], h: xs[1], w: xs[2], co: ws[0], kh: ws[2], kw: ws[3], ho: os[1], wo: os[2] };
                if self.wants(*x) {
                    self.acc(grads, *x, kernels::conv2d_adjoint(g, val(*w), &d, spec));
                }
                if self.wants(*w) {
                    self.acc(grads, *w, kernels::conv2d_weight_grad(val(*x), g, &d, spec));
                }
                if let Some(b) = b {
                    let plane = d.ho * d.wo;
                    self.acc(grads, *b, g.chunks(plane).map(|c| c.iter().sum()).collect());
                }
            }
            Op::Conv2dTranspose { x, w, b, spec } => {
                let xs = self.nodes[x.0].value.shape();
                let ws = self.nodes[w.0].value.shape();
                let os = node.value.shape();
                let d = ConvDims { ci: ws[1], h: os[1], w: os[2], co: ws[0], kh: ws[2], kw: ws[3], ho: xs[1], wo: xs[2] };
                if self.wants(*x) {
                    self.acc(grads, *x, kernels::conv2d_forward(g, val(*w), None, &d, spec));
                }
                if self.wants(*w) {
                    self.acc(grads, *w, kernels::conv2d_weight_grad(g, val(*x), &d, spec));
                }
                if let Some(b) = b {
                    let plane = d.h * d.w;
                    self.acc(grads, *b, g.chunks(plane).map(|c| c.iter().sum()).collect());
                }
            }
            Op::Sum(x) => self.acc(grads, *x, vec![g[0]; val(*x).len()]),
            Op::Mean(x) => {
                let n = val(*x).len();
                self.acc(grads, *x, vec![g[0] / n as f64; n]);
            }
            Op::SumAxis { x, axis } => {
                let (outer, len, inner) = split_axis(self.nodes[x.0].value.shape(), *axis);
                let mut gx = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    for _ in 0..len {
                        gx.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                let gt = Tensor::from_parts(node.value.shape().to_vec(), g.to_vec());
                for (v, gi) in inputs.iter().zip(op.backward(&ins, &node.value, &gt)) {
                    self.acc(grads, *v, gi.into_data());
                }
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
