//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only tape. Every primitive evaluates eagerly,
//! checks its output for non-finite values, and records enough to run its
//! backward rule. [`Graph::backward`] walks the tape in strict reverse append
//! order, accumulating gradients additively into each input.
//!
//! ```
//! use hiercvae_core::autodiff::Graph;
//! use hiercvae_core::tensor::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq).unwrap();
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
//! ```

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Epsilon added to the variance inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    ScalarLhs,
    ScalarRhs,
    /// rhs is a vector broadcast along the last axis of lhs.
    RowRhs(usize),
}

impl Bcast {
    #[inline]
    fn lhs(self, i: usize) -> usize {
        match self {
            Bcast::ScalarLhs => 0,
            _ => i,
        }
    }

    #[inline]
    fn rhs(self, i: usize) -> usize {
        match self {
            Bcast::Same | Bcast::ScalarLhs => i,
            Bcast::ScalarRhs => 0,
            Bcast::RowRhs(n) => i % n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnOp {
    Exp,
    Log,
    Sqrt,
    Tanh,
    Sigmoid,
    Softplus,
    Relu,
    Neg,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Binary(BinOp, Var, Var, Bcast),
    Unary(UnOp, Var),
    Powf(Var, f64),
    Affine(Var, f64),
    Clamp(Var, f64, f64),
    Sum(Var),
    SumAxis(Var, usize),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    Reshape(Var),
    Transpose(Var),
    Softmax(Var, usize),
    LayerNorm { x: Var, gain: Var, bias: Var, axis: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Conv1d { x: Var, kernel: Var, bias: Var },
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + libm::log1p(libm::exp(-x))
    } else {
        libm::log1p(libm::exp(x))
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// The differentiation tape.
#[derive(Debug, Default)]
pub struct Graph {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    requires_grad: Vec<bool>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite value produced by {name}")));
        }
        self.values.push(value);
        self.ops.push(op);
        self.requires_grad.push(requires_grad);
        Ok(Var(self.values.len() - 1))
    }

    /// Adds a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.values.push(value);
        self.ops.push(Op::Leaf);
        self.requires_grad.push(true);
        Var(self.values.len() - 1)
    }

    /// Adds a leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.values.push(value);
        self.ops.push(Op::Leaf);
        self.requires_grad.push(false);
        Var(self.values.len() - 1)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.values[v.0].data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires_grad[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.requires_grad[v.0])
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg, "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::dim("transpose", format!("rank {} input", s.len())));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(a), rg, "transpose")
    }

    // ---- elementwise binary ----

    fn binary(&mut self, op: BinOp, a: Var, b: Var, name: &'static str) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (bc, shape) = if ta.shape() == tb.shape() {
            (Bcast::Same, ta.shape().to_vec())
        } else if tb.numel() == 1 {
            (Bcast::ScalarRhs, ta.shape().to_vec())
        } else if ta.numel() == 1 {
            (Bcast::ScalarLhs, tb.shape().to_vec())
        } else if tb.rank() == 1 && ta.rank() >= 2 && ta.shape()[ta.rank() - 1] == tb.numel() {
            (Bcast::RowRhs(tb.numel()), ta.shape().to_vec())
        } else {
            return Err(Error::dim(name, format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        };
        let numel: usize = shape.iter().product();
        let (da, db) = (ta.data(), tb.data());
        let mut out = Vec::with_capacity(numel);
        for i in 0..numel {
            let (x, y) = (da[bc.lhs(i)], db[bc.rhs(i)]);
            out.push(match op {
                BinOp::Add => x + y,
                BinOp::Sub => x - y,
                BinOp::Mul => x * y,
                BinOp::Div => x / y,
            });
        }
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(shape, out)?, Op::Binary(op, a, b, bc), rg, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Add, a, b, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Sub, a, b, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Mul, a, b, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Div, a, b, "div")
    }

    // ---- elementwise unary ----

    fn unary(&mut self, op: UnOp, a: Var, name: &'static str) -> Result<Var> {
        let t = self.value(a);
        match op {
            UnOp::Log if t.data().iter().any(|&v| v < 0.0) => {
                return Err(Error::Domain { op: name, detail: "negative input".into() })
            }
            UnOp::Sqrt if t.data().iter().any(|&v| v < 0.0) => {
                return Err(Error::Domain { op: name, detail: "negative input".into() })
            }
            _ => {}
        }
        let f: fn(f64) -> f64 = match op {
            UnOp::Exp => libm::exp,
            UnOp::Log => libm::log,
            UnOp::Sqrt => libm::sqrt,
            UnOp::Tanh => libm::tanh,
            UnOp::Sigmoid => sigmoid,
            UnOp::Softplus => softplus,
            UnOp::Relu => |x| if x > 0.0 { x } else { 0.0 },
            UnOp::Neg => |x| -x,
        };
        let out: Vec<f64> = t.data().iter().map(|&v| f(v)).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::new(shape, out)?, Op::Unary(op, a), rg, name)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnOp::Exp, a, "exp")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnOp::Log, a, "log")
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(UnOp::Sqrt, a, "sqrt")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(UnOp::Tanh, a, "tanh")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(UnOp::Sigmoid, a, "sigmoid")
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(UnOp::Softplus, a, "softplus")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnOp::Relu, a, "relu")
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(UnOp::Neg, a, "neg")
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        let t = self.value(a);
        if libm::trunc(p) != p && t.data().iter().any(|&v| v < 0.0) {
            return Err(Error::Domain { op: "powf", detail: format!("negative base with exponent {p}") });
        }
        let out: Vec<f64> = t.data().iter().map(|&v| libm::pow(v, p)).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::new(shape, out)?, Op::Powf(a, p), rg, "powf")
    }

    /// `scale * a + shift` with constant coefficients.
    pub fn affine_const(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        let t = self.value(a);
        let out: Vec<f64> = t.data().iter().map(|&v| scale * v + shift).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::new(shape, out)?, Op::Affine(a, scale), rg, "affine_const")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.affine_const(a, c, 0.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.affine_const(a, 1.0, c)
    }

    /// Elementwise clamp; gradient passes where `lo <= x <= hi`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let t = self.value(a);
        let out: Vec<f64> = t.data().iter().map(|&v| v.clamp(lo, hi)).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::new(shape, out)?, Op::Clamp(a, lo, hi), rg, "clamp")
    }

    // ---- reductions ----

    /// Sum of every element, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Sums over `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() {
            return Err(Error::dim("sum_axis", format!("axis {axis} on rank {}", t.rank())));
        }
        let (outer, len, inner) = axis_extents(t.shape(), axis);
        let src = t.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let base = (o * len + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let rg = self.rg(&[a]);
        self.push(Tensor::new(shape, out)?, Op::SumAxis(a, axis), rg, "sum_axis")
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let len = *self
            .shape(a)
            .get(axis)
            .ok_or_else(|| Error::dim("mean_axis", format!("axis {axis} out of range")))?;
        let s = self.sum_axis(a, axis)?;
        self.scale(s, 1.0 / len as f64)
    }

    // ---- structural ----

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat", format!("axis {axis} on rank {}", base.len())));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !ok {
                return Err(Error::dim("concat", format!("{s:?} vs {base:?} along axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_extents(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.rg(parts);
        self.push(Tensor::new(shape, out)?, Op::Concat(parts.to_vec(), axis), rg, "concat")
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() || start + len > t.shape()[axis] {
            return Err(Error::dim("slice", format!("[{start}, {}) on axis {axis} of {:?}", start + len, t.shape())));
        }
        let (outer, full, inner) = axis_extents(t.shape(), axis);
        let src = t.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * full + start) * inner;
            out.extend_from_slice(&src[from..from + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let rg = self.rg(&[a]);
        self.push(Tensor::new(shape, out)?, Op::Slice(a, axis, start), rg, "slice")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(&[a]);
        self.push(t, Op::Reshape(a), rg, "reshape")
    }

    // ---- normalization ----

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() {
            return Err(Error::dim("softmax", format!("axis {axis} on rank {}", t.rank())));
        }
        let (outer, len, inner) = axis_extents(t.shape(), axis);
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| src[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..len {
                    let e = libm::exp(src[idx(k)] - max);
                    out[idx(k)] = e;
                    z += e;
                }
                for k in 0..len {
                    out[idx(k)] /= z;
                }
            }
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(&[a]);
        self.push(Tensor::new(shape, out)?, Op::Softmax(a, axis), rg, "softmax")
    }

    /// Layer normalization along `axis` with population variance, followed
    /// by a per-position gain and bias of length `shape[axis]`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::dim("layer_norm", format!("axis {axis} on rank {}", t.rank())));
        }
        let (outer, len, inner) = axis_extents(t.shape(), axis);
        if self.value(gain).numel() != len || self.value(bias).numel() != len {
            return Err(Error::dim("layer_norm", format!("gain/bias must have {len} entries")));
        }
        let src = t.data();
        let (gv, bv) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let mu = (0..len).map(|k| src[idx(k)]).sum::<f64>() / len as f64;
                let var = (0..len).map(|k| { let d = src[idx(k)] - mu; d * d }).sum::<f64>() / len as f64;
                let inv = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
                inv_std[o * inner + i] = inv;
                for k in 0..len {
                    let h = (src[idx(k)] - mu) * inv;
                    xhat[idx(k)] = h;
                    out[idx(k)] = gv[k] * h + bv[k];
                }
            }
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(&[x, gain, bias]);
        self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm { x, gain, bias, axis, xhat, inv_std },
            rg,
            "layer_norm",
        )
    }

    /// Depthwise 1-D convolution over time with "same" zero padding.
    ///
    /// `x` is `[T, C]`, `kernel` is `[C, K]` with odd `K`, `bias` is `[C]`.
    pub fn conv1d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if sx.len() != 2 || sk.len() != 2 || sk[0] != sx[1] || sk[1] % 2 == 0 {
            return Err(Error::dim("conv1d", format!("signal {sx:?} kernel {sk:?}")));
        }
        if self.value(bias).numel() != sx[1] {
            return Err(Error::dim("conv1d", "bias must have one entry per channel"));
        }
        let (t_len, c, k) = (sx[0], sx[1], sk[1]);
        let half = k / 2;
        let (xs, ks, bs) = (self.value(x).data(), self.value(kernel).data(), self.value(bias).data());
        let mut out = vec![0.0; t_len * c];
        for t in 0..t_len {
            for ch in 0..c {
                let mut acc = bs[ch];
                for j in 0..k {
                    let src = t as isize + j as isize - half as isize;
                    if src >= 0 && (src as usize) < t_len {
                        acc += ks[ch * k + j] * xs[src as usize * c + ch];
                    }
                }
                out[t * c + ch] = acc;
            }
        }
        let rg = self.rg(&[x, kernel, bias]);
        self.push(Tensor::new(sx, out)?, Op::Conv1d { x, kernel, bias }, rg, "conv1d")
    }

    // ---- backward ----

    /// Populates gradients for every node that requires them.
    ///
    /// Fails on a non-scalar loss, or when called twice without
    /// [`Graph::reset_grads`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::contract("backward called twice without reset_grads"));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = vec![None; self.values.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.requires_grad[i] {
                continue;
            }
            let (before, after) = self.grads.split_at_mut(i);
            let Some(gout) = after[0].as_deref() else { continue };
            backprop_node(&self.ops[i], &self.values, &self.requires_grad, &self.values[i], gout, before);
        }
        self.backward_done = true;
        Ok(())
    }

    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor, zeros when the node received none.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let shape = self.shape(v);
        match self.grad(v) {
            Some(g) => Tensor::new(shape.to_vec(), g.to_vec()).expect("grad shape"),
            None => Tensor::zeros(shape),
        }
    }
}

fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], req: &[bool], values: &[Tensor], v: Var) -> Option<&'a mut [f64]> {
    if !req[v.0] {
        return None;
    }
    let slot = &mut grads[v.0];
    if slot.is_none() {
        *slot = Some(vec![0.0; values[v.0].numel()]);
    }
    slot.as_deref_mut()
}

fn backprop_node(
    op: &Op,
    values: &[Tensor],
    req: &[bool],
    out: &Tensor,
    gout: &[f64],
    grads: &mut [Option<Vec<f64>>],
) {
    let val = |v: Var| values[v.0].data();
    match op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (sa, sb) = (values[a.0].shape(), values[b.0].shape());
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            let (av, bv) = (val(*a), val(*b));
            if let Some(ga) = acc(grads, req, values, *a) {
                for i in 0..m {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += gout[i * n + j] * bv[p * n + j];
                        }
                        ga[i * k + p] += s;
                    }
                }
            }
            if let Some(gb) = acc(grads, req, values, *b) {
                for i in 0..m {
                    for p in 0..k {
                        let a_ip = av[i * k + p];
                        if a_ip == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            gb[p * n + j] += a_ip * gout[i * n + j];
                        }
                    }
                }
            }
        }
        Op::Binary(kind, a, b, bc) => {
            let (av, bv) = (val(*a), val(*b));
            if let Some(ga) = acc(grads, req, values, *a) {
                for (i, g) in gout.iter().enumerate() {
                    let y = bv[bc.rhs(i)];
                    ga[bc.lhs(i)] += g * match kind {
                        BinOp::Add | BinOp::Sub => 1.0,
                        BinOp::Mul => y,
                        BinOp::Div => 1.0 / y,
                    };
                }
            }
            if let Some(gb) = acc(grads, req, values, *b) {
                for (i, g) in gout.iter().enumerate() {
                    let (x, y) = (av[bc.lhs(i)], bv[bc.rhs(i)]);
                    gb[bc.rhs(i)] += g * match kind {
                        BinOp::Add => 1.0,
                        BinOp::Sub => -1.0,
                        BinOp::Mul => x,
                        BinOp::Div => -x / (y * y),
                    };
                }
            }
        }
        Op::Unary(kind, a) => {
            let (x, y) = (val(*a), out.data());
            if let Some(ga) = acc(grads, req, values, *a) {
                for i in 0..gout.len() {
                    let d = match kind {
                        UnOp::Exp => y[i],
                        UnOp::Log => 1.0 / x[i],
                        UnOp::Sqrt => 0.5 / y[i],
                        UnOp::Tanh => 1.0 - y[i] * y[i],
                        UnOp::Sigmoid => y[i] * (1.0 - y[i]),
                        UnOp::Softplus => sigmoid(x[i]),
                        UnOp::Relu => {
                            if x[i] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        UnOp::Neg => -1.0,
                    };
                    ga[i] += gout[i] * d;
                }
            }
        }
        Op::Powf(a, p) => {
            let x = val(*a);
            if let Some(ga) = acc(grads, req, values, *a) {
                for i in 0..gout.len() {
                    ga[i] += gout[i] * p * libm::pow(x[i], p - 1.0);
                }
            }
        }
        Op::Affine(a, scale) => {
            if let Some(ga) = acc(grads, req, values, *a) {
                for (g, d) in ga.iter_mut().zip(gout) {
                    *g += scale * d;
                }
            }
        }
        Op::Clamp(a, lo, hi) => {
            let x = val(*a);
            if let Some(ga) = acc(grads, req, values, *a) {
                for i in 0..gout.len() {
                    if x[i] >= *lo && x[i] <= *hi {
                        ga[i] += gout[i];
                    }
                }
            }
        }
        Op::Sum(a) => {
            if let Some(ga) = acc(grads, req, values, *a) {
                for g in ga.iter_mut() {
                    *g += gout[0];
                }
            }
        }
        Op::SumAxis(a, axis) => {
            let (outer, len, inner) = axis_extents(values[a.0].shape(), *axis);
            if let Some(ga) = acc(grads, req, values, *a) {
                for o in 0..outer {
                    for k in 0..len {
                        for i in 0..inner {
                            ga[(o * len + k) * inner + i] += gout[o * inner + i];
                        }
                    }
                }
            }
        }
        Op::Concat(parts, axis) => {
            let (outer, total, inner) = axis_extents(out.shape(), *axis);
            let mut offset = 0;
            for p in parts {
                let len = values[p.0].shape()[*axis];
                if let Some(gp) = acc(grads, req, values, *p) {
                    for o in 0..outer {
                        for k in 0..len * inner {
                            gp[o * len * inner + k] += gout[(o * total + offset) * inner + k];
                        }
                    }
                }
                offset += len;
            }
        }
        Op::Slice(a, axis, start) => {
            let (outer, full, inner) = axis_extents(values[a.0].shape(), *axis);
            let len = out.shape()[*axis];
            if let Some(ga) = acc(grads, req, values, *a) {
                for o in 0..outer {
                    let from = (o * full + start) * inner;
                    for k in 0..len * inner {
                        ga[from + k] += gout[o * len * inner + k];
                    }
                }
            }
        }
        Op::Reshape(a) => {
            if let Some(ga) = acc(grads, req, values, *a) {
                for (g, d) in ga.iter_mut().zip(gout) {
                    *g += d;
                }
            }
        }
        Op::Transpose(a) => {
            let s = values[a.0].shape();
            let (r, c) = (s[0], s[1]);
            if let Some(ga) = acc(grads, req, values, *a) {
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += gout[j * r + i];
                    }
                }
            }
        }
        Op::Softmax(a, axis) => {
            let (outer, len, inner) = axis_extents(out.shape(), *axis);
            let y = out.data();
            if let Some(ga) = acc(grads, req, values, *a) {
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..len).map(|k| gout[idx(k)] * y[idx(k)]).sum();
                        for k in 0..len {
                            ga[idx(k)] += y[idx(k)] * (gout[idx(k)] - dot);
                        }
                    }
                }
            }
        }
        Op::LayerNorm { x, gain, bias, axis, xhat, inv_std } => {
            let (outer, len, inner) = axis_extents(out.shape(), *axis);
            let gv = val(*gain);
            if let Some(gx) = acc(grads, req, values, *x) {
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + i;
                        let inv = inv_std[o * inner + i];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for k in 0..len {
                            let dh = gout[idx(k)] * gv[k];
                            s1 += dh;
                            s2 += dh * xhat[idx(k)];
                        }
                        let nf = len as f64;
                        for k in 0..len {
                            let dh = gout[idx(k)] * gv[k];
                            gx[idx(k)] += inv / nf * (nf * dh - s1 - xhat[idx(k)] * s2);
                        }
                    }
                }
            }
            if let Some(gg) = acc(grads, req, values, *gain) {
                for o in 0..outer {
                    for k in 0..len {
                        for i in 0..inner {
                            let j = (o * len + k) * inner + i;
                            gg[k] += gout[j] * xhat[j];
                        }
                    }
                }
            }
            if let Some(gb) = acc(grads, req, values, *bias) {
                for o in 0..outer {
                    for k in 0..len {
                        for i in 0..inner {
                            gb[k] += gout[(o * len + k) * inner + i];
                        }
                    }
                }
            }
        }
        Op::Conv1d { x, kernel, bias } => {
            let sx = values[x.0].shape();
            let (t_len, c) = (sx[0], sx[1]);
            let k = values[kernel.0].shape()[1];
            let half = k / 2;
            let (xs, ks) = (val(*x), val(*kernel));
            let taps = |t: usize, j: usize| {
                let src = t as isize + j as isize - half as isize;
                (src >= 0 && (src as usize) < t_len).then_some(src as usize)
            };
            if let Some(gx) = acc(grads, req, values, *x) {
                for t in 0..t_len {
                    for j in 0..k {
                        if let Some(src) = taps(t, j) {
                            for ch in 0..c {
                                gx[src * c + ch] += gout[t * c + ch] * ks[ch * k + j];
                            }
                        }
                    }
                }
            }
            if let Some(gk) = acc(grads, req, values, *kernel) {
                for t in 0..t_len {
                    for j in 0..k {
                        if let Some(src) = taps(t, j) {
                            for ch in 0..c {
                                gk[ch * k + j] += gout[t * c + ch] * xs[src * c + ch];
                            }
                        }
                    }
                }
            }
            if let Some(gb) = acc(grads, req, values, *bias) {
                for t in 0..t_len {
                    for ch in 0..c {
                        gb[ch] += gout[t * c + ch];
                    }
                }
            }
        }
    }
}
