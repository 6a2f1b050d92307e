use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{DiffError, Result};
use crate::float::Float;
use crate::kernels::{self, MatView};
use crate::params::ParamStore;
use crate::tensor::{numel, Tensor};

/// Layer-normalization epsilon.
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Added to cosine-similarity denominators.
pub const COSINE_EPS: f64 = 1e-8;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    BroadcastTo(Var),
    Concat(Vec<Var>, usize),
    Slice { src: Var, axis: usize, start: usize },
    Sum { src: Var, axis: Option<usize> },
    Mean { src: Var, axis: Option<usize> },
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Relu(Var),
    Gelu(Var),
    Abs(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, rstd: Vec<T> },
    Embedding { table: Var, indices: Vec<usize> },
    Cosine { a: Var, b: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Vec<bool>, probs: Vec<T>, count: usize },
    StopGradient,
    StraightThrough { grad_to: Var },
}

impl<T> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Permute(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::BroadcastTo(..) => "broadcast_to",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sqrt(..) => "sqrt",
            Op::Relu(..) => "relu",
            Op::Gelu(..) => "gelu",
            Op::Abs(..) => "abs",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Embedding { .. } => "embedding",
            Op::Cosine { .. } => "cosine_similarity",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::StopGradient => "stop_gradient",
            Op::StraightThrough { .. } => "straight_through",
        }
    }

    /// Inputs that gradients can flow into.
    pub(crate) fn grad_inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::StopGradient => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Permute(a, _)
            | Op::Reshape(a)
            | Op::BroadcastTo(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Sqrt(a)
            | Op::Relu(a)
            | Op::Gelu(a)
            | Op::Abs(a)
            | Op::Softmax(a) => vec![*a],
            Op::Concat(xs, _) => xs.clone(),
            Op::Slice { src, .. } | Op::Sum { src, .. } | Op::Mean { src, .. } => vec![*src],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Embedding { table, .. } => vec![*table],
            Op::Cosine { a, b } => vec![*a, *b],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::StraightThrough { grad_to, .. } => vec![*grad_to],
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
}

/// Whether kernels may fan out across threads. Reads `DERA_DETERMINISTIC`; any value
/// other than `0` (or unset) keeps everything on the calling thread.
pub fn deterministic_mode() -> bool {
    std::env::var("DERA_DETERMINISTIC").map(|v| v.trim() != "0").unwrap_or(true)
}

/// A recorded computation. Values of every node are retained until the graph is
/// dropped, so `backward` can be called any number of times.
#[derive(Debug, Clone)]
pub struct Graph<T: Float = f32> {
    pub(crate) nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
    parallel: bool,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// `tanh` through one `exp`, saturating before the exponential overflows.
#[inline]
fn fast_tanh<T: Float>(u: T) -> T {
    let one = T::one();
    if u.abs() > T::from_f64(15.0) {
        return one.copysign(u);
    }
    let e = (u + u).exp();
    (e - one) / (e + one)
}

#[inline]
fn gelu_scalar<T: Float>(x: T) -> T {
    let half = T::from_f64(0.5);
    let u = T::from_f64(GELU_C) * (x + T::from_f64(GELU_A) * x * x * x);
    half * x * (T::one() + fast_tanh(u))
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&1)
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            parallel: !deterministic_mode(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Graph leaf registered for parameter `name`, if any.
    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(DiffError::UnknownNode(v.0))
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        let node = self.nodes.len();
        if !value.is_finite() {
            return Err(DiffError::NonFinite { op: op.name(), node });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(node))
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf)
    }

    /// A named differentiable leaf. Binding the same name twice returns the first
    /// leaf, so a parameter used in several places accumulates one gradient.
    pub fn param(&mut self, name: &str, value: &Tensor<T>) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let v = self.push(value.clone(), Op::Leaf)?;
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Binds parameter `name` from `store`.
    pub fn bind(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store
            .get(name)
            .ok_or_else(|| DiffError::UnknownParameter(name.to_string()))?;
        self.param(name, value)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let out_shape =
            kernels::broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| DiffError::ShapeMismatch {
                op: name,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            })?;
        let data = kernels::broadcast_binary(ta.data(), ta.shape(), tb.data(), tb.shape(), &out_shape, f);
        self.push(Tensor::from_parts(out_shape, data), op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        self.check(a)?;
        let t = &self.nodes[a.0].value;
        let data = t.data().iter().map(|&x| f(x)).collect();
        let shape = t.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), op)
    }

    /// `c · a` for a constant `c`.
    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -T::one())
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.ln(), Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.sqrt(), Op::Sqrt(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, gelu_scalar, Op::Gelu(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.abs(), Op::Abs(a))
    }

    /// Same value, zero gradient.
    pub fn stop_gradient(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x, Op::StopGradient)
    }

    /// Forward value of `value`, backward routed unchanged into `grad_to`.
    pub fn straight_through(&mut self, value: Var, grad_to: Var) -> Result<Var> {
        self.check(value)?;
        self.check(grad_to)?;
        if self.shape(value) != self.shape(grad_to) {
            return Err(DiffError::ShapeMismatch {
                op: "straight_through",
                lhs: self.shape(value).to_vec(),
                rhs: self.shape(grad_to).to_vec(),
            });
        }
        let v = self.nodes[value.0].value.clone();
        self.push(v, Op::StraightThrough { grad_to })
    }

    /// Batched matrix product. `a: [.., m, k]`; `b` is either `[k, n]` (shared) or
    /// `[.., k, n]` with the same leading dims as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mismatch = || DiffError::ShapeMismatch {
            op: "matmul",
            lhs: ta.shape().to_vec(),
            rhs: tb.shape().to_vec(),
        };
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(mismatch());
        }
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(n);
        let mut out = vec![T::zero(); numel(&out_shape)];
        if sb.len() == 2 {
            let rows = ta.numel() / k;
            kernels::gemm(
                rows,
                k,
                n,
                ta.data(),
                MatView::row_major(0, k),
                tb.data(),
                MatView::row_major(0, n),
                T::zero(),
                &mut out,
                MatView::row_major(0, n),
            );
        } else {
            if sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                return Err(mismatch());
            }
            let (ad, bd) = (ta.data(), tb.data());
            let body = |(bi, chunk): (usize, &mut [T])| {
                kernels::gemm(
                    m,
                    k,
                    n,
                    ad,
                    MatView::row_major(bi * m * k, k),
                    bd,
                    MatView::row_major(bi * k * n, n),
                    T::zero(),
                    chunk,
                    MatView::row_major(0, n),
                );
            };
            if self.parallel {
                out.par_chunks_mut(m * n).enumerate().for_each(body);
            } else {
                out.chunks_mut(m * n).enumerate().for_each(body);
            }
        }
        self.push(Tensor::from_parts(out_shape, out), Op::MatMul(a, b))
    }

    /// Axis permutation; output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.check(a)?;
        let t = &self.nodes[a.0].value;
        let rank = t.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&x| x >= rank || std::mem::replace(&mut seen[x], true)) {
            return Err(DiffError::InvalidArgument {
                op: "transpose",
                msg: format!("{axes:?} is not a permutation of rank {rank}"),
            });
        }
        let data = kernels::permute(t.data(), t.shape(), axes);
        let shape = axes.iter().map(|&x| t.shape()[x]).collect();
        self.push(Tensor::from_parts(shape, data), Op::Permute(a, axes.to_vec()))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let rank = self.shape(a).len();
        if rank < 2 {
            return Err(DiffError::InvalidAxis { op: "transpose", axis: 1, rank });
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(a, &axes)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check(a)?;
        let t = &self.nodes[a.0].value;
        if numel(shape) != t.numel() || shape.contains(&0) {
            return Err(DiffError::ShapeMismatch {
                op: "reshape",
                lhs: t.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = t.data().to_vec();
        self.push(Tensor::from_parts(shape.to_vec(), data), Op::Reshape(a))
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check(a)?;
        let t = &self.nodes[a.0].value;
        if kernels::broadcast_shape(t.shape(), shape).as_deref() != Some(shape) {
            return Err(DiffError::ShapeMismatch {
                op: "broadcast_to",
                lhs: t.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let map = kernels::Mapping::new(t.shape(), shape);
        let mut out = vec![T::zero(); numel(shape)];
        kernels::for_each_mapped(shape, &map, |o, i| out[o] = t.data()[i]);
        self.push(Tensor::from_parts(shape.to_vec(), out), Op::BroadcastTo(a))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| DiffError::InvalidArgument {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        for &x in xs {
            self.check(x)?;
        }
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(DiffError::InvalidAxis { op: "concat", axis, rank: base.len() });
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (p, q))| i == axis || p == q);
            if !compatible {
                return Err(DiffError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let mut out = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &x in xs {
                let t = &self.nodes[x.0].value;
                let block = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        self.push(Tensor::from_parts(out_shape, out), Op::Concat(xs.to_vec(), axis))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check(a)?;
        let t = &self.nodes[a.0].value;
        let shape = t.shape();
        if axis >= shape.len() {
            return Err(DiffError::InvalidAxis { op: "slice", axis, rank: shape.len() });
        }
        if len == 0 || start + len > shape[axis] {
            return Err(DiffError::InvalidArgument {
                op: "slice",
                msg: format!("range {start}..{} exceeds axis size {}", start + len, shape[axis]),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        self.push(Tensor::from_parts(out_shape, out), Op::Slice { src: a, axis, start })
    }

    fn reduce(&mut self, a: Var, axis: Option<usize>, mean: bool) -> Result<Var> {
        self.check(a)?;
        let t = &self.nodes[a.0].value;
        let name = if mean { "mean" } else { "sum" };
        let (shape, data) = match axis {
            None => {
                let s = t.data().iter().fold(T::zero(), |acc, &x| acc + x);
                let v = if mean { s / T::from_f64(t.numel() as f64) } else { s };
                (Vec::new(), vec![v])
            }
            Some(ax) => {
                let sh = t.shape();
                if ax >= sh.len() {
                    return Err(DiffError::InvalidAxis { op: name, axis: ax, rank: sh.len() });
                }
                let outer: usize = sh[..ax].iter().product();
                let inner: usize = sh[ax + 1..].iter().product();
                let n = sh[ax];
                let mut out = vec![T::zero(); outer * inner];
                for o in 0..outer {
                    for j in 0..n {
                        let src = &t.data()[(o * n + j) * inner..(o * n + j + 1) * inner];
                        kernels::add_into(&mut out[o * inner..(o + 1) * inner], src);
                    }
                }
                if mean {
                    let inv = T::one() / T::from_f64(n as f64);
                    out.iter_mut().for_each(|x| *x = *x * inv);
                }
                let mut shape = sh.to_vec();
                shape.remove(ax);
                (shape, out)
            }
        };
        let op = if mean { Op::Mean { src: a, axis } } else { Op::Sum { src: a, axis } };
        self.push(Tensor::from_parts(shape, data), op)
    }

    /// Sum over `axis` (removed from the shape), or over everything when `None`.
    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(a, axis, false)
    }

    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(a, axis, true)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let t = &self.nodes[a.0].value;
        let d = last_dim(t.shape());
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(d) {
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let mut s = T::zero();
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                s = s + *x;
            }
            let inv = T::one() / s;
            row.iter_mut().for_each(|x| *x = *x * inv);
        }
        let shape = t.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Softmax(a))
    }

    /// Layer normalization over the last axis with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        let t = &self.nodes[x.0].value;
        let d = last_dim(t.shape());
        let (g, b) = (&self.nodes[gamma.0].value, &self.nodes[beta.0].value);
        if g.shape() != [d] || b.shape() != [d] {
            return Err(DiffError::ShapeMismatch {
                op: "layer_norm",
                lhs: t.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let eps = T::from_f64(LAYER_NORM_EPS);
        let inv_d = T::one() / T::from_f64(d as f64);
        let mut out = Vec::with_capacity(t.numel());
        let mut rstd = Vec::with_capacity(t.numel() / d);
        for row in t.data().chunks(d) {
            let mu = row.iter().fold(T::zero(), |s, &v| s + v) * inv_d;
            let var = row.iter().fold(T::zero(), |s, &v| s + (v - mu) * (v - mu)) * inv_d;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            out.extend(
                row.iter()
                    .zip(g.data().iter().zip(b.data()))
                    .map(|(&v, (&gg, &bb))| (v - mu) * r * gg + bb),
            );
        }
        let shape = t.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::LayerNorm { x, gamma, beta, rstd })
    }

    /// Row gather from `table: [V, d]`; output shape is `index_shape ++ [d]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize], index_shape: &[usize]) -> Result<Var> {
        self.check(table)?;
        let t = &self.nodes[table.0].value;
        if t.rank() != 2 || numel(index_shape) != indices.len() {
            return Err(DiffError::InvalidArgument {
                op: "embedding",
                msg: format!("table {:?} with {} indices for shape {index_shape:?}", t.shape(), indices.len()),
            });
        }
        let (v, d) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= v {
                return Err(DiffError::IndexOutOfRange { op: "embedding", index: i, bound: v });
            }
            out.extend_from_slice(t.row(i));
        }
        let mut shape = index_shape.to_vec();
        shape.push(d);
        self.push(Tensor::from_parts(shape, out), Op::Embedding { table, indices: indices.to_vec() })
    }

    /// Cosine similarity along the last axis: `dot / (|a| |b| + 1e-8)`.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() || ta.rank() == 0 {
            return Err(DiffError::ShapeMismatch {
                op: "cosine_similarity",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let d = last_dim(ta.shape());
        let eps = T::from_f64(COSINE_EPS);
        let out = ta
            .data()
            .chunks(d)
            .zip(tb.data().chunks(d))
            .map(|(x, y)| {
                let (dot, nx, ny) = cosine_parts(x, y);
                dot / (nx * ny + eps)
            })
            .collect();
        let shape = ta.shape()[..ta.rank() - 1].to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Cosine { a, b })
    }

    /// Mean cross-entropy of `logits: [.., V]` against `targets`, counting only rows
    /// whose `mask` entry is true (all rows when `mask` is `None`).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: Option<&[bool]>) -> Result<Var> {
        self.check(logits)?;
        let t = &self.nodes[logits.0].value;
        let v = last_dim(t.shape());
        let rows = t.numel() / v;
        if targets.len() != rows || mask.is_some_and(|m| m.len() != rows) {
            return Err(DiffError::InvalidArgument {
                op: "cross_entropy",
                msg: format!("{rows} logit rows but {} targets", targets.len()),
            });
        }
        let mask: Vec<bool> = mask.map(<[bool]>::to_vec).unwrap_or_else(|| vec![true; rows]);
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(DiffError::InvalidArgument {
                op: "cross_entropy",
                msg: "every position is masked".into(),
            });
        }
        let mut probs = Vec::with_capacity(t.numel());
        let mut total = T::zero();
        for (r, row) in t.data().chunks(v).enumerate() {
            if targets[r] >= v {
                return Err(DiffError::IndexOutOfRange { op: "cross_entropy", index: targets[r], bound: v });
            }
            let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let s = row.iter().fold(T::zero(), |s, &x| s + (x - max).exp());
            let lse = max + s.ln();
            if mask[r] {
                total = total + (lse - row[targets[r]]);
            }
            probs.extend(row.iter().map(|&x| (x - lse).exp()));
        }
        let value = total / T::from_f64(count as f64);
        self.push(
            Tensor::scalar(value),
            Op::CrossEntropy { logits, targets: targets.to_vec(), mask, probs, count },
        )
    }
}

pub(crate) fn cosine_parts<T: Float>(x: &[T], y: &[T]) -> (T, T, T) {
    let mut dot = T::zero();
    let mut xx = T::zero();
    let mut yy = T::zero();
    for (&p, &q) in x.iter().zip(y) {
        dot = dot + p * q;
        xx = xx + p * p;
        yy = yy + q * q;
    }
    (dot, xx.sqrt(), yy.sqrt())
}

#[inline]
pub(crate) fn gelu_grad<T: Float>(x: T) -> T {
    let (half, one) = (T::from_f64(0.5), T::one());
    let (c, a) = (T::from_f64(GELU_C), T::from_f64(GELU_A));
    let th = fast_tanh(c * (x + a * x * x * x));
    half * (one + th) + half * x * (one - th * th) * c * (one + T::from_f64(3.0) * a * x * x)
}
