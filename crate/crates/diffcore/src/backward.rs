use crate::error::{DiffError, Result};
use crate::float::Float;
use crate::graph::{cosine_parts, gelu_grad, Graph, Op, Var, COSINE_EPS};
use crate::kernels::{self, MatView};
use crate::params::{GradientLayout, GradientVector};
use crate::tensor::Tensor;
use std::sync::Arc;

/// Per-node adjoint buffers for one reverse sweep.
struct Adjoints<T> {
    slots: Vec<Option<Vec<T>>>,
}

impl<T: Float> Adjoints<T> {
    fn accumulate(&mut self, v: Var, g: Vec<T>) {
        match &mut self.slots[v.0] {
            Some(acc) => kernels::add_into(acc, &g),
            slot @ None => *slot = Some(g),
        }
    }
}

impl<T: Float> Graph<T> {
    /// Reverse-mode gradient of the scalar `loss` with respect to the parameters in
    /// `layout`, flattened in layout order. Parameters the loss does not reach get a
    /// zero block. The graph is left intact, so further calls are allowed.
    pub fn backward(&self, loss: Var, layout: &Arc<GradientLayout>) -> Result<GradientVector<T>> {
        let targets: Vec<Option<Var>> = layout.names().iter().map(|n| self.param_var(n)).collect();
        let leaf_vars: Vec<Var> = targets.iter().flatten().copied().collect();
        let grads = self.backward_vars(loss, &leaf_vars)?;
        let mut flat = vec![T::zero(); layout.total()];
        let mut it = grads.into_iter();
        for (i, t) in targets.iter().enumerate() {
            if t.is_some() {
                let g = it.next().expect("one gradient per bound target");
                let off = layout.offset(i);
                flat[off..off + g.numel()].copy_from_slice(g.data());
            }
        }
        Ok(GradientVector::new(layout.clone(), flat))
    }

    /// Reverse-mode gradient of `loss` with respect to arbitrary nodes.
    pub fn backward_vars(&self, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor<T>>> {
        if loss.0 >= self.nodes.len() {
            return Err(DiffError::UnknownNode(loss.0));
        }
        let lt = &self.nodes[loss.0].value;
        if lt.numel() != 1 {
            return Err(DiffError::NonScalarLoss(lt.shape().to_vec()));
        }
        for w in wrt {
            if w.0 >= self.nodes.len() {
                return Err(DiffError::UnknownNode(w.0));
            }
        }
        // Nodes on some path from a target to the loss.
        let mut relevant = vec![false; loss.0 + 1];
        for w in wrt {
            if w.0 <= loss.0 {
                relevant[w.0] = true;
            }
        }
        for i in 0..=loss.0 {
            if !relevant[i] && self.nodes[i].op.grad_inputs().iter().any(|v| relevant[v.0]) {
                relevant[i] = true;
            }
        }
        let is_target = {
            let mut t = vec![false; loss.0 + 1];
            for w in wrt {
                if w.0 <= loss.0 {
                    t[w.0] = true;
                }
            }
            t
        };
        let mut adj = Adjoints { slots: vec![None; loss.0 + 1] };
        if relevant[loss.0] {
            adj.slots[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            if !relevant[i] {
                continue;
            }
            let grad = if is_target[i] {
                match &adj.slots[i] {
                    Some(g) => g.clone(),
                    None => continue,
                }
            } else {
                match adj.slots[i].take() {
                    Some(g) => g,
                    None => continue,
                }
            };
            let before: Vec<Var> = self.nodes[i].op.grad_inputs();
            self.propagate(i, &grad, &relevant, &mut adj)?;
            for v in before {
                if relevant[v.0] {
                    if let Some(g) = &adj.slots[v.0] {
                        if g.iter().any(|x| !x.is_finite()) {
                            return Err(DiffError::NonFiniteGradient {
                                op: self.nodes[i].op.name(),
                                node: i,
                            });
                        }
                    }
                }
            }
        }
        Ok(wrt
            .iter()
            .map(|w| {
                let shape = self.nodes[w.0].value.shape().to_vec();
                let data = if w.0 <= loss.0 {
                    adj.slots[w.0].clone()
                } else {
                    None
                };
                match data {
                    Some(d) => Tensor::new(shape, d).expect("adjoint matches node shape"),
                    None => Tensor::zeros(&shape),
                }
            })
            .collect())
    }

    fn propagate(&self, i: usize, g: &[T], relevant: &[bool], adj: &mut Adjoints<T>) -> Result<()> {
        let node = &self.nodes[i];
        let out_shape = node.value.shape();
        let val = |v: Var| &self.nodes[v.0].value;
        let want = |v: Var| relevant[v.0];
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                if want(*a) {
                    adj.accumulate(*a, kernels::reduce_to(g, out_shape, val(*a).shape()));
                }
                if want(*b) {
                    let mut gb = kernels::reduce_to(g, out_shape, val(*b).shape());
                    if sign < T::zero() {
                        gb.iter_mut().for_each(|x| *x = -*x);
                    }
                    adj.accumulate(*b, gb);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if want(*a) {
                    let prod = kernels::broadcast_binary(g, out_shape, tb.data(), tb.shape(), out_shape, |x, y| x * y);
                    adj.accumulate(*a, kernels::reduce_to(&prod, out_shape, ta.shape()));
                }
                if want(*b) {
                    let prod = kernels::broadcast_binary(g, out_shape, ta.data(), ta.shape(), out_shape, |x, y| x * y);
                    adj.accumulate(*b, kernels::reduce_to(&prod, out_shape, tb.shape()));
                }
            }
            Op::Div(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if want(*a) {
                    let q = kernels::broadcast_binary(g, out_shape, tb.data(), tb.shape(), out_shape, |x, y| x / y);
                    adj.accumulate(*a, kernels::reduce_to(&q, out_shape, ta.shape()));
                }
                if want(*b) {
                    // d(a/b)/db = -out / b
                    let out = node.value.data();
                    let t = kernels::broadcast_binary(out, out_shape, tb.data(), tb.shape(), out_shape, |o, y| o / y);
                    let prod: Vec<T> = g.iter().zip(&t).map(|(&x, &y)| -x * y).collect();
                    adj.accumulate(*b, kernels::reduce_to(&prod, out_shape, tb.shape()));
                }
            }
            Op::Scale(a, c) => {
                if want(*a) {
                    adj.accumulate(*a, g.iter().map(|&x| x * *c).collect());
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if want(*a) {
                    adj.accumulate(*a, g.to_vec());
                }
            }
            Op::StraightThrough { grad_to, .. } => {
                if want(*grad_to) {
                    adj.accumulate(*grad_to, g.to_vec());
                }
            }
            Op::BroadcastTo(a) => {
                if want(*a) {
                    adj.accumulate(*a, kernels::reduce_to(g, out_shape, val(*a).shape()));
                }
            }
            Op::MatMul(a, b) => self.matmul_backward(*a, *b, g, relevant, adj),
            Op::Permute(a, axes) => {
                if want(*a) {
                    adj.accumulate(*a, kernels::permute(g, out_shape, &kernels::inverse_axes(axes)));
                }
            }
            Op::Concat(xs, axis) => {
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let total = out_shape[*axis];
                let mut start = 0;
                for &x in xs {
                    let n = val(x).shape()[*axis];
                    if want(x) {
                        let mut gx = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let base = (o * total + start) * inner;
                            gx.extend_from_slice(&g[base..base + n * inner]);
                        }
                        adj.accumulate(x, gx);
                    }
                    start += n;
                }
            }
            Op::Slice { src, axis, start } => {
                if want(*src) {
                    let in_shape = val(*src).shape();
                    let outer: usize = in_shape[..*axis].iter().product();
                    let inner: usize = in_shape[*axis + 1..].iter().product();
                    let len = out_shape[*axis];
                    let mut gx = vec![T::zero(); val(*src).numel()];
                    for o in 0..outer {
                        let dst = (o * in_shape[*axis] + start) * inner;
                        let srcoff = o * len * inner;
                        gx[dst..dst + len * inner].copy_from_slice(&g[srcoff..srcoff + len * inner]);
                    }
                    adj.accumulate(*src, gx);
                }
            }
            Op::Sum { src, axis } | Op::Mean { src, axis } => {
                if want(*src) {
                    let in_shape = val(*src).shape();
                    let is_mean = matches!(node.op, Op::Mean { .. });
                    let gx = match axis {
                        None => {
                            let s = if is_mean { g[0] / T::from_f64(val(*src).numel() as f64) } else { g[0] };
                            vec![s; val(*src).numel()]
                        }
                        Some(ax) => {
                            let outer: usize = in_shape[..*ax].iter().product();
                            let inner: usize = in_shape[*ax + 1..].iter().product();
                            let n = in_shape[*ax];
                            let scale = if is_mean { T::one() / T::from_f64(n as f64) } else { T::one() };
                            let mut gx = Vec::with_capacity(outer * n * inner);
                            for o in 0..outer {
                                let row = &g[o * inner..(o + 1) * inner];
                                for _ in 0..n {
                                    gx.extend(row.iter().map(|&x| x * scale));
                                }
                            }
                            gx
                        }
                    };
                    adj.accumulate(*src, gx);
                }
            }
            Op::Exp(a) => {
                if want(*a) {
                    let out = node.value.data();
                    adj.accumulate(*a, g.iter().zip(out).map(|(&x, &y)| x * y).collect());
                }
            }
            Op::Log(a) => {
                if want(*a) {
                    adj.accumulate(*a, g.iter().zip(val(*a).data()).map(|(&x, &y)| x / y).collect());
                }
            }
            Op::Sqrt(a) => {
                if want(*a) {
                    let half = T::from_f64(0.5);
                    let out = node.value.data();
                    adj.accumulate(*a, g.iter().zip(out).map(|(&x, &y)| x * half / y).collect());
                }
            }
            Op::Relu(a) => {
                if want(*a) {
                    let gx = g
                        .iter()
                        .zip(val(*a).data())
                        .map(|(&x, &y)| if y > T::zero() { x } else { T::zero() })
                        .collect();
                    adj.accumulate(*a, gx);
                }
            }
            Op::Abs(a) => {
                if want(*a) {
                    let gx = g
                        .iter()
                        .zip(val(*a).data())
                        .map(|(&x, &y)| {
                            if y > T::zero() {
                                x
                            } else if y < T::zero() {
                                -x
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    adj.accumulate(*a, gx);
                }
            }
            Op::Gelu(a) => {
                if want(*a) {
                    let gx = g
                        .iter()
                        .zip(val(*a).data())
                        .map(|(&x, &y)| x * gelu_grad(y))
                        .collect();
                    adj.accumulate(*a, gx);
                }
            }
            Op::Softmax(a) => {
                if want(*a) {
                    let d = *out_shape.last().unwrap_or(&1);
                    let y = node.value.data();
                    let mut gx = Vec::with_capacity(y.len());
                    for (yr, gr) in y.chunks(d).zip(g.chunks(d)) {
                        let s = yr.iter().zip(gr).fold(T::zero(), |s, (&p, &q)| s + p * q);
                        gx.extend(yr.iter().zip(gr).map(|(&p, &q)| p * (q - s)));
                    }
                    adj.accumulate(*a, gx);
                }
            }
            Op::LayerNorm { x, gamma, beta, rstd } => {
                let tx = val(*x);
                let gam = val(*gamma).data();
                let d = gam.len();
                let inv_d = T::one() / T::from_f64(d as f64);
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                let mut dx = Vec::with_capacity(if want(*x) { tx.numel() } else { 0 });
                let mut xhat = vec![T::zero(); d];
                let mut dxhat = vec![T::zero(); d];
                for ((row, gr), &r) in tx.data().chunks(d).zip(g.chunks(d)).zip(rstd) {
                    let mu = row.iter().fold(T::zero(), |s, &v| s + v) * inv_d;
                    for j in 0..d {
                        xhat[j] = (row[j] - mu) * r;
                        dxhat[j] = gr[j] * gam[j];
                        dgamma[j] = dgamma[j] + gr[j] * xhat[j];
                        dbeta[j] = dbeta[j] + gr[j];
                    }
                    if want(*x) {
                        let m1 = dxhat.iter().fold(T::zero(), |s, &v| s + v) * inv_d;
                        let m2 = dxhat.iter().zip(&xhat).fold(T::zero(), |s, (&p, &q)| s + p * q) * inv_d;
                        dx.extend((0..d).map(|j| r * (dxhat[j] - m1 - xhat[j] * m2)));
                    }
                }
                if want(*x) {
                    adj.accumulate(*x, dx);
                }
                if want(*gamma) {
                    adj.accumulate(*gamma, dgamma);
                }
                if want(*beta) {
                    adj.accumulate(*beta, dbeta);
                }
            }
            Op::Embedding { table, indices } => {
                if want(*table) {
                    let t = val(*table);
                    let d = t.shape()[1];
                    let mut gt = vec![T::zero(); t.numel()];
                    for (r, &idx) in indices.iter().enumerate() {
                        kernels::add_into(&mut gt[idx * d..(idx + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                    adj.accumulate(*table, gt);
                }
            }
            Op::Cosine { a, b } => {
                let (ta, tb) = (val(*a), val(*b));
                let d = *ta.shape().last().unwrap_or(&1);
                let eps = T::from_f64(COSINE_EPS);
                let mut ga = Vec::with_capacity(ta.numel());
                let mut gb = Vec::with_capacity(tb.numel());
                for ((x, y), &go) in ta.data().chunks(d).zip(tb.data().chunks(d)).zip(g) {
                    let (dot, nx, ny) = cosine_parts(x, y);
                    let den = nx * ny + eps;
                    let c = dot / (den * den);
                    // d|x|/dx = x/|x|, taken as 0 at the origin.
                    let kx = if nx > T::zero() { c * ny / nx } else { T::zero() };
                    let ky = if ny > T::zero() { c * nx / ny } else { T::zero() };
                    ga.extend(x.iter().zip(y).map(|(&p, &q)| go * (q / den - kx * p)));
                    gb.extend(x.iter().zip(y).map(|(&p, &q)| go * (p / den - ky * q)));
                }
                if want(*a) {
                    adj.accumulate(*a, ga);
                }
                if want(*b) {
                    adj.accumulate(*b, gb);
                }
            }
            Op::CrossEntropy { logits, targets, mask, probs, count } => {
                if want(*logits) {
                    let v = *val(*logits).shape().last().unwrap_or(&1);
                    let scale = g[0] / T::from_f64(*count as f64);
                    let mut gl = vec![T::zero(); probs.len()];
                    for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                        if !m {
                            continue;
                        }
                        let row = &mut gl[r * v..(r + 1) * v];
                        for (j, x) in row.iter_mut().enumerate() {
                            *x = probs[r * v + j] * scale;
                        }
                        row[t] = row[t] - scale;
                    }
                    adj.accumulate(*logits, gl);
                }
            }
        }
        Ok(())
    }

    fn matmul_backward(&self, a: Var, b: Var, g: &[T], relevant: &[bool], adj: &mut Adjoints<T>) {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (ta.shape(), tb.shape());
        let k = sa[sa.len() - 1];
        let n = sb[sb.len() - 1];
        if sb.len() == 2 {
            let rows = ta.numel() / k;
            if relevant[a.0] {
                // dA = dC · Bᵀ
                let mut ga = vec![T::zero(); ta.numel()];
                kernels::gemm(
                    rows,
                    n,
                    k,
                    g,
                    MatView::row_major(0, n),
                    tb.data(),
                    MatView::transposed(0, n),
                    T::zero(),
                    &mut ga,
                    MatView::row_major(0, k),
                );
                adj.accumulate(a, ga);
            }
            if relevant[b.0] {
                // dB = Aᵀ · dC
                let mut gb = vec![T::zero(); tb.numel()];
                kernels::gemm(
                    k,
                    rows,
                    n,
                    ta.data(),
                    MatView::transposed(0, k),
                    g,
                    MatView::row_major(0, n),
                    T::zero(),
                    &mut gb,
                    MatView::row_major(0, n),
                );
                adj.accumulate(b, gb);
            }
        } else {
            let m = sa[sa.len() - 2];
            let batches = ta.numel() / (m * k);
            if relevant[a.0] {
                let mut ga = vec![T::zero(); ta.numel()];
                for bi in 0..batches {
                    kernels::gemm(
                        m,
                        n,
                        k,
                        g,
                        MatView::row_major(bi * m * n, n),
                        tb.data(),
                        MatView::transposed(bi * k * n, n),
                        T::zero(),
                        &mut ga,
                        MatView::row_major(bi * m * k, k),
                    );
                }
                adj.accumulate(a, ga);
            }
            if relevant[b.0] {
                let mut gb = vec![T::zero(); tb.numel()];
                for bi in 0..batches {
                    kernels::gemm(
                        k,
                        m,
                        n,
                        ta.data(),
                        MatView::transposed(bi * m * k, k),
                        g,
                        MatView::row_major(bi * m * n, n),
                        T::zero(),
                        &mut gb,
                        MatView::row_major(bi * k * n, n),
                    );
                }
                adj.accumulate(b, gb);
            }
        }
    }
}
