//! Raw buffer kernels shared by the forward and backward passes.

use crate::float::Float;

/// Row-major strides of `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Numpy-style broadcast of two shapes, aligned on the trailing axis.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// How an operand maps onto a broadcast output.
#[derive(Debug, Clone)]
pub enum Mapping {
    /// Operand has exactly the output's element layout.
    Same,
    /// Operand repeats with period `n` (its shape is a suffix of the output's).
    Cyclic(usize),
    /// Operand element offset per output axis; 0 on broadcast axes.
    Strided(Vec<usize>),
}

impl Mapping {
    pub fn new(in_shape: &[usize], out_shape: &[usize]) -> Self {
        let trimmed: Vec<usize> = in_shape
            .iter()
            .copied()
            .skip_while(|&d| d == 1)
            .collect();
        let n: usize = in_shape.iter().product();
        if n == out_shape.iter().product::<usize>() {
            return Mapping::Same;
        }
        if trimmed.len() <= out_shape.len() && out_shape.ends_with(&trimmed) {
            return Mapping::Cyclic(n);
        }
        let in_strides = strides(in_shape);
        let offset = out_shape.len() - in_shape.len();
        let mut s = vec![0; out_shape.len()];
        for (i, (&d, &st)) in in_shape.iter().zip(&in_strides).enumerate() {
            if d != 1 {
                s[i + offset] = st;
            }
        }
        Mapping::Strided(s)
    }
}

/// Calls `f(out_index, in_index)` for every output element.
pub fn for_each_mapped(out_shape: &[usize], map: &Mapping, mut f: impl FnMut(usize, usize)) {
    let total: usize = out_shape.iter().product();
    match map {
        Mapping::Same => (0..total).for_each(|i| f(i, i)),
        Mapping::Cyclic(n) => (0..total).for_each(|i| f(i, i % n)),
        Mapping::Strided(st) => {
            let rank = out_shape.len();
            let mut idx = vec![0usize; rank];
            let mut off = 0usize;
            for i in 0..total {
                f(i, off);
                for ax in (0..rank).rev() {
                    idx[ax] += 1;
                    off += st[ax];
                    if idx[ax] < out_shape[ax] {
                        break;
                    }
                    off -= st[ax] * idx[ax];
                    idx[ax] = 0;
                }
            }
        }
    }
}

/// Elementwise binary op with broadcasting.
pub fn broadcast_binary<T: Float>(
    a: &[T],
    a_shape: &[usize],
    b: &[T],
    b_shape: &[usize],
    out_shape: &[usize],
    f: impl Fn(T, T) -> T,
) -> Vec<T> {
    let total: usize = out_shape.iter().product();
    let ma = Mapping::new(a_shape, out_shape);
    let mb = Mapping::new(b_shape, out_shape);
    if let (Mapping::Same, Mapping::Same) = (&ma, &mb) {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    if let (Mapping::Same, Mapping::Cyclic(n)) = (&ma, &mb) {
        let mut out = Vec::with_capacity(total);
        for chunk in a.chunks(*n) {
            out.extend(chunk.iter().zip(b).map(|(&x, &y)| f(x, y)));
        }
        return out;
    }
    let mut ia = vec![0usize; total];
    for_each_mapped(out_shape, &ma, |o, i| ia[o] = i);
    let mut out = vec![T::zero(); total];
    for_each_mapped(out_shape, &mb, |o, i| out[o] = f(a[ia[o]], b[i]));
    out
}

/// Sums `grad` (laid out as `out_shape`) down to `in_shape`.
pub fn reduce_to<T: Float>(grad: &[T], out_shape: &[usize], in_shape: &[usize]) -> Vec<T> {
    let n: usize = in_shape.iter().product();
    let map = Mapping::new(in_shape, out_shape);
    match map {
        Mapping::Same => grad.to_vec(),
        Mapping::Cyclic(period) => {
            let mut acc = vec![T::zero(); n];
            for chunk in grad.chunks(period) {
                for (a, &g) in acc.iter_mut().zip(chunk) {
                    *a = *a + g;
                }
            }
            acc
        }
        Mapping::Strided(_) => {
            let mut acc = vec![T::zero(); n];
            for_each_mapped(out_shape, &map, |o, i| acc[i] = acc[i] + grad[o]);
            acc
        }
    }
}

/// Strided matrix operand: element (i, j) lives at `offset + i * rs + j * cs`.
#[derive(Clone, Copy, Debug)]
pub struct MatView {
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl MatView {
    pub fn row_major(offset: usize, cols: usize) -> Self {
        Self {
            offset,
            rs: cols,
            cs: 1,
        }
    }

    /// The transpose of a row-major `rows × cols` block.
    pub fn transposed(offset: usize, cols: usize) -> Self {
        Self {
            offset,
            rs: 1,
            cs: cols,
        }
    }

    fn max_index(&self, rows: usize, cols: usize) -> usize {
        self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs
    }
}

/// `c[m×n] = a[m×k] · b[k×n] + beta · c`, with bounds checked against the slices.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Float>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    av: MatView,
    b: &[T],
    bv: MatView,
    beta: T,
    c: &mut [T],
    cv: MatView,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(cv.max_index(m, n) < c.len(), "gemm: output view out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let x = &mut c[cv.offset + i * cv.rs + j * cv.cs];
                *x = beta * *x;
            }
        }
        return;
    }
    assert!(av.max_index(m, k) < a.len(), "gemm: lhs view out of bounds");
    assert!(bv.max_index(k, n) < b.len(), "gemm: rhs view out of bounds");
    // SAFETY: the three asserts above bound every index the kernel touches.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            a.as_ptr().add(av.offset),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.offset),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}

/// Reorders axes: output axis `i` is input axis `axes[i]`.
pub fn permute<T: Float>(data: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let st: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    if rank == 0 {
        out.extend_from_slice(data);
        return out;
    }
    let inner = out_shape[rank - 1];
    let inner_stride = st[rank - 1];
    let outer = total / inner;
    let mut idx = vec![0usize; rank - 1];
    let mut off = 0usize;
    for _ in 0..outer {
        if inner_stride == 1 {
            out.extend_from_slice(&data[off..off + inner]);
        } else {
            out.extend((0..inner).map(|j| data[off + j * inner_stride]));
        }
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            off += st[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= st[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    out
}

pub fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

pub fn add_into<T: Float>(acc: &mut [T], x: &[T]) {
    for (a, &v) in acc.iter_mut().zip(x) {
        *a = *a + v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 3], &[2]), None);
        assert_eq!(broadcast_shape(&[], &[5]), Some(vec![5]));
    }

    #[test]
    fn strided_broadcast_matches_manual() {
        // [2,1] + [1,3]
        let a = [1.0f64, 2.0];
        let b = [10.0f64, 20.0, 30.0];
        let out = broadcast_binary(&a, &[2, 1], &b, &[1, 3], &[2, 3], |x, y| x + y);
        assert_eq!(out, vec![11.0, 21.0, 31.0, 12.0, 22.0, 32.0]);
        let back = reduce_to(&out, &[2, 3], &[2, 1]);
        assert_eq!(back, vec![63.0, 66.0]);
    }

    #[test]
    fn permute_then_inverse_is_identity() {
        let shape = [2, 3, 4];
        let data: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let axes = [2, 0, 1];
        let p = permute(&data, &shape, &axes);
        assert_eq!(p[1], 4.0); // out[0,0,1] = in[0,1,0]
        let back = permute(&p, &[4, 2, 3], &inverse_axes(&axes));
        assert_eq!(back, data);
    }

    #[test]
    fn gemm_transposed_views() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        gemm(2, 2, 2, &a, MatView::transposed(0, 2), &b, MatView::row_major(0, 2), 0.0, &mut c, MatView::row_major(0, 2));
        // a^T b = [[1,3],[2,4]]·b = [[26,30],[38,44]]
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
    }
}
