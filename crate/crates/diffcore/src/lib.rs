//! Reverse-mode differentiation over dense row-major tensors.
//!
//! A [`Graph`] records primitive operations as they execute. Node values stay alive
//! until the graph is dropped, so several scalar losses built on one graph can each
//! be differentiated, which is what gradient-conflict detection needs.

mod backward;
mod compose;
mod error;
mod float;
pub mod gradcheck;
mod graph;
pub mod kernels;
mod params;
mod tensor;

pub use compose::{causal_mask, MASK_NEG};
pub use error::{DiffError, Result};
pub use float::Float;
pub use graph::{deterministic_mode, Graph, Var, COSINE_EPS, LAYER_NORM_EPS};
pub use params::{GradientLayout, GradientVector, ParamStore, Parameter};
pub use tensor::{numel, Tensor};

/// Indices of the nearest row of `table: [K, d]` for each row of `rows: [N, d]` by
/// squared Euclidean distance; ties go to the lowest index. Not differentiable.
pub fn argmin_rows<T: Float>(rows: &Tensor<T>, table: &Tensor<T>) -> Result<Vec<usize>> {
    let d = *table.shape().last().unwrap_or(&0);
    if table.rank() != 2 || rows.shape().last() != Some(&d) {
        return Err(DiffError::ShapeMismatch {
            op: "argmin_rows",
            lhs: rows.shape().to_vec(),
            rhs: table.shape().to_vec(),
        });
    }
    let k = table.shape()[0];
    let mut out = Vec::with_capacity(rows.numel() / d);
    for r in rows.data().chunks(d) {
        let mut best = 0;
        let mut best_d = T::infinity();
        for j in 0..k {
            let e = table.row(j);
            let dist = r.iter().zip(e).fold(T::zero(), |s, (&a, &b)| s + (a - b) * (a - b));
            if dist.is_nan() {
                return Err(DiffError::NonFinite { op: "argmin_rows", node: j });
            }
            if dist < best_d {
                best_d = dist;
                best = j;
            }
        }
        out.push(best);
    }
    Ok(out)
}
