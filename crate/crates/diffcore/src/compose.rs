//! Operations built from the primitive catalogue.

use crate::error::Result;
use crate::float::Float;
use crate::graph::{Graph, Var};

/// Additive mask value for disallowed attention pairs; `exp` of it underflows to 0.
pub const MASK_NEG: f64 = -1e9;

impl<T: Float> Graph<T> {
    /// `softmax(q kᵀ / sqrt(d) + mask) v` over inputs shaped `[.., n, d]`.
    /// `mask` is an additive constant broadcast onto the score matrix.
    pub fn scaled_dot_product_attention(&mut self, q: Var, k: Var, v: Var, mask: Option<Var>) -> Result<Var> {
        let d = *self.shape(q).last().unwrap_or(&1);
        let kt = self.transpose(k)?;
        let scores = self.matmul(q, kt)?;
        let mut scores = self.scale(scores, T::from_f64(1.0 / (d as f64).sqrt()))?;
        if let Some(m) = mask {
            scores = self.add(scores, m)?;
        }
        let probs = self.softmax(scores)?;
        self.matmul(probs, v)
    }

    /// Mean of squared entries.
    pub fn mean_square(&mut self, a: Var) -> Result<Var> {
        let sq = self.mul(a, a)?;
        self.mean(sq, None)
    }
}

/// Additive causal mask `[n, n]`: 0 on and below the diagonal, `MASK_NEG` above.
pub fn causal_mask<T: Float>(n: usize) -> crate::Tensor<T> {
    let mut data = vec![T::zero(); n * n];
    for i in 0..n {
        for j in i + 1..n {
            data[i * n + j] = T::from_f64(MASK_NEG);
        }
    }
    crate::Tensor::new(vec![n, n], data).expect("square mask")
}
