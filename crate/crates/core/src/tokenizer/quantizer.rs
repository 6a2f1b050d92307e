//! Nearest-neighbour vector quantization with a learnable codebook.

use diffcore::{Float, Graph, ParamStore, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn;

pub const CODEBOOK: &str = "quantizer.codebook";
pub const PROJ_IN: &str = "quantizer.proj_in";
pub const DEFAULT_BETA: f64 = 0.25;

/// Graph handles produced by quantizing a `[B, L, d]` block.
#[derive(Debug, Clone)]
pub struct QuantVars {
    /// Projected rows before snapping, `[B, L, d_z]`.
    pub z_pre: Var,
    /// Snapped code vectors with straight-through gradient to `z_pre`.
    pub y: Var,
    pub indices: Vec<usize>,
    /// `mean((sg(z) − e)²)`.
    pub codebook_loss: Var,
    /// `mean((z − sg(e))²)`.
    pub commit_loss: Var,
}

/// Projects `z` to the code space and snaps each row to its nearest code. When
/// `frozen` is given those indices are used instead of the search, which keeps the
/// snap fixed under small parameter perturbations.
pub fn quantize_graph<T: Float>(g: &mut Graph<T>, store: &ParamStore<T>, z: Var, frozen: Option<&[usize]>) -> Result<QuantVars> {
    let z_pre = nn::linear(g, store, PROJ_IN, z)?;
    let shape = g.shape(z_pre).to_vec();
    let d_z = *shape.last().expect("rank-3 input");
    let rows = g.value(z_pre).numel() / d_z;
    let table = g.bind(store, CODEBOOK)?;
    if g.shape(table)[0] == 0 {
        return Err(Error::Invalid("empty codebook".into()));
    }
    let indices = match frozen {
        Some(ix) if ix.len() == rows => ix.to_vec(),
        Some(ix) => {
            return Err(Error::Invalid(format!("{} frozen indices for {rows} rows", ix.len())));
        }
        None => {
            let flat = g.value(z_pre).clone().reshape(vec![rows, d_z])?;
            diffcore::argmin_rows(&flat, g.value(table))?
        }
    };
    let e = g.embedding(table, &indices, &shape[..shape.len() - 1])?;
    let z_sg = g.stop_gradient(z_pre)?;
    let e_sg = g.stop_gradient(e)?;
    let diff = g.sub(z_sg, e)?;
    let codebook_loss = g.mean_square(diff)?;
    let diff = g.sub(z_pre, e_sg)?;
    let commit_loss = g.mean_square(diff)?;
    let y = g.straight_through(e, z_pre)?;
    Ok(QuantVars { z_pre, y, indices, codebook_loss, commit_loss })
}

/// Per-entry hit counters over one epoch plus a running total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodebookUsage {
    pub epoch_counts: Vec<u64>,
    pub total_counts: Vec<u64>,
}

impl CodebookUsage {
    pub fn new(k: usize) -> Self {
        Self { epoch_counts: vec![0; k], total_counts: vec![0; k] }
    }

    pub fn record(&mut self, indices: &[usize]) {
        for &i in indices {
            self.epoch_counts[i] += 1;
            self.total_counts[i] += 1;
        }
    }

    /// Entries not hit since the last epoch reset.
    pub fn dead(&self) -> Vec<usize> {
        (0..self.epoch_counts.len()).filter(|&i| self.epoch_counts[i] == 0).collect()
    }

    pub fn reset_epoch(&mut self) {
        self.epoch_counts.iter_mut().for_each(|c| *c = 0);
    }
}

/// Fraction of entries hit at least once.
pub fn usage_fraction(counts: &[u64]) -> f64 {
    counts.iter().filter(|&&c| c > 0).count() as f64 / counts.len().max(1) as f64
}

/// `exp` of the entropy of the empirical code distribution.
pub fn perplexity(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let q = c as f64 / total as f64;
            -q * q.ln()
        })
        .sum();
    h.exp()
}

pub fn histogram(indices: &[usize], k: usize) -> Vec<u64> {
    let mut counts = vec![0u64; k];
    indices.iter().for_each(|&i| counts[i] += 1);
    counts
}

/// Overwrites each dead entry with a randomly drawn row of `candidates: [N, d_z]`.
pub fn reinit_entries(codebook: &mut Tensor, dead: &[usize], candidates: &Tensor, rng: &mut impl Rng) -> Result<()> {
    let d_z = codebook.shape()[1];
    if candidates.rank() != 2 || candidates.shape()[1] != d_z || candidates.shape()[0] == 0 {
        return Err(Error::Invalid(format!(
            "reinit candidates {:?} do not match code dim {d_z}",
            candidates.shape()
        )));
    }
    let n = candidates.shape()[0];
    for &k in dead {
        let src = rng.random_range(0..n);
        codebook.data_mut()[k * d_z..(k + 1) * d_z].copy_from_slice(candidates.row(src));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use diffcore::GradientLayout;
    use std::sync::Arc;

    fn identity_store(codebook: Tensor<f64>) -> ParamStore<f64> {
        let d = codebook.shape()[1];
        let mut eye = vec![0.0; d * d];
        (0..d).for_each(|i| eye[i * d + i] = 1.0);
        let mut s = ParamStore::new();
        s.insert(CODEBOOK, codebook).unwrap();
        s.insert(format!("{PROJ_IN}.w"), Tensor::new(vec![d, d], eye).unwrap()).unwrap();
        s.insert(format!("{PROJ_IN}.b"), Tensor::zeros(&[d])).unwrap();
        s
    }

    fn table() -> Tensor<f64> {
        let rows: Vec<f64> = (0..8).flat_map(|i| [i as f64, -(i as f64) * 0.5]).collect();
        Tensor::new(vec![8, 2], rows).unwrap()
    }

    #[test]
    fn exact_code_snaps_with_zero_loss() {
        let store = identity_store(table());
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::new(vec![1, 1, 2], vec![7.0, -3.5]).unwrap()).unwrap();
        let q = quantize_graph(&mut g, &store, z, None).unwrap();
        assert_eq!(q.indices, vec![7]);
        assert_eq!(g.scalar(q.codebook_loss), 0.0);
        assert_eq!(g.scalar(q.commit_loss), 0.0);
        assert_eq!(g.value(q.y).data(), &[7.0, -3.5]);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let mut t = Tensor::<f64>::zeros(&[6, 1]);
        t.data_mut()[2] = 1.0;
        t.data_mut()[5] = 3.0;
        for i in [0, 1, 3, 4] {
            t.data_mut()[i] = 10.0 + i as f64;
        }
        let store = identity_store(t);
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::new(vec![1, 1, 1], vec![2.0]).unwrap()).unwrap();
        assert_eq!(quantize_graph(&mut g, &store, z, None).unwrap().indices, vec![2]);
    }

    #[test]
    fn straight_through_gradient_reaches_projection_input() {
        let store = identity_store(table());
        let mut g = Graph::<f64>::new();
        let z = g.param("z", &Tensor::new(vec![1, 2, 2], vec![0.9, 0.1, 3.2, -1.4]).unwrap()).unwrap();
        let q = quantize_graph(&mut g, &store, z, None).unwrap();
        let w = g.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let p = g.mul(q.y, w).unwrap();
        let loss = g.sum(p, None).unwrap();
        let grads = g.backward_vars(loss, &[z, q.y]).unwrap();
        assert_eq!(grads[0].data(), grads[1].data());
        let layout = Arc::new(GradientLayout::new(vec![(CODEBOOK.into(), vec![8, 2])]));
        assert!(g.backward(loss, &layout).unwrap().flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn usage_statistics() {
        assert_eq!(perplexity(&[5, 0, 0, 0]), 1.0);
        assert!((perplexity(&[3; 256]) - 256.0).abs() < 1e-9);
        assert_eq!(usage_fraction(&[1, 0, 2, 0]), 0.5);
        let mut u = CodebookUsage::new(4);
        u.record(&[1, 1, 3]);
        assert_eq!(u.dead(), vec![0, 2]);
        u.reset_epoch();
        assert_eq!(u.dead().len(), 4);
        assert_eq!(u.total_counts.iter().sum::<u64>(), 3);
    }
}
