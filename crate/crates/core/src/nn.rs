//! Transformer building blocks shared by the tokenizer, the alignment heads and the
//! generator. Weights live in a [`ParamStore`] under dotted names; each function binds
//! what it needs into the graph on first use.

use diffcore::{Float, Graph, ParamStore, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;

pub const INIT_STD: f64 = 0.02;

pub fn normal_tensor(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0f32, std as f32).expect("positive std");
    let data = (0..diffcore::numel(shape)).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

pub fn init_linear(store: &mut ParamStore, rng: &mut impl Rng, name: &str, fan_in: usize, fan_out: usize) -> Result<()> {
    store.insert(format!("{name}.w"), normal_tensor(rng, &[fan_in, fan_out], INIT_STD))?;
    store.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]))?;
    Ok(())
}

/// Linear layer with weights drawn at std `1/sqrt(fan_in)`.
pub fn init_linear_fan_in(store: &mut ParamStore, rng: &mut impl Rng, name: &str, fan_in: usize, fan_out: usize) -> Result<()> {
    store.insert(format!("{name}.w"), normal_tensor(rng, &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt()))?;
    store.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]))?;
    Ok(())
}

pub fn init_layer_norm(store: &mut ParamStore, name: &str, d: usize) -> Result<()> {
    store.insert(format!("{name}.gamma"), Tensor::full(&[d], 1.0))?;
    store.insert(format!("{name}.beta"), Tensor::zeros(&[d]))?;
    Ok(())
}

/// Pre-norm block: attention and a 4x GELU MLP, each behind its own layer norm.
pub fn init_block(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d: usize) -> Result<()> {
    init_layer_norm(store, &format!("{name}.ln1"), d)?;
    init_linear(store, rng, &format!("{name}.attn.qkv"), d, 3 * d)?;
    init_linear(store, rng, &format!("{name}.attn.proj"), d, d)?;
    init_layer_norm(store, &format!("{name}.ln2"), d)?;
    init_linear(store, rng, &format!("{name}.mlp.fc1"), d, 4 * d)?;
    init_linear(store, rng, &format!("{name}.mlp.fc2"), 4 * d, d)?;
    Ok(())
}

pub fn linear<T: Float>(g: &mut Graph<T>, store: &ParamStore<T>, name: &str, x: Var) -> Result<Var> {
    let w = g.bind(store, &format!("{name}.w"))?;
    let b = g.bind(store, &format!("{name}.b"))?;
    let h = g.matmul(x, w)?;
    Ok(g.add(h, b)?)
}

pub fn layer_norm<T: Float>(g: &mut Graph<T>, store: &ParamStore<T>, name: &str, x: Var) -> Result<Var> {
    let gamma = g.bind(store, &format!("{name}.gamma"))?;
    let beta = g.bind(store, &format!("{name}.beta"))?;
    Ok(g.layer_norm(x, gamma, beta)?)
}

/// Multi-head self-attention over `x: [B, n, d]`. `mask` is an additive `[n, n]` constant.
pub fn attention<T: Float>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    name: &str,
    x: Var,
    heads: usize,
    mask: Option<Var>,
) -> Result<Var> {
    let (b, n, d) = match *g.shape(x) {
        [b, n, d] => (b, n, d),
        ref s => {
            return Err(crate::Error::Invalid(format!("attention expects [B, n, d], got {s:?}")));
        }
    };
    let dh = d / heads;
    let qkv = linear(g, store, &format!("{name}.qkv"), x)?;
    let mut split = Vec::with_capacity(3);
    for i in 0..3 {
        let part = g.slice(qkv, 2, i * d, d)?;
        let part = g.reshape(part, &[b, n, heads, dh])?;
        split.push(g.permute(part, &[0, 2, 1, 3])?);
    }
    let o = g.scaled_dot_product_attention(split[0], split[1], split[2], mask)?;
    let o = g.permute(o, &[0, 2, 1, 3])?;
    let o = g.reshape(o, &[b, n, d])?;
    linear(g, store, &format!("{name}.proj"), o)
}

pub fn mlp<T: Float>(g: &mut Graph<T>, store: &ParamStore<T>, name: &str, x: Var) -> Result<Var> {
    let h = linear(g, store, &format!("{name}.fc1"), x)?;
    let h = g.gelu(h)?;
    linear(g, store, &format!("{name}.fc2"), h)
}

pub fn block<T: Float>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    name: &str,
    x: Var,
    heads: usize,
    mask: Option<Var>,
) -> Result<Var> {
    let h = layer_norm(g, store, &format!("{name}.ln1"), x)?;
    let h = attention(g, store, &format!("{name}.attn"), h, heads, mask)?;
    let x = g.add(x, h)?;
    let h = layer_norm(g, store, &format!("{name}.ln2"), x)?;
    let h = mlp(g, store, &format!("{name}.mlp"), h)?;
    Ok(g.add(x, h)?)
}

/// `[rows, d]` parameter broadcast over a leading batch axis.
pub fn batched<T: Float>(g: &mut Graph<T>, x: Var, batch: usize) -> Result<Var> {
    let mut shape = vec![batch];
    shape.extend_from_slice(g.shape(x));
    Ok(g.broadcast_to(x, &shape)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn block_preserves_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        init_block(&mut store, &mut rng, "b", 8).unwrap();
        let mut g = Graph::<f32>::new();
        let x = g.constant(normal_tensor(&mut rng, &[2, 5, 8], 1.0)).unwrap();
        let y = block(&mut g, &store, "b", x, 2, None).unwrap();
        assert_eq!(g.shape(y), &[2, 5, 8]);
    }

    #[test]
    fn attention_rejects_flat_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        init_block(&mut store, &mut rng, "b", 4).unwrap();
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[5, 4])).unwrap();
        assert!(attention(&mut g, &store, "b.attn", x, 1, None).is_err());
    }
}
