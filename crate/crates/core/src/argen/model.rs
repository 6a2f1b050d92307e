//! Decoder-only transformer with learned positions.

use diffcore::{causal_mask, Float, Graph, ParamStore, Tensor, Var};

use super::batch::GenBatch;
use super::config::ArConfig;
use crate::error::{Error, Result};
use crate::nn::{self, INIT_STD};
use crate::tokenizer::model::init_rng;

pub const TOK_EMBED: &str = "ar.tok_embed";
pub const POS_EMBED: &str = "ar.pos";
const INIT_STREAM: u64 = 6;

pub fn is_ar_param(name: &str) -> bool {
    name.starts_with("ar.")
}

pub fn init_ar_params(cfg: &ArConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = init_rng(seed, INIT_STREAM);
    let mut store = ParamStore::new();
    let w = cfg.width;
    store.insert(TOK_EMBED, nn::normal_tensor(&mut rng, &[cfg.vocab(), w], INIT_STD))?;
    store.insert(POS_EMBED, nn::normal_tensor(&mut rng, &[cfg.context, w], INIT_STD))?;
    for i in 0..cfg.layers {
        nn::init_block(&mut store, &mut rng, &format!("ar.block{i}"), w)?;
    }
    nn::init_layer_norm(&mut store, "ar.ln_f", w)?;
    nn::init_linear(&mut store, &mut rng, "ar.head", w, cfg.vocab())?;
    Ok(store)
}

/// Logits `[B, n, V]` for `ids: [B, n]`.
pub fn forward_graph<T: Float>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &ArConfig,
    ids: &[u32],
    batch: usize,
) -> Result<Var> {
    if batch == 0 || ids.is_empty() || ids.len() % batch != 0 {
        return Err(Error::Invalid(format!("{} ids do not split into {batch} rows", ids.len())));
    }
    let n = ids.len() / batch;
    if n > cfg.context {
        return Err(Error::Invalid(format!("length {n} exceeds context {}", cfg.context)));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i as usize >= cfg.vocab()) {
        return Err(Error::Invalid(format!("id {bad} outside vocabulary of {}", cfg.vocab())));
    }
    let table = g.bind(store, TOK_EMBED)?;
    let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    let x = g.embedding(table, &idx, &[batch, n])?;
    let pos = g.bind(store, POS_EMBED)?;
    let pos = g.slice(pos, 0, 0, n)?;
    let pos = nn::batched(g, pos, batch)?;
    let mut x = g.add(x, pos)?;
    let mask = g.constant(causal_mask(n))?;
    for i in 0..cfg.layers {
        x = nn::block(g, store, &format!("ar.block{i}"), x, cfg.heads, Some(mask))?;
    }
    let x = nn::layer_norm(g, store, "ar.ln_f", x)?;
    nn::linear(g, store, "ar.head", x)
}

/// Mean next-token cross-entropy over the unmasked targets of `batch`.
pub fn loss_graph<T: Float>(g: &mut Graph<T>, store: &ParamStore<T>, cfg: &ArConfig, batch: &GenBatch) -> Result<Var> {
    if batch.len < 2 {
        return Err(Error::Invalid("rows need at least two ids".into()));
    }
    let logits = forward_graph(g, store, cfg, &batch.inputs(), batch.batch)?;
    let targets: Vec<usize> = batch.targets().iter().map(|&t| t as usize).collect();
    let mask = batch.target_mask();
    if !mask.iter().any(|&m| m) {
        return Err(Error::Invalid("every target position is masked".into()));
    }
    Ok(g.cross_entropy(logits, &targets, Some(&mask))?)
}

/// Generator weights with their configuration.
#[derive(Debug, Clone)]
pub struct ArModel {
    pub config: ArConfig,
    pub params: ParamStore,
}

impl ArModel {
    pub fn new(config: ArConfig, seed: u64) -> Result<Self> {
        let params = init_ar_params(&config, seed)?;
        Ok(Self { config, params })
    }

    pub fn from_params(config: ArConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let reference = init_ar_params(&config, 0)?;
        for p in reference.iter() {
            match params.get(&p.name) {
                Some(t) if t.shape() == p.value.shape() => {}
                Some(t) => {
                    return Err(Error::Config(format!(
                        "parameter {} has shape {:?}, config expects {:?}",
                        p.name,
                        t.shape(),
                        p.value.shape()
                    )))
                }
                None => return Err(Error::Config(format!("missing generator parameter {}", p.name))),
            }
        }
        let mut kept = ParamStore::new();
        for p in params.iter().filter(|p| is_ar_param(&p.name)) {
            kept.insert(p.name.clone(), p.value.clone())?;
        }
        Ok(Self { config, params: kept })
    }

    /// Logits `[n, V]` for a single row of ids.
    pub fn logits(&self, ids: &[u32]) -> Result<Tensor> {
        let mut g = Graph::<f32>::new();
        let out = forward_graph(&mut g, &self.params, &self.config, ids, 1)?;
        let n = ids.len();
        Ok(g.value(out).clone().reshape(vec![n, self.config.vocab()])?)
    }

    /// Logits of the last position for each of `rows` equally long rows.
    pub fn last_logits(&self, rows: &[Vec<u32>]) -> Result<Vec<Vec<f32>>> {
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Invalid("rows differ in length".into()));
        }
        let flat: Vec<u32> = rows.concat();
        let mut g = Graph::<f32>::new();
        let out = forward_graph(&mut g, &self.params, &self.config, &flat, rows.len())?;
        let v = self.config.vocab();
        let data = g.value(out).data();
        Ok((0..rows.len()).map(|b| data[(b * n + n - 1) * v..(b * n + n) * v].to_vec()).collect())
    }

    pub fn loss(&self, batch: &GenBatch) -> Result<f64> {
        let mut g = Graph::<f32>::new();
        let l = loss_graph(&mut g, &self.params, &self.config, batch)?;
        Ok(g.scalar(l).as_f64())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ArConfig {
        ArConfig { k: 16, seq_len: 6, n_classes: 2, width: 16, layers: 2, heads: 2, context: 7, ..Default::default() }
    }

    #[test]
    fn logits_shape_and_normalization() {
        let m = ArModel::new(tiny(), 3).unwrap();
        let l = m.logits(&[16, 1, 2, 3]).unwrap();
        assert_eq!(l.shape(), &[4, 20]);
        for r in 0..4 {
            let row = l.row(r);
            let max = row.iter().cloned().fold(f32::MIN, f32::max);
            let s: f64 = row.iter().map(|&x| ((x - max) as f64).exp()).sum();
            let p: f64 = row.iter().map(|&x| ((x - max) as f64).exp() / s).sum();
            assert!((p - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn out_of_vocab_and_overlong_rejected() {
        let m = ArModel::new(tiny(), 3).unwrap();
        assert!(m.logits(&[20]).is_err());
        assert!(m.logits(&[1; 8]).is_err());
    }

    #[test]
    fn from_params_checks_shapes() {
        let m = ArModel::new(tiny(), 3).unwrap();
        let again = ArModel::from_params(tiny(), m.params.clone()).unwrap();
        assert_eq!(again.logits(&[1, 2]).unwrap(), m.logits(&[1, 2]).unwrap());
        let wider = ArConfig { width: 32, ..tiny() };
        assert!(ArModel::from_params(wider, m.params).is_err());
    }
}
