use rand::Rng;

use super::config::{ArConfig, ArMode};
use crate::error::{Error, Result};
use crate::tokenizer::TokenSequence;

/// Full id rows for teacher forcing. Row `b` feeds `ids[b][..n-1]` and predicts
/// `ids[b][1..]`; `loss_mask` and `cond_mask` are indexed by id position.
#[derive(Debug, Clone, PartialEq)]
pub struct GenBatch {
    pub batch: usize,
    /// Ids per row, including the first (never predicted) position.
    pub len: usize,
    pub ids: Vec<u32>,
    /// Whether `ids[b][i]` is a prediction target. Position 0 never is.
    pub loss_mask: Vec<bool>,
    /// Whether `ids[b][i]` is part of the condition.
    pub cond_mask: Vec<bool>,
}

impl GenBatch {
    pub fn row(&self, b: usize) -> &[u32] {
        &self.ids[b * self.len..(b + 1) * self.len]
    }

    /// Model inputs `[B, len − 1]`.
    pub fn inputs(&self) -> Vec<u32> {
        (0..self.batch).flat_map(|b| self.row(b)[..self.len - 1].to_vec()).collect()
    }

    /// Targets `[B, len − 1]`, shifted left by one.
    pub fn targets(&self) -> Vec<u32> {
        (0..self.batch).flat_map(|b| self.row(b)[1..].to_vec()).collect()
    }

    /// Loss mask aligned with [`GenBatch::targets`].
    pub fn target_mask(&self) -> Vec<bool> {
        (0..self.batch)
            .flat_map(|b| self.loss_mask[b * self.len + 1..(b + 1) * self.len].to_vec())
            .collect()
    }

    pub fn stack(parts: &[GenBatch]) -> Result<GenBatch> {
        let first = parts.first().ok_or_else(|| Error::Invalid("empty batch".into()))?;
        if parts.iter().any(|p| p.len != first.len) {
            return Err(Error::Invalid("cannot stack rows of different lengths".into()));
        }
        Ok(GenBatch {
            batch: parts.iter().map(|p| p.batch).sum(),
            len: first.len,
            ids: parts.iter().flat_map(|p| p.ids.iter().copied()).collect(),
            loss_mask: parts.iter().flat_map(|p| p.loss_mask.iter().copied()).collect(),
            cond_mask: parts.iter().flat_map(|p| p.cond_mask.iter().copied()).collect(),
        })
    }

    /// Replaces each row's condition ids by `[UNCOND]` with probability `p`.
    pub fn drop_conditions(&mut self, p: f64, uncond: u32, rng: &mut impl Rng) {
        if p <= 0.0 {
            return;
        }
        for b in 0..self.batch {
            if rng.random_bool(p.min(1.0)) {
                for i in b * self.len..(b + 1) * self.len {
                    if self.cond_mask[i] {
                        self.ids[i] = uncond;
                    }
                }
            }
        }
    }
}

fn check_codes(cfg: &ArConfig, seq: &[u32]) -> Result<()> {
    match seq.iter().find(|&&i| !cfg.is_code(i)) {
        Some(i) => Err(Error::Invalid(format!("token {i} is not a code id (< {})", cfg.k))),
        None => Ok(()),
    }
}

/// `[CLS_class] ∥ seq`; every code position is a target.
pub fn build_class_batch(cfg: &ArConfig, class: usize, seq: &TokenSequence) -> Result<GenBatch> {
    if class >= cfg.n_classes {
        return Err(Error::Invalid(format!("class {class} outside 0..{}", cfg.n_classes)));
    }
    check_codes(cfg, seq.indices())?;
    let mut ids = vec![cfg.cls(class)];
    ids.extend_from_slice(seq.indices());
    if ids.len() > cfg.context {
        return Err(Error::Invalid(format!("{} ids exceed context {}", ids.len(), cfg.context)));
    }
    let n = ids.len();
    let mut loss_mask = vec![true; n];
    loss_mask[0] = false;
    let mut cond_mask = vec![false; n];
    cond_mask[0] = true;
    Ok(GenBatch { batch: 1, len: n, ids, loss_mask, cond_mask })
}

/// `context ∥ [SEP] ∥ target`; context and `[SEP]` positions carry no loss.
pub fn build_prediction_batch(cfg: &ArConfig, context: &[u32], target: &[u32]) -> Result<GenBatch> {
    check_codes(cfg, context)?;
    check_codes(cfg, target)?;
    let mut ids = context.to_vec();
    ids.push(cfg.sep());
    ids.extend_from_slice(target);
    if ids.len() > cfg.context {
        return Err(Error::Invalid(format!("{} ids exceed context {}", ids.len(), cfg.context)));
    }
    let n = ids.len();
    let split = context.len() + 1;
    let loss_mask = (0..n).map(|i| i >= split).collect();
    let cond_mask = (0..n).map(|i| i < context.len()).collect();
    Ok(GenBatch { batch: 1, len: n, ids, loss_mask, cond_mask })
}

/// Splits a prediction row back into `(context, target)`.
pub fn split_prediction(cfg: &ArConfig, row: &[u32]) -> Result<(Vec<u32>, Vec<u32>)> {
    let at = row
        .iter()
        .position(|&i| i == cfg.sep())
        .ok_or_else(|| Error::Invalid("no [SEP] in prediction row".into()))?;
    Ok((row[..at].to_vec(), row[at + 1..].to_vec()))
}

/// Training row for one example in the configured mode.
pub fn build_example(cfg: &ArConfig, class: usize, context: Option<&TokenSequence>, seq: &TokenSequence) -> Result<GenBatch> {
    match cfg.mode {
        ArMode::Class => build_class_batch(cfg, class, seq),
        ArMode::Predict => {
            let ctx = context.ok_or_else(|| Error::Invalid("prediction mode needs a context".into()))?;
            build_prediction_batch(cfg, ctx.indices(), seq.indices())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ArConfig {
        ArConfig { k: 16, seq_len: 4, n_classes: 3, context: 9, ..Default::default() }
    }

    #[test]
    fn class_batch_layout() {
        let seq = TokenSequence::new(vec![3, 1, 4, 1], 1, 3).unwrap();
        let b = build_class_batch(&cfg(), 2, &seq).unwrap();
        assert_eq!(b.ids, vec![18, 3, 1, 4, 1]);
        assert_eq!(b.inputs(), vec![18, 3, 1, 4]);
        assert_eq!(b.targets(), vec![3, 1, 4, 1]);
        assert_eq!(b.target_mask(), vec![true; 4]);
        assert!(build_class_batch(&cfg(), 3, &seq).is_err());
    }

    #[test]
    fn prediction_batch_masks_context_and_sep() {
        let c = cfg();
        let b = build_prediction_batch(&c, &[5, 6, 7, 8], &[1, 2, 3, 4]).unwrap();
        assert_eq!(b.loss_mask.iter().filter(|&&m| !m).count(), 5);
        assert_eq!(split_prediction(&c, &b.ids).unwrap(), (vec![5, 6, 7, 8], vec![1, 2, 3, 4]));
        let e = build_prediction_batch(&c, &[], &[1, 2]).unwrap();
        assert_eq!(e.ids[0], c.sep());
        assert_eq!(e.loss_mask.iter().filter(|&&m| !m).count(), 1);
        assert!(build_prediction_batch(&c, &[1; 6], &[1; 4]).is_err());
    }

    #[test]
    fn zero_dropout_keeps_conditions() {
        let seq = TokenSequence::new(vec![3, 1, 4, 1], 1, 3).unwrap();
        let mut b = build_class_batch(&cfg(), 1, &seq).unwrap();
        let before = b.clone();
        b.drop_conditions(0.0, cfg().uncond(), &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(b, before);
        b.drop_conditions(1.0, cfg().uncond(), &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(b.ids[0], cfg().uncond());
        assert_eq!(&b.ids[1..], &before.ids[1..]);
    }
}
