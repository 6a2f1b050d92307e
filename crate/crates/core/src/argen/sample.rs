use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ArConfig, ArMode};
use super::model::ArModel;
use crate::error::{Error, Result};
use crate::tokenizer::TokenSequence;

/// `uncond + s·(cond − uncond)`; `s = 1` and `s = 0` return the inputs exactly.
pub fn cfg_combine(cond: &[f32], uncond: &[f32], s: f64) -> Result<Vec<f32>> {
    if cond.len() != uncond.len() {
        return Err(Error::Invalid(format!("cfg logits {} vs {}", cond.len(), uncond.len())));
    }
    if s == 1.0 {
        return Ok(cond.to_vec());
    }
    if s == 0.0 {
        return Ok(uncond.to_vec());
    }
    let s = s as f32;
    Ok(cond.iter().zip(uncond).map(|(&c, &u)| u + s * (c - u)).collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Condition {
    Class(usize),
    /// Tokens of the context clip in prediction mode.
    Context(Vec<u32>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleSettings {
    pub cfg_scale: f64,
    pub temperature: f64,
    pub top_k: usize,
    pub seed: u64,
}

impl SampleSettings {
    pub fn from_config(cfg: &ArConfig, seed: u64) -> Self {
        Self { cfg_scale: cfg.cfg_scale, temperature: cfg.temperature, top_k: cfg.top_k, seed }
    }
}

fn prefixes(cfg: &ArConfig, cond: &Condition) -> Result<(Vec<u32>, Vec<u32>)> {
    match (cfg.mode, cond) {
        (ArMode::Class, Condition::Class(c)) => {
            if *c >= cfg.n_classes {
                return Err(Error::Invalid(format!("class {c} outside 0..{}", cfg.n_classes)));
            }
            Ok((vec![cfg.cls(*c)], vec![cfg.uncond()]))
        }
        (ArMode::Predict, Condition::Context(ctx)) => {
            if let Some(&bad) = ctx.iter().find(|&&i| !cfg.is_code(i)) {
                return Err(Error::Invalid(format!("context token {bad} is not a code id")));
            }
            if ctx.len() + 1 + cfg.seq_len > cfg.context {
                return Err(Error::Invalid("context does not fit the generator".into()));
            }
            let mut c = ctx.clone();
            c.push(cfg.sep());
            let mut u = vec![cfg.uncond(); ctx.len()];
            u.push(cfg.sep());
            Ok((c, u))
        }
        (mode, _) => Err(Error::Invalid(format!("condition does not match {mode:?} mode"))),
    }
}

/// Picks one code id from `logits` (full vocabulary) at `position`.
pub fn choose(cfg: &ArConfig, logits: &[f32], settings: &SampleSettings, rng: &mut impl Rng, position: usize) -> Result<u32> {
    let mut keep: Vec<usize> = (0..logits.len()).collect();
    if settings.top_k > 0 && settings.top_k < keep.len() {
        // Stable sort: equal logits keep the lower id first.
        keep.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]));
        keep.truncate(settings.top_k);
        keep.sort_unstable();
    }
    keep.retain(|&i| cfg.is_code(i as u32) && logits[i].is_finite());
    if keep.is_empty() {
        return Err(Error::Sampling { position });
    }
    if settings.temperature == 0.0 {
        let mut best = keep[0];
        for &i in &keep[1..] {
            if logits[i] > logits[best] {
                best = i;
            }
        }
        return Ok(best as u32);
    }
    let t = settings.temperature;
    let max = keep.iter().map(|&i| logits[i] as f64).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = keep.iter().map(|&i| ((logits[i] as f64 - max) / t).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (&i, &w) in keep.iter().zip(&weights) {
        if u < w {
            return Ok(i as u32);
        }
        u -= w;
    }
    Ok(*keep.last().expect("non-empty") as u32)
}

/// Draws `seq_len` code tokens left to right with classifier-free guidance.
pub fn sample(model: &ArModel, cond: &Condition, settings: &SampleSettings, l_a: usize) -> Result<TokenSequence> {
    let cfg = &model.config;
    if !(settings.temperature >= 0.0) || !settings.cfg_scale.is_finite() {
        return Err(Error::Invalid("temperature must be >= 0 and cfg_scale finite".into()));
    }
    if l_a > cfg.seq_len {
        return Err(Error::Invalid(format!("l_a {l_a} exceeds sequence length {}", cfg.seq_len)));
    }
    let (mut c, mut u) = prefixes(cfg, cond)?;
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let guided = settings.cfg_scale != 1.0;
    let mut out = Vec::with_capacity(cfg.seq_len);
    for pos in 0..cfg.seq_len {
        let logits = if guided {
            let both = model.last_logits(&[c.clone(), u.clone()])?;
            cfg_combine(&both[0], &both[1], settings.cfg_scale)?
        } else {
            model.last_logits(std::slice::from_ref(&c))?.remove(0)
        };
        let id = choose(cfg, &logits, settings, &mut rng, pos)?;
        out.push(id);
        c.push(id);
        u.push(id);
    }
    TokenSequence::new(out, l_a, cfg.seq_len - l_a)
}
