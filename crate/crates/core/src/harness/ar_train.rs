//! Generator training over cached tokenizer outputs.

use std::path::{Path, PathBuf};

use diffcore::Graph;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{ArTrainConfig, RunConfig};
use super::metrics::{ArMetricsRow, MetricsLog, AR_HEADER};
use super::optim::{lr_at, Adam};
use super::train::{load_clips, split_clips, PARAM_PREFIX};
use crate::argen::{build_example, loss_graph, ArConfig, ArMode, ArModel, GenBatch, TokenFile};
use crate::error::{Error, Result};
use crate::tokenizer::model::init_rng;
use crate::tokenizer::{Checkpoint, Tokenizer, TokenizerConfig};
use crate::videolab::VideoClip;

const SHUFFLE_STREAM: u64 = 1 << 35;
const DROPOUT_STREAM: u64 = 1 << 36;

/// The first half of `clip` with every frame shown twice, so it keeps the full length.
pub fn context_clip(clip: &VideoClip) -> Result<VideoClip> {
    let half = clip.frames / 2;
    if half == 0 {
        return Err(Error::Invalid("clip too short to split into context and target".into()));
    }
    let mut pixels = Vec::with_capacity(clip.pixels().len());
    for t in 0..clip.frames {
        pixels.extend_from_slice(clip.frame((t / 2).min(half - 1)));
    }
    VideoClip::new(clip.frames, clip.height, clip.width, pixels, clip.class_label)
}

/// Tokenized training data: targets, labels and, in prediction mode, contexts.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenCache {
    pub targets: TokenFile,
    pub contexts: Option<TokenFile>,
}

fn cache_key(ckpt_bytes: &[u8], clips: &[VideoClip], mode: ArMode) -> String {
    let mut h = Sha256::new();
    h.update(ckpt_bytes);
    for c in clips {
        h.update(c.content_hash());
        h.update(c.class_label.unwrap_or(u32::MAX).to_le_bytes());
    }
    h.update([mode as u8]);
    hex::encode(h.finalize())
}

fn key_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".key");
    PathBuf::from(s)
}

fn context_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".ctx");
    PathBuf::from(s)
}

pub fn tokenize_clips(tok: &Tokenizer, clips: &[VideoClip], mode: ArMode) -> Result<TokenCache> {
    let sequences = clips.iter().map(|c| tok.tokenize(c)).collect::<Result<Vec<_>>>()?;
    let labels = clips.iter().map(|c| c.class_label.unwrap_or(0)).collect();
    let contexts = match mode {
        ArMode::Class => None,
        ArMode::Predict => Some(TokenFile {
            sequences: clips.iter().map(|c| tok.tokenize(&context_clip(c)?)).collect::<Result<Vec<_>>>()?,
            labels: None,
        }),
    };
    Ok(TokenCache { targets: TokenFile { sequences, labels: Some(labels) }, contexts })
}

/// Loads the cache at `path` when its key matches, otherwise tokenizes and writes it.
/// Returns the cache and whether it was reused.
pub fn cached_tokens(
    path: &Path,
    ckpt_bytes: &[u8],
    tok: &Tokenizer,
    clips: &[VideoClip],
    mode: ArMode,
) -> Result<(TokenCache, bool)> {
    let key = cache_key(ckpt_bytes, clips, mode);
    let kp = key_path(path);
    if std::fs::read_to_string(&kp).is_ok_and(|k| k.trim() == key) {
        let targets = TokenFile::load(path)?;
        let contexts = match mode {
            ArMode::Class => None,
            ArMode::Predict => Some(TokenFile::load(&context_path(path))?),
        };
        return Ok((TokenCache { targets, contexts }, true));
    }
    let cache = tokenize_clips(tok, clips, mode)?;
    cache.targets.save(path)?;
    if let Some(c) = &cache.contexts {
        c.save(&context_path(path))?;
    }
    std::fs::write(&kp, key + "\n").map_err(|e| Error::io(&kp, e))?;
    Ok((cache, false))
}

/// One training row per cached sequence.
pub fn examples_from_cache(cfg: &ArConfig, cache: &TokenCache) -> Result<Vec<GenBatch>> {
    let t = &cache.targets;
    (0..t.sequences.len())
        .map(|i| {
            let class = t.labels.as_ref().map_or(0, |l| l[i] as usize);
            let ctx = cache.contexts.as_ref().map(|c| &c.sequences[i]);
            build_example(cfg, class, ctx, &t.sequences[i])
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArMeta {
    kind: String,
    ar: ArConfig,
    tokenizer: TokenizerConfig,
    step: u64,
}

pub fn save_ar(path: &Path, model: &ArModel, tokenizer: &TokenizerConfig, step: u64) -> Result<()> {
    let meta = ArMeta { kind: "ar".into(), ar: model.config.clone(), tokenizer: tokenizer.clone(), step };
    let json = serde_json::to_string(&meta).expect("meta serializes");
    Checkpoint::with_params(json, &model.params, PARAM_PREFIX).save(path)
}

/// Reads a generator checkpoint, returning it with the tokenizer config it was trained for.
pub fn load_ar(path: &Path) -> Result<(ArModel, TokenizerConfig)> {
    let ckpt = Checkpoint::load(path)?;
    let meta: ArMeta =
        serde_json::from_str(&ckpt.config_json).map_err(|e| Error::Config(format!("not a generator checkpoint: {e}")))?;
    if meta.kind != "ar" {
        return Err(Error::Config(format!("checkpoint holds a {} model, not a generator", meta.kind)));
    }
    Ok((ArModel::from_params(meta.ar, ckpt.params(PARAM_PREFIX)?)?, meta.tokenizer))
}

/// Teacher-forced training on fixed examples. Rows are logged every `log_every`
/// steps and at the last step; `log` receives them as they are produced.
pub fn train_ar_on(
    cfg: &ArConfig,
    tc: &ArTrainConfig,
    seed: u64,
    examples: &[GenBatch],
    mut log: Option<&mut MetricsLog>,
) -> Result<(ArModel, Vec<ArMetricsRow>)> {
    if examples.is_empty() {
        return Err(Error::Invalid("no training sequences".into()));
    }
    if tc.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut model = ArModel::new(cfg.clone(), seed)?;
    let layout = model.params.layout(|_| true);
    let mut adam = Adam::new(tc.optim.clone(), &model.params);
    let b = tc.batch_size.min(examples.len());
    let spe = examples.len().div_ceil(b) as u64;
    let mut order: Vec<usize> = Vec::new();
    let mut rows = Vec::new();
    for step in 0..tc.steps {
        let (epoch, pos) = (step / spe, (step % spe) as usize);
        if pos == 0 {
            order = (0..examples.len()).collect();
            order.shuffle(&mut init_rng(seed, SHUFFLE_STREAM + epoch));
        }
        let picked: Vec<GenBatch> =
            order[pos * b..((pos + 1) * b).min(order.len())].iter().map(|&i| examples[i].clone()).collect();
        let mut batch = GenBatch::stack(&picked)?;
        batch.drop_conditions(cfg.cond_dropout, cfg.uncond(), &mut init_rng(seed, DROPOUT_STREAM + step));

        let mut g = Graph::new();
        let loss = loss_graph(&mut g, &model.params, cfg, &batch)?;
        let value = g.scalar(loss) as f64;
        if !value.is_finite() {
            return Err(Error::Numeric(format!("generator loss is {value} at step {}", step + 1)));
        }
        let mut grad = g.backward(loss, &layout)?;
        let lr = lr_at(&tc.optim, step, tc.steps);
        let grad_norm = adam.step(&mut model.params, &mut grad, lr)?;
        let s = step + 1;
        if (tc.log_every > 0 && s % tc.log_every == 0) || s == tc.steps {
            let row = ArMetricsRow { step: s, loss: value, grad_norm, lr };
            if let Some(l) = log.as_deref_mut() {
                l.append(s, &row)?;
            }
            rows.push(row);
        }
    }
    Ok((model, rows))
}

#[derive(Debug, Clone, Default)]
pub struct ArTrainOptions {
    pub tokenizer_ckpt: PathBuf,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    /// Token cache; defaults to `tokens.dtok` beside the checkpoint.
    pub cache: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct ArTrainOutcome {
    pub model: ArModel,
    pub rows: Vec<ArMetricsRow>,
    pub cache_reused: bool,
}

pub fn train_ar(cfg: &RunConfig, opts: &ArTrainOptions) -> Result<ArTrainOutcome> {
    let ckpt_bytes = std::fs::read(&opts.tokenizer_ckpt).map_err(|e| Error::io(&opts.tokenizer_ckpt, e))?;
    let (tok, tok_run) = super::train::load_tokenizer(&opts.tokenizer_ckpt)?;
    if tok_run.tokenizer != cfg.tokenizer {
        return Err(Error::Config("tokenizer checkpoint does not match the configured tokenizer".into()));
    }
    let ar = cfg.checked_ar()?;
    let (train, _) = split_clips(cfg, load_clips(cfg)?)?;
    if ar.mode == ArMode::Class {
        if let Some(c) = train.iter().filter_map(|c| c.class_label).find(|&l| l as usize >= ar.n_classes) {
            return Err(Error::Config(format!("clip label {c} outside the generator's {} classes", ar.n_classes)));
        }
    }
    let cache_path = opts.cache.clone().unwrap_or_else(|| {
        opts.checkpoint.parent().unwrap_or(Path::new(".")).join("tokens.dtok")
    });
    let (cache, cache_reused) = cached_tokens(&cache_path, &ckpt_bytes, &tok, &train, ar.mode)?;
    let examples = examples_from_cache(&ar, &cache)?;
    let mut log = MetricsLog::create(&opts.metrics, AR_HEADER)?;
    let (model, rows) = train_ar_on(&ar, &cfg.ar_train, cfg.seed, &examples, Some(&mut log))?;
    save_ar(&opts.checkpoint, &model, &cfg.tokenizer, cfg.ar_train.steps)?;
    Ok(ArTrainOutcome { model, rows, cache_reused })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::TokenSequence;

    #[test]
    fn context_clip_duplicates_first_half() {
        let pixels: Vec<f32> = (0..4).flat_map(|t| vec![t as f32 * 0.1; 3]).collect();
        let clip = VideoClip::new(4, 1, 1, pixels, Some(2)).unwrap();
        let ctx = context_clip(&clip).unwrap();
        let firsts: Vec<f32> = (0..4).map(|t| ctx.frame(t)[0]).collect();
        assert_eq!(firsts, vec![0.0, 0.0, 0.1, 0.1]);
        assert_eq!(ctx.class_label, Some(2));
    }

    fn tiny_examples(cfg: &ArConfig) -> Vec<GenBatch> {
        (0..4)
            .map(|c| {
                let ids: Vec<u32> = (0..cfg.seq_len as u32).map(|i| (i * 3 + c as u32) % cfg.k as u32).collect();
                let seq = TokenSequence::new(ids, 1, cfg.seq_len - 1).unwrap();
                crate::argen::build_class_batch(cfg, c, &seq).unwrap()
            })
            .collect()
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let cfg = ArConfig { k: 8, seq_len: 4, n_classes: 4, width: 16, layers: 1, heads: 2, context: 5, ..Default::default() };
        let tc = ArTrainConfig {
            steps: 60,
            batch_size: 4,
            log_every: 10,
            optim: crate::harness::OptimConfig { lr: 1e-2, warmup_steps: 5, ..Default::default() },
        };
        let ex = tiny_examples(&cfg);
        let (m1, r1) = train_ar_on(&cfg, &tc, 3, &ex, None).unwrap();
        let (m2, r2) = train_ar_on(&cfg, &tc, 3, &ex, None).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(m1.params, m2.params);
        assert!(r1.last().unwrap().loss < r1[0].loss);
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = ArConfig { k: 8, seq_len: 4, n_classes: 2, width: 16, layers: 1, heads: 2, context: 5, ..Default::default() };
        let model = ArModel::new(cfg, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ar.dckp");
        save_ar(&p, &model, &TokenizerConfig::default(), 7).unwrap();
        let (back, tok) = load_ar(&p).unwrap();
        assert_eq!(back.params, model.params);
        assert_eq!(tok, TokenizerConfig::default());
        let first = std::fs::read(&p).unwrap();
        save_ar(&p, &back, &tok, 7).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), first);
    }
}
