//! Tokenizer training loop, its checkpoints and data plumbing.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use diffcore::{GradientLayout, ParamStore, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::{RunConfig, TeacherSpec};
use super::eval::{evaluate, EvalReport};
use super::metrics::{MetricsLog, MetricsRow, TOKENIZER_HEADER};
use super::optim::{lr_at, Adam};
use super::step::{build_step, StepInput};
use crate::alignment::{file_teacher, init_heads, random_teacher, TeacherProvider};
use crate::error::{Error, Result};
use crate::objective::SacpMode;
use crate::tokenizer::model::{batch_patches, init_params, init_rng, is_encoder_param};
use crate::tokenizer::quantizer::{perplexity, reinit_entries, usage_fraction, CodebookUsage, CODEBOOK};
use crate::tokenizer::{Checkpoint, Tokenizer};
use crate::videolab::{generate_dataset, load_dataset, VideoClip};

const SHUFFLE_STREAM: u64 = 1 << 33;
const REINIT_STREAM: u64 = 1 << 34;
pub const PARAM_PREFIX: &str = "model.";
pub const ADAM_M_PREFIX: &str = "optim.m.";
pub const ADAM_V_PREFIX: &str = "optim.v.";

pub fn load_clips(cfg: &RunConfig) -> Result<Vec<VideoClip>> {
    match &cfg.data_dir {
        Some(dir) => load_dataset(dir),
        None => generate_dataset(&cfg.data),
    }
}

/// `(train, eval)`: the last `holdout` clips are held out; with no holdout the
/// training clips double as the evaluation set.
pub fn split_clips(cfg: &RunConfig, mut clips: Vec<VideoClip>) -> Result<(Vec<VideoClip>, Vec<VideoClip>)> {
    if cfg.holdout >= clips.len() {
        return Err(Error::Config(format!("holdout {} leaves no training clips out of {}", cfg.holdout, clips.len())));
    }
    if cfg.holdout == 0 {
        let eval = clips.clone();
        return Ok((clips, eval));
    }
    let eval = clips.split_off(clips.len() - cfg.holdout);
    Ok((clips, eval))
}

pub fn make_teacher(cfg: &RunConfig) -> Result<Option<Box<dyn TeacherProvider>>> {
    Ok(match &cfg.teacher {
        TeacherSpec::None => None,
        TeacherSpec::Random { seed, dim } => Some(Box::new(random_teacher(*seed, *dim, &cfg.tokenizer)?)),
        TeacherSpec::File { dir, dim } => Some(Box::new(file_teacher(dir, &cfg.tokenizer, *dim))),
    })
}

/// Tokenizer parameters plus, when a teacher is configured, the projection heads.
pub fn init_run_params(cfg: &RunConfig) -> Result<ParamStore> {
    let mut store = init_params(&cfg.tokenizer, cfg.seed)?;
    if let Some(d_t) = cfg.teacher.dim() {
        init_heads(&mut store, cfg.tokenizer.d, d_t, cfg.seed)?;
    }
    Ok(store)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrainState {
    step: u64,
    adam_t: u64,
    usage: CodebookUsage,
    last_epoch_counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TokenizerMeta {
    kind: String,
    run: RunConfig,
    state: TrainState,
}

/// Reads a tokenizer checkpoint written by training.
pub fn load_tokenizer(path: &Path) -> Result<(Tokenizer, RunConfig)> {
    let ckpt = Checkpoint::load(path)?;
    let meta = parse_meta(&ckpt)?;
    let tok = Tokenizer::from_params(meta.run.tokenizer.clone(), &ckpt.params(PARAM_PREFIX)?)?;
    Ok((tok, meta.run))
}

fn parse_meta(ckpt: &Checkpoint) -> Result<TokenizerMeta> {
    let meta: TokenizerMeta = serde_json::from_str(&ckpt.config_json)
        .map_err(|e| Error::Config(format!("not a tokenizer checkpoint: {e}")))?;
    if meta.kind != "tokenizer" {
        return Err(Error::Config(format!("checkpoint holds a {} model, not a tokenizer", meta.kind)));
    }
    Ok(meta)
}

/// Mutable training state over an immutable run configuration.
pub struct TokenizerTrainer {
    pub cfg: RunConfig,
    train: Vec<VideoClip>,
    eval: Vec<VideoClip>,
    /// `(image, video)` teacher tokens per training clip.
    targets: Option<Vec<(Tensor, Tensor)>>,
    pub params: ParamStore,
    adam: Adam,
    usage: CodebookUsage,
    last_epoch_counts: Vec<u64>,
    step: u64,
    full_layout: Arc<GradientLayout>,
    encoder_layout: Arc<GradientLayout>,
}

impl TokenizerTrainer {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let params = init_run_params(cfg)?;
        let adam = Adam::new(cfg.optim.clone(), &params);
        Self::assemble(cfg, params, adam, CodebookUsage::new(cfg.tokenizer.k), Vec::new(), 0)
    }

    pub fn from_checkpoint(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<Self> {
        let meta = parse_meta(ckpt)?;
        if meta.run != *cfg {
            return Err(Error::Config("checkpoint was written by a different run configuration".into()));
        }
        let params = ckpt.params(PARAM_PREFIX)?;
        let reference = init_run_params(cfg)?;
        let names = |s: &ParamStore| s.iter().map(|p| (p.name.clone(), p.value.shape().to_vec())).collect::<Vec<_>>();
        if names(&params) != names(&reference) {
            return Err(Error::Config("checkpoint parameters do not match the configuration".into()));
        }
        let mut adam = Adam::new(cfg.optim.clone(), &params);
        adam.t = meta.state.adam_t;
        for (prefix, table) in [(ADAM_M_PREFIX, &mut adam.m), (ADAM_V_PREFIX, &mut adam.v)] {
            let stored = ckpt.params(prefix)?;
            for (name, t) in table.iter_mut() {
                *t = stored
                    .get(name)
                    .filter(|s| s.shape() == t.shape())
                    .ok_or_else(|| Error::Config(format!("checkpoint lacks optimizer state for {name}")))?
                    .clone();
            }
        }
        let s = meta.state;
        Self::assemble(cfg, params, adam, s.usage, s.last_epoch_counts, s.step)
    }

    fn assemble(
        cfg: &RunConfig,
        params: ParamStore,
        adam: Adam,
        usage: CodebookUsage,
        last_epoch_counts: Vec<u64>,
        step: u64,
    ) -> Result<Self> {
        let (train, eval) = split_clips(cfg, load_clips(cfg)?)?;
        let targets = match make_teacher(cfg)? {
            Some(t) => Some(
                train
                    .iter()
                    .map(|c| t.features(c).map(|f| (f.image_tokens, f.video_tokens)))
                    .collect::<Result<Vec<_>>>()?,
            ),
            None => None,
        };
        let full_layout = params.layout(|_| true);
        let encoder_layout = params.layout(is_encoder_param);
        Ok(Self {
            cfg: cfg.clone(),
            train,
            eval,
            targets,
            params,
            adam,
            usage,
            last_epoch_counts,
            step,
            full_layout,
            encoder_layout,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.train.len().div_ceil(self.cfg.batch_size) as u64
    }

    pub fn train_clips(&self) -> &[VideoClip] {
        &self.train
    }

    pub fn eval_clips(&self) -> &[VideoClip] {
        &self.eval
    }

    /// Training-clip indices of step `step` (0-based).
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let spe = self.steps_per_epoch();
        let (epoch, pos) = (step / spe, (step % spe) as usize);
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut init_rng(self.cfg.seed, SHUFFLE_STREAM + epoch));
        let b = self.cfg.batch_size;
        order[pos * b..((pos + 1) * b).min(order.len())].to_vec()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let meta = TokenizerMeta {
            kind: "tokenizer".into(),
            run: self.cfg.clone(),
            state: TrainState {
                step: self.step,
                adam_t: self.adam.t,
                usage: self.usage.clone(),
                last_epoch_counts: self.last_epoch_counts.clone(),
            },
        };
        let mut ckpt = Checkpoint::with_params(serde_json::to_string(&meta).expect("meta serializes"), &self.params, PARAM_PREFIX);
        for (prefix, table) in [(ADAM_M_PREFIX, &self.adam.m), (ADAM_V_PREFIX, &self.adam.v)] {
            for (name, t) in table {
                ckpt.tensors.insert(format!("{prefix}{name}"), t.clone());
            }
        }
        ckpt
    }

    pub fn tokenizer(&self) -> Result<Tokenizer> {
        Tokenizer::from_params(self.cfg.tokenizer.clone(), &self.params)
    }

    pub fn evaluate(&self) -> Result<EvalReport> {
        evaluate(&self.tokenizer()?, &self.eval)
    }

    /// Step input for the given training clips.
    pub fn input(&self, idx: &[usize], epoch: u64) -> Result<StepInput<f32>> {
        let clips: Vec<&VideoClip> = idx.iter().map(|&i| &self.train[i]).collect();
        let (frame, tube) = batch_patches(&self.cfg.tokenizer, &clips)?;
        let stack = |pick: fn(&(Tensor, Tensor)) -> &Tensor| -> Option<Tensor> {
            let t = self.targets.as_ref()?;
            let first = pick(&t[idx[0]]).shape().to_vec();
            let data: Vec<f32> = idx.iter().flat_map(|&i| pick(&t[i]).data().iter().copied()).collect();
            Some(Tensor::new([vec![idx.len()], first].concat(), data).expect("teacher tokens share a shape"))
        };
        let motion_on = epoch >= self.cfg.align_motion_start_epoch;
        Ok(StepInput {
            frame,
            tube,
            image_targets: stack(|t| &t.0),
            video_targets: if motion_on { stack(|t| &t.1) } else { None },
        })
    }

    /// Runs one optimizer step. On error the state is left as it was.
    pub fn step(&mut self) -> Result<MetricsRow> {
        let spe = self.steps_per_epoch();
        let epoch = self.step / spe;
        let idx = self.batch_indices(self.step);
        let input = self.input(&idx, epoch)?;
        let both = input.image_targets.is_some() && input.video_targets.is_some();
        let sacp = if self.cfg.sacp && both {
            SacpMode::On { encoder: &self.encoder_layout, eps: self.cfg.sacp_eps as f32 }
        } else {
            SacpMode::Off
        };
        let sg = build_step(&self.params, &self.cfg.tokenizer, &self.cfg.loss, &input, sacp, None)?;
        if !sg.breakdown.total.is_finite() {
            return Err(Error::Numeric(format!("loss is {} at step {}", sg.breakdown.total, self.step + 1)));
        }
        let mut grad = sg.graph.backward(sg.total, &self.full_layout)?;
        let lr = lr_at(&self.cfg.optim, self.step, self.cfg.steps);
        let grad_norm = self.adam.step(&mut self.params, &mut grad, lr)?;
        self.usage.record(&sg.indices);
        self.step += 1;

        if self.step % spe == 0 {
            let dead = self.usage.dead();
            if !dead.is_empty() {
                let z = sg.graph.value(sg.z_pre);
                let d_z = self.cfg.tokenizer.d_z;
                let candidates = z.clone().reshape(vec![z.numel() / d_z, d_z])?;
                let mut rng = init_rng(self.cfg.seed, REINIT_STREAM + self.step);
                let book = self.params.get_mut(CODEBOOK).expect("codebook present");
                reinit_entries(book, &dead, &candidates, &mut rng)?;
                self.adam.reset_rows(CODEBOOK, &dead);
            }
            self.last_epoch_counts = self.usage.epoch_counts.clone();
            self.usage.reset_epoch();
        }

        let counts = if self.last_epoch_counts.is_empty() { &self.usage.epoch_counts } else { &self.last_epoch_counts };
        let b = &sg.breakdown;
        let o = sg.sacp.as_ref();
        Ok(MetricsRow {
            step: self.step,
            loss_total: b.total,
            loss_rec: b.rec,
            loss_vq: b.vq,
            loss_align_a: b.align_a,
            loss_align_m: b.align_m,
            sacp_s: o.map(|o| o.s as f64),
            conflict: o.map(|o| o.conflicted as u8),
            grad_norm_a: o.map(|o| o.norm_a as f64),
            grad_norm_m: o.map(|o| o.norm_m as f64),
            grad_norm,
            codebook_usage: usage_fraction(counts),
            codebook_perplexity: perplexity(counts),
            psnr: None,
            lr,
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    /// Continue from `checkpoint` when it exists.
    pub resume: bool,
    /// Stop (and checkpoint) once this many steps are complete.
    pub stop_after: Option<u64>,
    pub verbose: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub step: u64,
    /// Rows logged by this invocation.
    pub rows: Vec<MetricsRow>,
    pub eval: Option<EvalReport>,
}

pub fn train_tokenizer(cfg: &RunConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let resuming = opts.resume && opts.checkpoint.exists();
    let mut trainer = if resuming {
        TokenizerTrainer::from_checkpoint(cfg, &Checkpoint::load(&opts.checkpoint)?)?
    } else {
        TokenizerTrainer::new(cfg)?
    };
    let mut log = if resuming {
        MetricsLog::resume::<MetricsRow>(&opts.metrics, TOKENIZER_HEADER, trainer.step_count(), |r| r.step)?
    } else {
        MetricsLog::create(&opts.metrics, TOKENIZER_HEADER)?
    };
    let end = opts.stop_after.map_or(cfg.steps, |s| s.min(cfg.steps));
    let mut rows = Vec::new();
    let mut last_eval = None;
    while trainer.step_count() < end {
        let mut row = match trainer.step() {
            Ok(r) => r,
            Err(e) if e.is_numeric() => {
                // The failed step left the state untouched: keep it as the last good one.
                trainer.checkpoint().save(&opts.checkpoint)?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let s = row.step;
        let is_eval = s == cfg.steps || (cfg.eval_every > 0 && s % cfg.eval_every == 0);
        if is_eval {
            let report = trainer.evaluate()?;
            row.psnr = Some(report.mean_psnr);
            last_eval = Some(report);
        }
        if is_eval || s % cfg.log_every == 0 || s == end {
            log.append(s, &row)?;
            if opts.verbose {
                eprintln!(
                    "step {s:>6}  total {:.4}  rec {:.4}  vq {:.4}  usage {:.2}{}",
                    row.loss_total,
                    row.loss_rec,
                    row.loss_vq,
                    row.codebook_usage,
                    row.psnr.map_or(String::new(), |p| format!("  psnr {p:.2}"))
                );
            }
            rows.push(row);
        }
        if s == end || (cfg.checkpoint_every > 0 && s % cfg.checkpoint_every == 0) {
            trainer.checkpoint().save(&opts.checkpoint)?;
        }
    }
    if rows.is_empty() && !opts.checkpoint.exists() {
        trainer.checkpoint().save(&opts.checkpoint)?;
    }
    Ok(TrainOutcome { step: trainer.step_count(), rows, eval: last_eval })
}
