#![allow(dead_code)]

use dera::harness::{OptimConfig, RunConfig, TeacherSpec};
use dera::tokenizer::TokenizerConfig;
use dera::videolab::DatasetConfig;

/// A configuration small enough for many training steps inside a test.
pub fn tiny_run() -> RunConfig {
    let tokenizer = TokenizerConfig {
        frames: 4,
        height: 8,
        width: 8,
        t: 2,
        p: 4,
        l_a: 2,
        l_m: 2,
        d: 16,
        d_z: 4,
        k: 16,
        n_layers: 2,
        n_heads: 2,
        align_depth: 1,
    };
    let mut cfg = RunConfig {
        tokenizer,
        data: DatasetConfig { n_clips: 6, frames: 4, height: 8, width: 8, seed: 1 },
        holdout: 2,
        batch_size: 2,
        steps: 20,
        log_every: 1,
        eval_every: 10,
        checkpoint_every: 0,
        teacher: TeacherSpec::Random { seed: 3, dim: 8 },
        optim: OptimConfig { warmup_steps: 5, ..Default::default() },
        ..Default::default()
    };
    cfg.ar.k = 16;
    cfg.ar.seq_len = 4;
    cfg.ar.context = 5;
    cfg.ar.width = 16;
    cfg.ar.layers = 1;
    cfg.ar.heads = 2;
    cfg.ar_train.steps = 10;
    cfg.ar_train.batch_size = 2;
    cfg.ar_train.log_every = 1;
    cfg
}
