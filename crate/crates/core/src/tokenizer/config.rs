use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::videolab::CHANNELS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Temporal patch size.
    pub t: usize,
    /// Spatial patch size.
    pub p: usize,
    pub l_a: usize,
    pub l_m: usize,
    pub d: usize,
    pub d_z: usize,
    pub k: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// 1-based encoder layer whose patch features are aligned.
    pub align_depth: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TokenizerConfig {
    pub fn desk() -> Self {
        Self {
            frames: 8,
            height: 32,
            width: 32,
            t: 2,
            p: 4,
            l_a: 16,
            l_m: 48,
            d: 128,
            d_z: 8,
            k: 256,
            n_layers: 4,
            n_heads: 4,
            align_depth: 4,
        }
    }

    pub fn full_scale() -> Self {
        Self {
            frames: 16,
            height: 128,
            width: 128,
            t: 4,
            p: 8,
            l_a: 256,
            l_m: 768,
            d: 768,
            d_z: 16,
            k: 8192,
            n_layers: 12,
            n_heads: 24,
            align_depth: 12,
        }
    }

    /// Heads default to one per 32 channels.
    pub fn default_heads(d: usize) -> usize {
        (d / 32).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if [self.frames, self.height, self.width, self.t, self.p, self.d, self.d_z, self.k, self.n_layers, self.n_heads]
            .contains(&0)
        {
            return bad("tokenizer sizes must be positive".into());
        }
        if self.frames % self.t != 0 {
            return bad(format!("frames {} not divisible by t = {}", self.frames, self.t));
        }
        if self.height % self.p != 0 || self.width % self.p != 0 {
            return bad(format!("{}x{} not divisible by p = {}", self.height, self.width, self.p));
        }
        if self.l_a == 0 || self.l_m == 0 {
            return bad("L_a and L_m must be at least 1".into());
        }
        if self.d % self.n_heads != 0 {
            return bad(format!("d = {} not divisible by {} heads", self.d, self.n_heads));
        }
        if !(1..=self.n_layers).contains(&self.align_depth) {
            return bad(format!("align_depth {} outside 1..={}", self.align_depth, self.n_layers));
        }
        Ok(())
    }

    /// Frame-patch count `(H/p)·(W/p)`.
    pub fn l_s(&self) -> usize {
        (self.height / self.p) * (self.width / self.p)
    }

    /// Tubelet count `(T/t)·(H/p)·(W/p)`.
    pub fn l_t(&self) -> usize {
        (self.frames / self.t) * self.l_s()
    }

    /// Token sequence length `L_a + L_m`.
    pub fn seq_len(&self) -> usize {
        self.l_a + self.l_m
    }

    pub fn frame_patch_dim(&self) -> usize {
        self.p * self.p * CHANNELS
    }

    pub fn tube_patch_dim(&self) -> usize {
        self.t * self.frame_patch_dim()
    }
}
