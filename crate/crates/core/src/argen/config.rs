use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArMode {
    /// `[CLS_c] ∥ tokens`
    Class,
    /// `context tokens ∥ [SEP] ∥ tokens`
    Predict,
}

/// Generator sizes and sampling defaults. The vocabulary is the `k` code ids followed
/// by one `[CLS]` per class, `[SEP]` and `[UNCOND]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArConfig {
    pub mode: ArMode,
    /// Codebook size of the tokenizer.
    pub k: usize,
    /// Tokens per clip, `L_a + L_m`.
    pub seq_len: usize,
    pub n_classes: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub context: usize,
    pub cfg_scale: f64,
    pub temperature: f64,
    /// 0 disables top-k filtering.
    pub top_k: usize,
    pub cond_dropout: f64,
}

impl Default for ArConfig {
    fn default() -> Self {
        Self {
            mode: ArMode::Class,
            k: 256,
            seq_len: 64,
            n_classes: 4,
            width: 128,
            layers: 4,
            heads: 4,
            context: 129,
            cfg_scale: 1.2,
            temperature: 1.0,
            top_k: 0,
            cond_dropout: 0.1,
        }
    }
}

impl ArConfig {
    pub fn vocab(&self) -> usize {
        self.k + self.n_classes + 2
    }

    pub fn cls(&self, class: usize) -> u32 {
        (self.k + class) as u32
    }

    pub fn sep(&self) -> u32 {
        (self.k + self.n_classes) as u32
    }

    pub fn uncond(&self) -> u32 {
        (self.k + self.n_classes + 1) as u32
    }

    pub fn is_code(&self, id: u32) -> bool {
        (id as usize) < self.k
    }

    /// Length of a full training sequence in the configured mode.
    pub fn sequence_len(&self) -> usize {
        match self.mode {
            ArMode::Class => self.seq_len + 1,
            ArMode::Predict => 2 * self.seq_len + 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if [self.k, self.seq_len, self.width, self.layers, self.heads].contains(&0) {
            return bad("generator sizes must be positive".into());
        }
        if self.mode == ArMode::Class && self.n_classes == 0 {
            return bad("class mode needs at least one class".into());
        }
        if self.width % self.heads != 0 {
            return bad(format!("width {} not divisible by {} heads", self.width, self.heads));
        }
        if self.context < self.sequence_len() {
            return bad(format!(
                "context {} too short for {:?} mode (needs {})",
                self.context,
                self.mode,
                self.sequence_len()
            ));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return bad(format!("cond_dropout {} outside [0, 1]", self.cond_dropout));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) || !self.cfg_scale.is_finite() {
            return bad("temperature must be >= 0 and cfg_scale finite".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn special_ids_follow_codes() {
        let c = ArConfig::default();
        assert_eq!(c.vocab(), 262);
        assert_eq!((c.cls(0), c.cls(3), c.sep(), c.uncond()), (256, 259, 260, 261));
        assert!(c.is_code(255) && !c.is_code(256));
        c.validate().unwrap();
    }

    #[test]
    fn context_must_fit_mode() {
        let mut c = ArConfig { context: 65, ..Default::default() };
        c.validate().unwrap();
        c.mode = ArMode::Predict;
        assert!(c.validate().is_err());
        c.context = 129;
        c.validate().unwrap();
    }
}
