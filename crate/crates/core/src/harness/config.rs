use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::argen::ArConfig;
use crate::error::{Error, Result};
use crate::objective::LossWeights;
use crate::tokenizer::TokenizerConfig;
use crate::videolab::DatasetConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: u64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Floor of the cosine decay as a fraction of `lr`.
    pub min_lr_ratio: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.95, eps: 1e-8, warmup_steps: 100, grad_clip: 1.0, min_lr_ratio: 0.1 }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.grad_clip >= 0.0
            && (0.0..=1.0).contains(&self.min_lr_ratio);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Where alignment targets come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TeacherSpec {
    /// No teacher: the alignment heads and losses are not built at all.
    None,
    Random { seed: u64, dim: usize },
    File { dir: PathBuf, dim: usize },
}

impl Default for TeacherSpec {
    fn default() -> Self {
        TeacherSpec::Random { seed: 0, dim: 32 }
    }
}

impl TeacherSpec {
    pub fn dim(&self) -> Option<usize> {
        match self {
            TeacherSpec::None => None,
            TeacherSpec::Random { dim, .. } | TeacherSpec::File { dim, .. } => Some(*dim),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArTrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub log_every: u64,
}

impl Default for ArTrainConfig {
    fn default() -> Self {
        Self { steps: 2000, batch_size: 8, optim: OptimConfig { lr: 1e-3, ..Default::default() }, log_every: 10 }
    }
}

/// Everything one run needs. Serialized field order is the canonical key order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub tokenizer: TokenizerConfig,
    pub loss: LossWeights,
    pub optim: OptimConfig,
    pub steps: u64,
    pub batch_size: usize,
    /// Directory of `.dvid` clips; when absent the procedural set in `data` is generated in memory.
    pub data_dir: Option<PathBuf>,
    pub data: DatasetConfig,
    /// Clips held out from training for evaluation. 0 evaluates on the training clips.
    pub holdout: usize,
    pub teacher: TeacherSpec,
    pub sacp: bool,
    pub sacp_eps: f64,
    /// Epoch from which the motion alignment term is active.
    pub align_motion_start_epoch: u64,
    pub log_every: u64,
    /// 0 disables periodic evaluation.
    pub eval_every: u64,
    /// 0 saves only at the end.
    pub checkpoint_every: u64,
    pub ar: ArConfig,
    pub ar_train: ArTrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let tokenizer = TokenizerConfig::desk();
        let ar = ArConfig {
            k: tokenizer.k,
            seq_len: tokenizer.seq_len(),
            context: tokenizer.seq_len() + 1,
            ..ArConfig::default()
        };
        Self {
            seed: 0,
            tokenizer,
            loss: LossWeights::default(),
            optim: OptimConfig::default(),
            steps: 5000,
            batch_size: 8,
            data_dir: None,
            data: DatasetConfig::default(),
            holdout: 4,
            teacher: TeacherSpec::default(),
            sacp: true,
            sacp_eps: crate::sacp::DEFAULT_EPS,
            align_motion_start_epoch: 0,
            log_every: 10,
            eval_every: 500,
            checkpoint_every: 500,
            ar,
            ar_train: ArTrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.tokenizer.validate()?;
        self.loss.validate()?;
        self.optim.validate()?;
        self.ar_train.optim.validate()?;
        if self.batch_size == 0 || self.ar_train.batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.log_every == 0 || self.ar_train.log_every == 0 {
            return Err(Error::Config("log intervals must be positive".into()));
        }
        if !(self.sacp_eps > 0.0) {
            return Err(Error::Config("sacp_eps must be positive".into()));
        }
        if self.teacher.dim() == Some(0) {
            return Err(Error::Config("teacher dim must be positive".into()));
        }
        Ok(())
    }

    /// Generator config checked against this run's tokenizer.
    pub fn checked_ar(&self) -> Result<ArConfig> {
        let t = &self.tokenizer;
        if self.ar.k != t.k || self.ar.seq_len != t.seq_len() {
            return Err(Error::Config(format!(
                "generator expects K={} and L={}, tokenizer has K={} and L={}",
                self.ar.k,
                self.ar.seq_len,
                t.k,
                t.seq_len()
            )));
        }
        self.ar.validate()?;
        Ok(self.ar.clone())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    /// Canonical form: fixed key order, two-space indent, trailing newline.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let text = c.to_json();
        let back = RunConfig::from_json(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_json(), text);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_json(r#"{"seed": 1, "sedd": 2}"#).is_err());
        assert!(RunConfig::from_json(r#"{"optim": {"learning_rate": 0.1}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"teacher": {"kind": "random", "seed": 1, "dim": 8, "x": 0}}"#).is_err());
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let c = RunConfig::from_json(r#"{"seed": 7, "teacher": {"kind": "none"}}"#).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.teacher, TeacherSpec::None);
        assert_eq!(c.tokenizer, TokenizerConfig::desk());
    }

    #[test]
    fn generator_must_match_tokenizer() {
        let mut c = RunConfig::default();
        c.checked_ar().unwrap();
        c.ar.k = 128;
        assert!(c.checked_ar().is_err());
    }
}
