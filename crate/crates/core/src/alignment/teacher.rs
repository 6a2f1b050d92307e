use std::path::{Path, PathBuf};

use diffcore::{Graph, ParamStore, Tensor};

use super::dfea::{self, StreamTag};
use crate::error::{Error, Result};
use crate::nn;
use crate::tokenizer::{patchify_frame, patchify_video, TokenizerConfig};
use crate::videolab::VideoClip;

/// Frozen target tokens for one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherFeatures {
    /// `[L_s, d_t]`
    pub image_tokens: Tensor,
    /// `[L_t, d_t]`
    pub video_tokens: Tensor,
    pub teacher_id: String,
}

pub trait TeacherProvider: Send + Sync {
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    fn features(&self, clip: &VideoClip) -> Result<TeacherFeatures>;
}

/// A seeded two-layer network on raw patches: frame patches give image tokens,
/// tubelets give video tokens. Its weights are never exposed to training.
#[derive(Debug, Clone)]
pub struct RandomTeacher {
    seed: u64,
    d_t: usize,
    cfg: TokenizerConfig,
    weights: ParamStore,
}

impl RandomTeacher {
    pub const HIDDEN: usize = 64;

    fn init_net(store: &mut ParamStore, rng: &mut impl rand::Rng, name: &str, input: usize, d_t: usize) -> Result<()> {
        let h = Self::HIDDEN;
        store.insert(format!("{name}.fc1.w"), nn::normal_tensor(rng, &[input, h], 1.0 / (input as f64).sqrt()))?;
        store.insert(format!("{name}.fc1.b"), nn::normal_tensor(rng, &[h], 0.5))?;
        store.insert(format!("{name}.fc2.w"), nn::normal_tensor(rng, &[h, d_t], 1.0 / (h as f64).sqrt()))?;
        store.insert(format!("{name}.fc2.b"), nn::normal_tensor(rng, &[d_t], 0.1))?;
        Ok(())
    }

    fn run(&self, name: &str, patches: Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(patches)?;
        let h = nn::linear(&mut g, &self.weights, &format!("{name}.fc1"), x)?;
        let h = g.gelu(h)?;
        let o = nn::linear(&mut g, &self.weights, &format!("{name}.fc2"), h)?;
        Ok(g.value(o).clone())
    }
}

pub fn random_teacher(seed: u64, d_t: usize, cfg: &TokenizerConfig) -> Result<RandomTeacher> {
    if d_t == 0 {
        return Err(Error::Config("teacher dim must be positive".into()));
    }
    let mut rng = crate::tokenizer::model::init_rng(seed, 0x7eac);
    let mut weights = ParamStore::new();
    RandomTeacher::init_net(&mut weights, &mut rng, "image", cfg.frame_patch_dim(), d_t)?;
    RandomTeacher::init_net(&mut weights, &mut rng, "video", cfg.tube_patch_dim(), d_t)?;
    Ok(RandomTeacher { seed, d_t, cfg: cfg.clone(), weights })
}

impl TeacherProvider for RandomTeacher {
    fn id(&self) -> String {
        format!("random-{}-{}", self.seed, self.d_t)
    }

    fn dim(&self) -> usize {
        self.d_t
    }

    fn features(&self, clip: &VideoClip) -> Result<TeacherFeatures> {
        Ok(TeacherFeatures {
            image_tokens: self.run("image", patchify_frame(clip, self.cfg.p)?)?,
            video_tokens: self.run("video", patchify_video(clip, self.cfg.t, self.cfg.p)?)?,
            teacher_id: self.id(),
        })
    }
}

/// Features precomputed offline, one DFEA file per clip and stream, named by the
/// clip's content hash.
#[derive(Debug, Clone)]
pub struct FileTeacher {
    dir: PathBuf,
    l_s: usize,
    l_t: usize,
    d_t: usize,
}

pub fn file_teacher(dir: &Path, cfg: &TokenizerConfig, d_t: usize) -> FileTeacher {
    FileTeacher { dir: dir.to_path_buf(), l_s: cfg.l_s(), l_t: cfg.l_t(), d_t }
}

pub fn feature_path(dir: &Path, hash: &[u8; 32], stream: StreamTag) -> PathBuf {
    dir.join(format!("{}.{}.dfea", hex::encode(hash), stream.name()))
}

impl FileTeacher {
    fn load(&self, hash: &[u8; 32], stream: StreamTag, expected: usize) -> Result<Tensor> {
        let path = feature_path(&self.dir, hash, stream);
        let file = dfea::load(&path)?;
        if file.stream != stream || file.hash != *hash {
            return Err(Error::Invalid(format!("{} holds features for another clip or stream", path.display())));
        }
        let (n, dim) = (file.features.shape()[0], file.features.shape()[1]);
        if n != expected {
            return Err(Error::CountMismatch { stream: stream.name(), expected, found: n });
        }
        if dim != self.d_t {
            return Err(Error::Invalid(format!("{} has dim {dim}, expected {}", path.display(), self.d_t)));
        }
        Ok(file.features)
    }
}

impl TeacherProvider for FileTeacher {
    fn id(&self) -> String {
        format!("file:{}", self.dir.display())
    }

    fn dim(&self) -> usize {
        self.d_t
    }

    fn features(&self, clip: &VideoClip) -> Result<TeacherFeatures> {
        let hash = clip.content_hash();
        Ok(TeacherFeatures {
            image_tokens: self.load(&hash, StreamTag::Image, self.l_s)?,
            video_tokens: self.load(&hash, StreamTag::Video, self.l_t)?,
            teacher_id: self.id(),
        })
    }
}

/// Writes both feature files for every clip; returns the paths written.
pub fn export_features(provider: &dyn TeacherProvider, clips: &[VideoClip], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for clip in clips {
        let f = provider.features(clip)?;
        let hash = clip.content_hash();
        for (stream, t) in [(StreamTag::Image, f.image_tokens), (StreamTag::Video, f.video_tokens)] {
            let path = feature_path(dir, &hash, stream);
            dfea::save(&path, &dfea::FeatureFile { stream, hash, features: t })?;
            written.push(path);
        }
    }
    Ok(written)
}
