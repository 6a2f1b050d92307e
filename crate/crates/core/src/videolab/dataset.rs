use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::clip::VideoClip;
use super::dvid;
use super::scene::{generate_clip, SceneSpec, ShapeKind};
use crate::error::{Error, Result};

pub const N_MOTION_CLASSES: usize = 4;
pub const N_APPEARANCES: usize = 8;

/// Object colors, one per appearance variant. Every entry has a channel above 0.85,
/// which no background pixel reaches.
pub const PALETTE: [[f32; 3]; N_APPEARANCES] = [
    [0.9, -0.8, -0.8],
    [-0.8, 0.9, -0.8],
    [-0.8, -0.8, 0.9],
    [0.9, 0.9, -0.8],
    [0.9, -0.8, 0.9],
    [-0.8, 0.9, 0.9],
    [0.95, 0.95, 0.95],
    [0.9, 0.3, -0.9],
];

/// Unit direction `(dx, dy)` of each motion class: right, left, up, down.
pub const DIRECTIONS: [[f32; 2]; N_MOTION_CLASSES] = [[1.0, 0.0], [-1.0, 0.0], [0.0, -1.0], [0.0, 1.0]];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_clips: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { n_clips: 20, frames: 8, height: 32, width: 32, seed: 0 }
    }
}

/// Appearance variant and motion class of clip `index`.
pub fn factors(index: usize) -> (usize, usize) {
    (index % N_APPEARANCES, (index + index / N_APPEARANCES) % N_MOTION_CLASSES)
}

fn clip_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Scene of clip `index`. Start positions keep the object clear of the borders for the
/// whole clip whenever the canvas allows it.
pub fn scene_for(index: usize, cfg: &DatasetConfig) -> SceneSpec {
    let (appearance, motion) = factors(index);
    let mut rng = clip_rng(cfg.seed, index);
    let size = (cfg.height.min(cfg.width) / 4).max(2);
    let travel = cfg.frames.saturating_sub(1) as f32;
    let span = [(cfg.width - size) as f32, (cfg.height - size) as f32];
    let dir = DIRECTIONS[motion];
    let axis = if dir[0] != 0.0 { 0 } else { 1 };
    let mut speed: f32 = rng.random_range(1..=2) as f32;
    if speed * travel > span[axis] {
        speed = 1.0;
    }
    let reach = (speed * travel).min(span[axis]);
    let mut position = [0.0f32; 2];
    for (ax, p) in position.iter_mut().enumerate() {
        let lo_hi = if ax == axis {
            if dir[ax] > 0.0 {
                (0.0, span[ax] - reach)
            } else {
                (reach, span[ax])
            }
        } else {
            (0.0, span[ax])
        };
        *p = rng.random_range(lo_hi.0 as usize..=lo_hi.1 as usize) as f32;
    }
    let shade: f32 = rng.random_range(-0.35..-0.05);
    let tint: [f32; 3] = std::array::from_fn(|_| rng.random_range(-0.05..0.05));
    SceneSpec {
        shape: ShapeKind::ALL[appearance % ShapeKind::ALL.len()],
        size,
        fill: PALETTE[appearance],
        position,
        velocity: [dir[0] * speed, dir[1] * speed],
        background: std::array::from_fn(|c| shade + tint[c]),
        motion_class: motion as u32,
    }
}

pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Vec<VideoClip>> {
    (0..cfg.n_clips)
        .map(|i| {
            let texture_seed = clip_rng(cfg.seed, i).random::<u64>();
            generate_clip(&scene_for(i, cfg), texture_seed, cfg.frames, cfg.height, cfg.width)
        })
        .collect()
}

pub fn clip_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("clip_{index:04}.dvid"))
}

pub fn write_dataset(dir: &Path, clips: &[VideoClip]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, clip) in clips.iter().enumerate() {
        dvid::save_clip(&clip_path(dir, i), clip)?;
    }
    Ok(())
}

/// Loads every `*.dvid` in `dir`, in file-name order.
pub fn load_dataset(dir: &Path) -> Result<Vec<VideoClip>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "dvid"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Invalid(format!("no .dvid clips in {}", dir.display())));
    }
    paths.iter().map(|p| dvid::load_clip(p)).collect()
}

/// Index of the palette color nearest to `rgb`.
pub fn nearest_palette(rgb: [f32; 3]) -> usize {
    let d = |c: &[f32; 3]| c.iter().zip(&rgb).map(|(a, b)| (a - b) * (a - b)).sum::<f32>();
    (0..N_APPEARANCES)
        .min_by(|&a, &b| d(&PALETTE[a]).total_cmp(&d(&PALETTE[b])))
        .expect("non-empty palette")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::videolab::scene::centroid;

    #[test]
    fn desk_dataset_covers_every_class() {
        let cfg = DatasetConfig { n_clips: 16, ..Default::default() };
        let mut seen = [false; N_MOTION_CLASSES];
        for i in 0..16 {
            seen[factors(i).1] = true;
        }
        assert!(seen.iter().all(|&s| s));
        assert_eq!(generate_dataset(&cfg).unwrap().len(), 16);
    }

    #[test]
    fn displacement_follows_motion_class() {
        let cfg = DatasetConfig { n_clips: 40, seed: 3, ..Default::default() };
        for (i, clip) in generate_dataset(&cfg).unwrap().iter().enumerate() {
            let spec = scene_for(i, &cfg);
            let first = centroid(clip, 0, spec.fill).unwrap();
            let last = centroid(clip, clip.frames - 1, spec.fill).unwrap();
            let dir = DIRECTIONS[clip.class_label.unwrap() as usize];
            let moved = [last.0 - first.0, last.1 - first.1];
            assert!(moved[0] * dir[0] + moved[1] * dir[1] > 0.0, "clip {i}: {moved:?}");
            assert!(moved[0] * dir[1] - moved[1] * dir[0] == 0.0, "clip {i}: off-axis drift");
        }
    }

    #[test]
    fn palette_lookup_is_exact_on_palette() {
        for (i, c) in PALETTE.iter().enumerate() {
            assert_eq!(nearest_palette(*c), i);
        }
    }
}
