use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::clip::{VideoClip, CHANNELS};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rect,
    Circle,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Rect, ShapeKind::Circle, ShapeKind::Cross];

    /// Whether cell `(i, j)` of a `size × size` box belongs to the shape.
    pub fn covers(self, i: usize, j: usize, size: usize) -> bool {
        match self {
            ShapeKind::Rect => true,
            ShapeKind::Circle => {
                let c = size as f32 / 2.0;
                let (dy, dx) = (i as f32 + 0.5 - c, j as f32 + 0.5 - c);
                dy * dy + dx * dx <= c * c
            }
            ShapeKind::Cross => {
                let (lo, hi) = (size / 3, size - size / 3);
                (lo..hi).contains(&i) || (lo..hi).contains(&j)
            }
        }
    }
}

/// One moving object over a textured static background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub shape: ShapeKind,
    /// Side of the object's bounding box in pixels.
    pub size: usize,
    pub fill: [f32; 3],
    /// Top-left corner `(x, y)` at frame 0.
    pub position: [f32; 2],
    /// Pixels per frame `(dx, dy)`; positive y points down.
    pub velocity: [f32; 2],
    pub background: [f32; 3],
    pub motion_class: u32,
}

/// Folds `p` into `[0, span]` by mirror reflection at both borders.
pub fn reflect(p: f32, span: f32) -> f32 {
    if span <= 0.0 {
        return 0.0;
    }
    let period = 2.0 * span;
    let r = p.rem_euclid(period);
    if r > span {
        period - r
    } else {
        r
    }
}

/// Renders `spec`. The seed only drives the background texture, so two clips from
/// the same spec differ exactly in background.
pub fn generate_clip(spec: &SceneSpec, seed: u64, frames: usize, height: usize, width: usize) -> Result<VideoClip> {
    if frames == 0 || height == 0 || width == 0 {
        return Err(Error::Invalid("clip dims must be positive".into()));
    }
    if spec.size == 0 || spec.size > height || spec.size > width {
        return Err(Error::Invalid(format!(
            "object of size {} does not fit a {height}x{width} canvas",
            spec.size
        )));
    }
    let in_range = |c: &[f32; 3]| c.iter().all(|v| (-1.0..=1.0).contains(v));
    if !in_range(&spec.fill) || !in_range(&spec.background) {
        return Err(Error::Invalid("scene colors must lie in [-1, 1]".into()));
    }
    if !spec.position.iter().chain(&spec.velocity).all(|v| v.is_finite()) {
        return Err(Error::Invalid("scene position and velocity must be finite".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fx: f32 = rng.random_range(0.15..0.6);
    let fy: f32 = rng.random_range(0.15..0.6);
    let phase: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.0..std::f32::consts::TAU));

    let mut background = vec![0.0f32; height * width * CHANNELS];
    for y in 0..height {
        for x in 0..width {
            for c in 0..CHANNELS {
                let tex = 0.08 * (fx * x as f32 + fy * y as f32 + phase[c]).sin();
                background[(y * width + x) * CHANNELS + c] = (spec.background[c] + tex).clamp(-1.0, 1.0);
            }
        }
    }

    let span_x = (width - spec.size) as f32;
    let span_y = (height - spec.size) as f32;
    let mut pixels = Vec::with_capacity(frames * background.len());
    for t in 0..frames {
        let mut frame = background.clone();
        let x0 = reflect(spec.position[0] + t as f32 * spec.velocity[0], span_x).round() as usize;
        let y0 = reflect(spec.position[1] + t as f32 * spec.velocity[1], span_y).round() as usize;
        for i in 0..spec.size {
            for j in 0..spec.size {
                if spec.shape.covers(i, j, spec.size) {
                    let at = ((y0 + i) * width + x0 + j) * CHANNELS;
                    frame[at..at + CHANNELS].copy_from_slice(&spec.fill);
                }
            }
        }
        pixels.extend_from_slice(&frame);
    }
    VideoClip::new(frames, height, width, pixels, Some(spec.motion_class))
}

/// Mean `(x, y)` of pixels equal to `fill` in frame `t`, or `None` if absent.
pub fn centroid(clip: &VideoClip, t: usize, fill: [f32; 3]) -> Option<(f32, f32)> {
    let (mut sx, mut sy, mut n) = (0.0f64, 0.0f64, 0usize);
    for y in 0..clip.height {
        for x in 0..clip.width {
            if clip.pixel(t, y, x) == fill {
                sx += x as f64;
                sy += y as f64;
                n += 1;
            }
        }
    }
    (n > 0).then(|| ((sx / n as f64) as f32, (sy / n as f64) as f32))
}
