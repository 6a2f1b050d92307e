use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// Dense `T×H×W×3` pixel volume in [−1, 1], row-major T→H→W→C.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pixels: Vec<f32>,
    pub class_label: Option<u32>,
}

impl VideoClip {
    pub fn new(frames: usize, height: usize, width: usize, pixels: Vec<f32>, class_label: Option<u32>) -> Result<Self> {
        if frames == 0 || height == 0 || width == 0 {
            return Err(Error::Invalid(format!("clip dims must be positive, got {frames}x{height}x{width}")));
        }
        let expected = frames * height * width * CHANNELS;
        if pixels.len() != expected {
            return Err(Error::Invalid(format!("clip needs {expected} values, got {}", pixels.len())));
        }
        if let Some(i) = pixels.iter().position(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::Invalid(format!("pixel {i} = {} outside [-1, 1]", pixels[i])));
        }
        Ok(Self { frames, height, width, pixels, class_label })
    }

    /// Builds a clip from arbitrary finite values, clamping into [−1, 1].
    pub fn clamped(frames: usize, height: usize, width: usize, mut pixels: Vec<f32>, class_label: Option<u32>) -> Result<Self> {
        if let Some(i) = pixels.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("pixel {i} is not finite")));
        }
        pixels.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
        Self::new(frames, height, width, pixels, class_label)
    }

    pub fn filled(frames: usize, height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(frames, height, width, vec![value; frames * height * width * CHANNELS], None)
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    pub fn frame_len(&self) -> usize {
        self.height * self.width * CHANNELS
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.frame_len();
        &self.pixels[t * n..(t + 1) * n]
    }

    pub fn pixel(&self, t: usize, y: usize, x: usize) -> [f32; 3] {
        let i = ((t * self.height + y) * self.width + x) * CHANNELS;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn same_dims(&self, other: &Self) -> bool {
        (self.frames, self.height, self.width) == (other.frames, other.height, other.width)
    }

    /// SHA-256 over the dims (u32 LE) and the f32 LE payload. The label is excluded.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for d in [self.frames, self.height, self.width, CHANNELS] {
            h.update((d as u32).to_le_bytes());
        }
        for v in &self.pixels {
            h.update(v.to_le_bytes());
        }
        h.finalize().into()
    }
}
