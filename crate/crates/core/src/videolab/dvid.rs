//! DVID clip files: a 32-byte header followed by the row-major payload.
//!
//! ```text
//! 0   magic "DERAVID\0"
//! 8   u32 version (1)
//! 12  u32 T, u32 H, u32 W, u32 C
//! 28  u8 dtype (0 = u8, 1 = f32)
//! 29  u8 flags (bit 0: trailing u32 class label), u8 reserved x2
//! 32  payload, then the optional label
//! ```

use std::path::Path;

use super::clip::{VideoClip, CHANNELS};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DERAVID\0";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 32;
const FLAG_LABEL: u8 = 1;

/// Upper bound on the number of payload values accepted from a file.
const MAX_VALUES: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    U8 = 0,
    F32 = 1,
}

fn fmt_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format { format: "DVID", offset: offset as u64, msg: msg.into() }
}

pub fn encode(clip: &VideoClip, dtype: Dtype) -> Vec<u8> {
    let width = if dtype == Dtype::F32 { 4 } else { 1 };
    let mut out = Vec::with_capacity(HEADER_LEN + clip.pixels().len() * width + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for d in [clip.frames, clip.height, clip.width, CHANNELS] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.push(dtype as u8);
    out.push(if clip.class_label.is_some() { FLAG_LABEL } else { 0 });
    out.extend_from_slice(&[0, 0]);
    match dtype {
        Dtype::F32 => clip.pixels().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        Dtype::U8 => out.extend(clip.pixels().iter().map(|&v| ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8)),
    }
    if let Some(label) = clip.class_label {
        out.extend_from_slice(&label.to_le_bytes());
    }
    out
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice"))
}

pub fn decode(bytes: &[u8]) -> Result<VideoClip> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(fmt_err(0, "bad magic"));
    }
    if bytes.len() < HEADER_LEN {
        return Err(fmt_err(bytes.len(), "truncated header"));
    }
    let version = u32_at(bytes, 8);
    if version != VERSION {
        return Err(fmt_err(8, format!("unsupported version {version}")));
    }
    let dims: Vec<u32> = (0..4).map(|i| u32_at(bytes, 12 + 4 * i)).collect();
    if dims[3] as usize != CHANNELS {
        return Err(fmt_err(24, format!("expected {CHANNELS} channels, found {}", dims[3])));
    }
    if let Some(i) = dims.iter().position(|&d| d == 0) {
        return Err(fmt_err(12 + 4 * i, "zero dimension"));
    }
    let count = dims.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d as u64));
    let count = match count {
        Some(n) if n <= MAX_VALUES => n as usize,
        _ => return Err(fmt_err(12, "dimension overflow")),
    };
    let dtype = match bytes[28] {
        0 => Dtype::U8,
        1 => Dtype::F32,
        other => return Err(fmt_err(28, format!("unknown dtype {other}"))),
    };
    let has_label = bytes[29] & FLAG_LABEL != 0;
    let payload_len = count * if dtype == Dtype::F32 { 4 } else { 1 };
    let need = HEADER_LEN + payload_len + if has_label { 4 } else { 0 };
    if bytes.len() < need {
        return Err(fmt_err(bytes.len(), format!("truncated payload: need {need} bytes")));
    }
    let payload = &bytes[HEADER_LEN..HEADER_LEN + payload_len];
    let pixels: Vec<f32> = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
            .collect(),
        Dtype::U8 => payload.iter().map(|&v| v as f32 / 127.5 - 1.0).collect(),
    };
    if let Some(i) = pixels.iter().position(|v| !(-1.0..=1.0).contains(v)) {
        return Err(fmt_err(HEADER_LEN + 4 * i, format!("pixel value {} outside [-1, 1]", pixels[i])));
    }
    let label = has_label.then(|| u32_at(bytes, HEADER_LEN + payload_len));
    VideoClip::new(dims[0] as usize, dims[1] as usize, dims[2] as usize, pixels, label)
}

pub fn save_clip(path: &Path, clip: &VideoClip) -> Result<()> {
    save_clip_as(path, clip, Dtype::F32)
}

pub fn save_clip_as(path: &Path, clip: &VideoClip, dtype: Dtype) -> Result<()> {
    std::fs::write(path, encode(clip, dtype)).map_err(|e| Error::io(path, e))
}

pub fn load_clip(path: &Path) -> Result<VideoClip> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
