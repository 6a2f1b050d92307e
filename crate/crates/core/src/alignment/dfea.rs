//! DFEA teacher-feature files.
//!
//! ```text
//! 0   magic "DERAFEA\0"
//! 8   u32 version (1), u32 n_tokens, u32 dim
//! 20  u8 stream (0 = image, 1 = video)
//! 21  32-byte clip content hash
//! 53  f32 payload, row-major
//! ```

use std::path::Path;

use diffcore::Tensor;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DERAFEA\0";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 53;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamTag {
    Image = 0,
    Video = 1,
}

impl StreamTag {
    pub fn name(self) -> &'static str {
        match self {
            StreamTag::Image => "image",
            StreamTag::Video => "video",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    pub stream: StreamTag,
    pub hash: [u8; 32],
    /// `[n_tokens, dim]`
    pub features: Tensor,
}

fn fmt_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format { format: "DFEA", offset: offset as u64, msg: msg.into() }
}

pub fn encode(f: &FeatureFile) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * f.features.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(f.features.shape()[0] as u32).to_le_bytes());
    out.extend_from_slice(&(f.features.shape()[1] as u32).to_le_bytes());
    out.push(f.stream as u8);
    out.extend_from_slice(&f.hash);
    f.features.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    out
}

pub fn decode(bytes: &[u8]) -> Result<FeatureFile> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(fmt_err(0, "bad magic"));
    }
    if bytes.len() < HEADER_LEN {
        return Err(fmt_err(bytes.len(), "truncated header"));
    }
    let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
    if u32_at(8) != VERSION {
        return Err(fmt_err(8, format!("unsupported version {}", u32_at(8))));
    }
    let (n, dim) = (u32_at(12) as usize, u32_at(16) as usize);
    if n == 0 || dim == 0 {
        return Err(fmt_err(12, "empty feature grid"));
    }
    let stream = match bytes[20] {
        0 => StreamTag::Image,
        1 => StreamTag::Video,
        other => return Err(fmt_err(20, format!("unknown stream tag {other}"))),
    };
    let hash: [u8; 32] = bytes[21..53].try_into().expect("32 bytes");
    let payload = &bytes[HEADER_LEN..];
    let want = n.checked_mul(dim).and_then(|c| c.checked_mul(4));
    if want != Some(payload.len()) {
        return Err(fmt_err(HEADER_LEN, format!("payload of {} bytes for {n}x{dim} features", payload.len())));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(fmt_err(HEADER_LEN + 4 * i, "non-finite feature value"));
    }
    Ok(FeatureFile { stream, hash, features: Tensor::new(vec![n, dim], data)? })
}

pub fn save(path: &Path, f: &FeatureFile) -> Result<()> {
    std::fs::write(path, encode(f)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<FeatureFile> {
    decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
