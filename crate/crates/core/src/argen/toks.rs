//! DERATOKS: a list of token sequences, optionally labelled.
//!
//! ```text
//! magic "DERATOKS" | u32 version | u32 count | u32 length | u32 l_a | u32 flags
//! per sequence: [u32 label if flags & 1] u32 × length
//! ```
//! All integers little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tokenizer::TokenSequence;

pub const MAGIC: &[u8; 8] = b"DERATOKS";
pub const VERSION: u32 = 1;
const HEADER: usize = 28;
const FLAG_LABELS: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenFile {
    pub sequences: Vec<TokenSequence>,
    pub labels: Option<Vec<u32>>,
}

fn format_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format { format: "DERATOKS", offset: offset as u64, msg: msg.into() }
}

impl TokenFile {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let first = self.sequences.first();
        let (len, l_a) = first.map_or((0, 0), |s| (s.len(), s.l_a));
        if self.sequences.iter().any(|s| s.len() != len || s.l_a != l_a) {
            return Err(Error::Invalid("token sequences differ in layout".into()));
        }
        if let Some(l) = &self.labels {
            if l.len() != self.sequences.len() {
                return Err(Error::Invalid(format!("{} labels for {} sequences", l.len(), self.sequences.len())));
            }
        }
        let mut out = Vec::with_capacity(HEADER + self.sequences.len() * (len + 1) * 4);
        out.extend_from_slice(MAGIC);
        let flags = if self.labels.is_some() { FLAG_LABELS } else { 0 };
        for v in [VERSION, self.sequences.len() as u32, len as u32, l_a as u32, flags] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for (i, s) in self.sequences.iter().enumerate() {
            if let Some(l) = &self.labels {
                out.extend_from_slice(&l[i].to_le_bytes());
            }
            for &id in s.indices() {
                out.extend_from_slice(&id.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER {
            return Err(format_err(bytes.len(), "truncated header"));
        }
        if &bytes[..8] != MAGIC {
            return Err(format_err(0, "bad magic"));
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
        if word(8) != VERSION {
            return Err(format_err(8, format!("unsupported version {}", word(8))));
        }
        let (count, len, l_a, flags) = (word(12) as usize, word(16) as usize, word(20) as usize, word(24));
        if l_a > len {
            return Err(format_err(20, format!("l_a {l_a} exceeds length {len}")));
        }
        if flags & !FLAG_LABELS != 0 {
            return Err(format_err(24, format!("unknown flags {flags:#x}")));
        }
        let labelled = flags & FLAG_LABELS != 0;
        let per = (len + labelled as usize) as u64 * 4;
        let expected = HEADER as u64 + per * count as u64;
        if bytes.len() as u64 != expected {
            return Err(format_err(bytes.len().min(expected as usize), format!("expected {expected} bytes, found {}", bytes.len())));
        }
        let mut at = HEADER;
        let mut sequences = Vec::with_capacity(count);
        let mut labels = labelled.then(|| Vec::with_capacity(count));
        for _ in 0..count {
            if let Some(l) = labels.as_mut() {
                l.push(word(at));
                at += 4;
            }
            let ids = (0..len).map(|j| word(at + 4 * j)).collect();
            at += 4 * len;
            sequences.push(TokenSequence::new(ids, l_a, len - l_a)?);
        }
        Ok(Self { sequences, labels })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}
