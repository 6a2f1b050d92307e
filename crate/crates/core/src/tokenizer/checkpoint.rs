//! DCKP checkpoints: a JSON document plus named f32 tensors in name order.
//!
//! ```text
//! "DERACKPT" | u32 version | u32 json_len | json | u32 count |
//!   count x { u16 name_len | name | u8 ndim | u32 dims[ndim] | f32 data[..] }
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use diffcore::{ParamStore, Tensor};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DERACKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_json: String,
    pub tensors: BTreeMap<String, Tensor>,
}

fn fmt_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format { format: "DCKP", offset: offset as u64, msg: msg.into() }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(fmt_err(self.pos, format!("truncated: need {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn utf8(&mut self, n: usize) -> Result<String> {
        let at = self.pos;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| fmt_err(at, "invalid UTF-8"))
    }
}

impl Checkpoint {
    pub fn new(config_json: String) -> Self {
        Self { config_json, tensors: BTreeMap::new() }
    }

    pub fn with_params(config_json: String, params: &ParamStore, prefix: &str) -> Self {
        let mut c = Self::new(config_json);
        c.add_params(params, prefix);
        c
    }

    /// Adds every parameter under `{prefix}{name}`.
    pub fn add_params(&mut self, params: &ParamStore, prefix: &str) {
        for p in params.iter() {
            self.tensors.insert(format!("{prefix}{}", p.name), p.value.clone());
        }
    }

    /// Parameters stored under `prefix`, with the prefix removed.
    pub fn params(&self, prefix: &str) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for (name, t) in self.tensors.range(prefix.to_string()..) {
            match name.strip_prefix(prefix) {
                Some(rest) => store.insert(rest, t.clone())?,
                None => break,
            }
        }
        Ok(store)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let json = self.config_json.as_bytes();
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(json);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let n = u16::try_from(name.len()).map_err(|_| Error::Invalid(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&n.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let ndim = u8::try_from(t.rank()).map_err(|_| Error::Invalid(format!("{name} has too many dims")))?;
            out.push(ndim);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(fmt_err(0, "bad magic"));
        }
        let mut r = Reader { bytes, pos: MAGIC.len() };
        let version = r.u32()?;
        if version != VERSION {
            return Err(fmt_err(8, format!("unsupported version {version}")));
        }
        let json_len = r.u32()? as usize;
        let config_json = r.utf8(json_len)?;
        let count = r.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let at = r.pos;
            let n = r.u16()? as usize;
            let name = r.utf8(n)?;
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n <= (bytes.len() - r.pos) / 4)
                .ok_or_else(|| fmt_err(r.pos, format!("tensor {name} larger than the file")))?;
            let data: Vec<f32> = r
                .take(numel * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if tensors.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
                return Err(fmt_err(at, format!("duplicate tensor {name}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(fmt_err(r.pos, "trailing bytes"));
        }
        Ok(Self { config_json, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        // Write then rename so an interrupted save never clobbers the last good file.
        let tmp = path.with_extension("dckp.tmp");
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}
