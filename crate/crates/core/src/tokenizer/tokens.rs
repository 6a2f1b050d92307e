use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Code indices: the first `l_a` describe appearance, the last `l_m` motion.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSequence {
    indices: Vec<u32>,
    pub l_a: usize,
    pub l_m: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Factor {
    Appearance,
    Motion,
}

impl TokenSequence {
    pub fn new(indices: Vec<u32>, l_a: usize, l_m: usize) -> Result<Self> {
        if indices.len() != l_a + l_m {
            return Err(Error::Invalid(format!(
                "{} indices for a {l_a}+{l_m} layout",
                indices.len()
            )));
        }
        Ok(Self { indices, l_a, l_m })
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn appearance(&self) -> &[u32] {
        &self.indices[..self.l_a]
    }

    pub fn motion(&self) -> &[u32] {
        &self.indices[self.l_a..]
    }

    fn range(&self, which: Factor) -> std::ops::Range<usize> {
        match which {
            Factor::Appearance => 0..self.l_a,
            Factor::Motion => self.l_a..self.l_a + self.l_m,
        }
    }
}

/// Exchanges the appearance or motion block between two sequences.
pub fn swap_tokens(x: &TokenSequence, y: &TokenSequence, which: Factor) -> Result<(TokenSequence, TokenSequence)> {
    if (x.l_a, x.l_m) != (y.l_a, y.l_m) {
        return Err(Error::Invalid(format!(
            "cannot swap between layouts {}+{} and {}+{}",
            x.l_a, x.l_m, y.l_a, y.l_m
        )));
    }
    let r = x.range(which);
    let (mut a, mut b) = (x.clone(), y.clone());
    a.indices[r.clone()].copy_from_slice(&y.indices[r.clone()]);
    b.indices[r.clone()].copy_from_slice(&x.indices[r]);
    Ok((a, b))
}
