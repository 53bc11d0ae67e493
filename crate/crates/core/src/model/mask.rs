//! Attention masks over a fully visible conditioning prefix followed by the
//! text stream.
//!
//! Prefix positions attend bidirectionally among themselves and never to
//! text. Every text position sees the whole prefix. Text-to-text visibility
//! depends on the mode; in block mode position `i` sees `j` iff
//! `b(j) <= b(i)` with `b(i) = i / block`.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMode {
    Full,
    Causal,
    Block(usize),
}

impl AttentionMode {
    /// Whether text position `i` may attend to text position `j`.
    #[inline]
    pub fn allows(self, i: usize, j: usize) -> bool {
        match self {
            AttentionMode::Full => true,
            AttentionMode::Causal => j <= i,
            AttentionMode::Block(b) => j / b <= i / b,
        }
    }

    /// Shortest text canvas that gives the first `valid` positions exactly
    /// the same context as a canvas of length `width`.
    pub fn effective_len(self, valid: usize, width: usize) -> usize {
        match self {
            AttentionMode::Full => width,
            AttentionMode::Causal => valid,
            AttentionMode::Block(b) => valid.div_ceil(b).saturating_mul(b).min(width),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionMaskSpec {
    pub mode: AttentionMode,
    pub prefix_len: usize,
    pub text_len: usize,
}

impl AttentionMaskSpec {
    pub fn validate(&self) -> Result<()> {
        if let AttentionMode::Block(b) = self.mode {
            if b == 0 || self.text_len % b != 0 {
                return Err(Error::Config(format!(
                    "block size {b} does not divide text length {}",
                    self.text_len
                )));
            }
        }
        Ok(())
    }

    #[inline]
    pub fn allows(&self, i: usize, j: usize) -> bool {
        let p = self.prefix_len;
        match (i < p, j < p) {
            (true, true) => true,
            (true, false) => false,
            (false, true) => true,
            (false, false) => self.mode.allows(i - p, j - p),
        }
    }
}

/// Boolean mask over `(prefix + text)²`, row-major; `true` means row `i`
/// may attend to column `j`.
pub fn build_attention_mask(spec: &AttentionMaskSpec) -> Result<Vec<Vec<bool>>> {
    spec.validate()?;
    let n = spec.prefix_len + spec.text_len;
    Ok((0..n).map(|i| (0..n).map(|j| spec.allows(i, j)).collect()).collect())
}
