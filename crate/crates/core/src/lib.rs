//! Block-diffusion decoding for toy document OCR.
//!
//! Synthetic structured documents are rendered to glyph grids; a small
//! transformer learns to invert the rendering with a masked-diffusion
//! objective under block-structured attention, and decodes block by block
//! with confidence-gated parallel commitment.

pub mod bench;
pub mod corpus;
pub mod curriculum;
pub mod decoder;
pub mod diffusion;
pub mod error;
pub mod metrics;
pub mod model;
pub mod otsl;
pub mod pool;
pub mod renderer;
pub mod seed;
pub mod task;

pub use error::{Error, Result};

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    #[test]
    fn fnv_reference_vectors() {
        assert_eq!(super::fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(super::fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(super::fnv1a64(b"foobar"), 0x85944171f73967e8);
    }
}
