//! One inverse-rendering task instance: the vocabulary, the glyph table and
//! the wrap width that together turn a document into model inputs.

use crate::corpus::{DocKind, Document, TokenId, Vocabulary};
use crate::error::Result;
use crate::model::Conditioning;
use crate::renderer::{build_glyph_table, visual_input, GlyphTable};
use crate::seed::{self, streams};

#[derive(Debug, Clone)]
pub struct Task {
    pub vocab: Vocabulary,
    pub glyphs: GlyphTable,
    /// Glyph cells per rendered line.
    pub wrap: usize,
}

impl Task {
    pub fn new(vocab: Vocabulary, glyph_size: usize, wrap: usize, glyph_seed: u64) -> Result<Self> {
        if wrap == 0 {
            return Err(crate::Error::Config("wrap width must be positive".into()));
        }
        let glyphs = build_glyph_table(&vocab, glyph_size, glyph_seed)?;
        Ok(Self { vocab, glyphs, wrap })
    }

    pub fn visual_dim(&self) -> usize {
        self.glyphs.visual_dim()
    }

    /// Renders `tokens` (EOS included) with glyph noise `epsilon`; the noise
    /// pattern is a function of `noise_seed` alone.
    pub fn condition(
        &self,
        kind: DocKind,
        tokens: &[TokenId],
        epsilon: f64,
        noise_seed: u64,
    ) -> Result<Conditioning> {
        Ok(Conditioning {
            tag: self.vocab.tag_for(kind),
            visual: visual_input(tokens, self.wrap, &self.glyphs, epsilon, noise_seed)?,
        })
    }

    /// Noise seed of document `id` under root seed `seed`.
    pub fn noise_seed(seed: u64, id: u64) -> u64 {
        seed::derive(seed, streams::NOISE, id)
    }

    pub fn example(
        &self,
        doc: &Document,
        epsilon: f64,
        noise_seed: u64,
        block: usize,
        weight: f64,
    ) -> Result<TrainExample> {
        Ok(TrainExample {
            id: doc.id,
            kind: doc.kind,
            target: fill_to_block(&doc.tokens, block, self.vocab.eos),
            cond: self.condition(doc.kind, &doc.tokens, epsilon, noise_seed)?,
            weight,
        })
    }
}

/// Extends a document with EOS up to the next multiple of `block`, so the
/// final block carries a learnable target everywhere and no PAD ever sits
/// inside a block the model attends to.
pub fn fill_to_block(tokens: &[TokenId], block: usize, eos: TokenId) -> Vec<TokenId> {
    let mut out = tokens.to_vec();
    out.resize(tokens.len().div_ceil(block.max(1)) * block.max(1), eos);
    out
}

/// A supervised training pair with its sample weight.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub id: u64,
    pub kind: DocKind,
    pub target: Vec<TokenId>,
    pub cond: Conditioning,
    pub weight: f64,
}
