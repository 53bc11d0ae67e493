//! Glyph rendering of token sequences and the visual conditioning derived
//! from it.
//!
//! Each token owns a seeded `k×k` binary bitmap. A sequence is laid out
//! row-major on a grid `W` cells wide, optionally corrupted by independent
//! pixel flips, and flattened into one patch vector per cell. The
//! nearest-glyph decoder is a brute-force reference that certifies the task
//! is solvable from pixels alone.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng as _;

use crate::corpus::{TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::seed::{self, streams, Rng};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GlyphTable {
    k: usize,
    /// One `k*k` bitmap per token index, row-major, values 0/1.
    bitmaps: Vec<Vec<u8>>,
    /// Tokens the reference decoder may answer with.
    candidates: Vec<bool>,
    pub seed: u64,
}

pub fn build_glyph_table(vocab: &Vocabulary, k: usize, seed: u64) -> Result<GlyphTable> {
    let bits = k * k;
    // The all-zero pattern is reserved for blank cells.
    let available = if bits >= 63 { u64::MAX } else { (1u64 << bits) - 1 };
    if available < vocab.len() as u64 {
        return Err(Error::Config(format!(
            "glyph size {k} gives {} patterns, fewer than {} tokens",
            available,
            vocab.len()
        )));
    }
    if k < 3 {
        return Err(Error::Config(format!("glyph size {k} below minimum 3")));
    }
    let mut bitmaps: Vec<Vec<u8>> = Vec::with_capacity(vocab.len());
    for token in 0..vocab.len() as u64 {
        let mut salt = 0u64;
        loop {
            let mut rng = seed::child_rng(seed, streams::GLYPH, (token << 20) | salt);
            let bm: Vec<u8> = (0..bits).map(|_| rng.gen::<bool>() as u8).collect();
            if bm.iter().any(|&b| b == 1) && !bitmaps.contains(&bm) {
                bitmaps.push(bm);
                break;
            }
            salt += 1;
        }
    }
    Ok(GlyphTable {
        k,
        bitmaps,
        candidates: vocab.emittable(),
        seed,
    })
}

impl GlyphTable {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.bitmaps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bitmaps.is_empty()
    }

    pub fn bitmap(&self, token: TokenId) -> &[u8] {
        &self.bitmaps[token as usize]
    }

    /// Visual token dimension: flattened bitmap plus two coordinates.
    pub fn visual_dim(&self) -> usize {
        self.k * self.k + 2
    }

    /// Smallest pairwise Hamming distance among decodable glyphs.
    pub fn min_distance(&self) -> usize {
        let ids: Vec<usize> = (0..self.len()).filter(|&i| self.candidates[i]).collect();
        let mut best = usize::MAX;
        for (a, &i) in ids.iter().enumerate() {
            for &j in &ids[a + 1..] {
                best = best.min(hamming(&self.bitmaps[i], &self.bitmaps[j]));
            }
        }
        best
    }

    #[cfg(test)]
    pub(crate) fn from_bitmaps(k: usize, bitmaps: Vec<Vec<u8>>) -> Self {
        let n = bitmaps.len();
        Self {
            k,
            bitmaps,
            candidates: vec![true; n],
            seed: 0,
        }
    }
}

fn hamming(a: &[u8], b: &[u8]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

/// Binary raster of a rendered sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelGrid {
    /// Grid size in glyph cells.
    pub rows: usize,
    pub cols: usize,
    /// Pixels per glyph side.
    pub k: usize,
    /// Wrap width in tokens per line.
    pub wrap: usize,
    /// `rows*k` by `cols*k` pixels, row-major, values 0/1.
    pub pixels: Vec<u8>,
}

impl PixelGrid {
    pub fn height(&self) -> usize {
        self.rows * self.k
    }

    pub fn width(&self) -> usize {
        self.cols * self.k
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    fn cell_pixels(&self, cell: usize, k: usize) -> impl Iterator<Item = u8> + '_ {
        let cols = self.width() / k;
        let (r, c) = (cell / cols, cell % cols);
        let w = self.width();
        (0..k).flat_map(move |y| {
            let base = (r * k + y) * w + c * k;
            self.pixels[base..base + k].iter().copied()
        })
    }

    /// Writes the grid as a binary PGM (P5); ink is black.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut out = format!("P5\n{} {}\n255\n", self.width(), self.height()).into_bytes();
        out.extend(self.pixels.iter().map(|&p| if p == 1 { 0u8 } else { 255u8 }));
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }
}

/// Lays `tokens` out row-major, `wrap` cells per line; token `i` lands in
/// cell `(i / wrap, i % wrap)`.
pub fn render(tokens: &[TokenId], wrap: usize, glyphs: &GlyphTable) -> Result<PixelGrid> {
    if wrap == 0 {
        return Err(Error::Domain("wrap width must be at least 1".into()));
    }
    let k = glyphs.k;
    let rows = tokens.len().div_ceil(wrap);
    let cols = wrap;
    let width = cols * k;
    let mut pixels = vec![0u8; rows * k * width];
    for (i, &t) in tokens.iter().enumerate() {
        let (r, c) = (i / wrap, i % wrap);
        let bm = glyphs.bitmap(t);
        for y in 0..k {
            let base = (r * k + y) * width + c * k;
            pixels[base..base + k].copy_from_slice(&bm[y * k..(y + 1) * k]);
        }
    }
    Ok(PixelGrid {
        rows,
        cols,
        k,
        wrap,
        pixels,
    })
}

/// Flips every pixel independently with probability `epsilon`.
pub fn add_noise(grid: &PixelGrid, epsilon: f64, rng: &mut Rng) -> Result<PixelGrid> {
    if !(0.0..=0.5).contains(&epsilon) {
        return Err(Error::Domain(format!("flip probability {epsilon} outside [0, 0.5]")));
    }
    let mut out = grid.clone();
    if epsilon > 0.0 {
        for p in &mut out.pixels {
            if rng.gen_bool(epsilon) {
                *p ^= 1;
            }
        }
    }
    Ok(out)
}

/// Per-cell patch vectors used as the model's visual prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualTokens {
    pub dim: usize,
    /// `len * dim` values, row-major.
    pub data: Vec<f32>,
}

impl VisualTokens {
    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn token(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// One vector per cell, row-major: the `k*k` bitmap followed by the
/// normalized row and column coordinates.
pub fn encode_visual(grid: &PixelGrid, k: usize) -> Result<VisualTokens> {
    if k == 0 || grid.height() % k != 0 || grid.width() % k != 0 {
        return Err(Error::Domain(format!(
            "grid {}x{} pixels is not divisible into {k}x{k} cells",
            grid.height(),
            grid.width()
        )));
    }
    let rows = grid.height() / k;
    let cols = grid.width() / k;
    let dim = k * k + 2;
    let norm = |i: usize, n: usize| if n <= 1 { 0.0 } else { i as f32 / (n - 1) as f32 };
    let mut data = Vec::with_capacity(rows * cols * dim);
    for cell in 0..rows * cols {
        data.extend(grid.cell_pixels(cell, k).map(f32::from));
        data.push(norm(cell / cols, rows));
        data.push(norm(cell % cols, cols));
    }
    Ok(VisualTokens { dim, data })
}

/// Nearest-glyph reading of every cell (Hamming distance, lowest token index
/// on ties). Output stops after the first EOS; without an EOS, trailing
/// blank cells are dropped.
pub fn oracle_decode(grid: &PixelGrid, glyphs: &GlyphTable, eos: TokenId) -> Vec<TokenId> {
    let k = glyphs.k;
    let mut out = Vec::new();
    let mut last_ink = 0;
    for cell in 0..grid.cells() {
        let patch: Vec<u8> = grid.cell_pixels(cell, k).collect();
        let mut best = (usize::MAX, 0 as TokenId);
        for (t, bm) in glyphs.bitmaps.iter().enumerate() {
            if !glyphs.candidates[t] {
                continue;
            }
            let d = hamming(&patch, bm);
            if d < best.0 {
                best = (d, t as TokenId);
            }
        }
        out.push(best.1);
        if patch.iter().any(|&p| p == 1) {
            last_ink = out.len();
        }
        if best.1 == eos {
            return out;
        }
    }
    out.truncate(last_ink);
    out
}

/// Renders, corrupts and encodes in one call. Noise is drawn from its own
/// stream so identical `(tokens, epsilon, noise_seed)` give identical input.
pub fn visual_input(
    tokens: &[TokenId],
    wrap: usize,
    glyphs: &GlyphTable,
    epsilon: f64,
    noise_seed: u64,
) -> Result<VisualTokens> {
    let grid = render(tokens, wrap, glyphs)?;
    let grid = if epsilon > 0.0 {
        add_noise(&grid, epsilon, &mut seed::rng(noise_seed))?
    } else {
        grid
    };
    encode_visual(&grid, glyphs.k)
}
