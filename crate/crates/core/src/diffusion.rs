//! Masked-diffusion forward process and the ELBO objective.
//!
//! A clean sequence `x0` is corrupted by replacing each valid position with
//! MASK independently with probability `t`. Training draws `t` uniformly on
//! `(t_min, 1]`, either once per sample or once per block, and minimises
//!
//! ```text
//! L = -(1/N) Σ_s w_s · 1/(|x0_s|) Σ_{i masked} log p(x0_i | x_t, Q) / t_i
//! ```
//!
//! where `t_i` is the noise level of the block containing `i`.

use rand::Rng as _;

use crate::corpus::{TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::seed::Rng;

/// Lower clamp on sampled noise levels; keeps `1/t` bounded.
pub const DEFAULT_T_MIN: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseMode {
    /// One `t` per sample, shared by every block.
    GlobalT,
    /// Independent `t` per block per sample.
    PerBlockT,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseConfig {
    pub mode: NoiseMode,
    pub t_min: f64,
    /// Overrides sampling with a constant level (tests and diagnostics).
    pub fixed_t: Option<f64>,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            mode: NoiseMode::PerBlockT,
            t_min: DEFAULT_T_MIN,
            fixed_t: None,
        }
    }
}

/// Replaces each token with `mask` with probability `t`.
pub fn corrupt(
    x0: &[TokenId],
    t: f64,
    mask: TokenId,
    rng: &mut Rng,
) -> Result<(Vec<TokenId>, Vec<bool>)> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::Domain(format!("noise level {t} outside (0, 1]")));
    }
    let mut xt = x0.to_vec();
    let mut flags = vec![false; x0.len()];
    for (tok, flag) in xt.iter_mut().zip(flags.iter_mut()) {
        if t >= 1.0 || rng.gen::<f64>() < t {
            *tok = mask;
            *flag = true;
        }
    }
    Ok((xt, flags))
}

/// Draws `t` uniformly on `(t_min, 1]`.
pub fn sample_time(rng: &mut Rng, t_min: f64) -> f64 {
    // 1 - U[0,1) lies in (0, 1].
    let u = 1.0 - rng.gen::<f64>();
    t_min + (1.0 - t_min) * u
}

/// A corrupted batch. Matrices are `batch × width`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedBatch {
    pub width: usize,
    pub block: usize,
    pub mode: NoiseMode,
    pub x0: Vec<TokenId>,
    pub xt: Vec<TokenId>,
    pub mask_flags: Vec<bool>,
    /// `batch × (width / block)` noise levels; constant across a row in
    /// global mode.
    pub t_values: Vec<f64>,
    pub valid_lengths: Vec<usize>,
    pub sample_weights: Vec<f64>,
}

impl MaskedBatch {
    pub fn len(&self) -> usize {
        self.valid_lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid_lengths.is_empty()
    }

    pub fn n_blocks(&self) -> usize {
        self.width / self.block
    }

    pub fn x0_row(&self, s: usize) -> &[TokenId] {
        &self.x0[s * self.width..(s + 1) * self.width]
    }

    pub fn xt_row(&self, s: usize) -> &[TokenId] {
        &self.xt[s * self.width..(s + 1) * self.width]
    }

    pub fn mask_row(&self, s: usize) -> &[bool] {
        &self.mask_flags[s * self.width..(s + 1) * self.width]
    }

    pub fn t_at(&self, s: usize, pos: usize) -> f64 {
        self.t_values[s * self.n_blocks() + pos / self.block]
    }

    /// Masked positions in row-major order.
    pub fn masked_positions(&self) -> Vec<(usize, usize)> {
        (0..self.len())
            .flat_map(|s| {
                self.mask_row(s)
                    .iter()
                    .enumerate()
                    .filter(|(_, &m)| m)
                    .map(move |(i, _)| (s, i))
            })
            .collect()
    }

    /// Weight multiplying `-log p` at a masked position in the loss:
    /// `w_s / (N · t_i · |x0_s|)`.
    pub fn loss_coefficient(&self, s: usize, pos: usize) -> f64 {
        self.sample_weights[s]
            / (self.len() as f64 * self.t_at(s, pos) * self.valid_lengths[s] as f64)
    }
}

/// Pads, corrupts and packs documents into a [`MaskedBatch`].
///
/// `width` defaults to the longest document rounded up to a multiple of
/// `block`. Each sample draws its noise level(s) then its mask pattern from
/// `rng`, in sample order.
pub fn make_training_batch(
    docs: &[&[TokenId]],
    weights: Option<&[f64]>,
    block: usize,
    width: Option<usize>,
    noise: &NoiseConfig,
    vocab: &Vocabulary,
    rng: &mut Rng,
) -> Result<MaskedBatch> {
    if block == 0 {
        return Err(Error::Config("block size must be positive".into()));
    }
    if !(noise.t_min > 0.0 && noise.t_min < 1.0) {
        return Err(Error::Config(format!("t_min {} outside (0, 1)", noise.t_min)));
    }
    let longest = docs.iter().map(|d| d.len()).max().unwrap_or(0);
    let width = match width {
        Some(w) if w % block != 0 => {
            return Err(Error::Config(format!("block size {block} does not divide width {w}")))
        }
        Some(w) if w < longest => {
            return Err(Error::Config(format!("width {w} shorter than document of {longest}")))
        }
        Some(w) => w,
        None => longest.div_ceil(block).max(1) * block,
    };
    if let Some(w) = weights {
        if w.len() != docs.len() || w.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
            return Err(Error::Config("sample weights must be positive, one per document".into()));
        }
    }
    let n_blocks = width / block;
    let mut batch = MaskedBatch {
        width,
        block,
        mode: noise.mode,
        x0: Vec::with_capacity(docs.len() * width),
        xt: Vec::with_capacity(docs.len() * width),
        mask_flags: Vec::with_capacity(docs.len() * width),
        t_values: Vec::with_capacity(docs.len() * n_blocks),
        valid_lengths: Vec::with_capacity(docs.len()),
        sample_weights: weights.map_or_else(|| vec![1.0; docs.len()], <[f64]>::to_vec),
    };
    let draw = |rng: &mut Rng| noise.fixed_t.unwrap_or_else(|| sample_time(rng, noise.t_min));
    for doc in docs {
        if doc.iter().any(|&t| t == vocab.mask || t == vocab.pad) {
            return Err(Error::Data("document contains MASK or PAD".into()));
        }
        let mut row: Vec<TokenId> = doc.to_vec();
        row.resize(width, vocab.pad);
        let ts: Vec<f64> = match noise.mode {
            NoiseMode::GlobalT => vec![draw(rng); n_blocks],
            NoiseMode::PerBlockT => (0..n_blocks).map(|_| draw(rng)).collect(),
        };
        let mut xt = row.clone();
        let mut flags = vec![false; width];
        for b in 0..n_blocks {
            let lo = b * block;
            let hi = ((b + 1) * block).min(doc.len());
            if lo >= hi {
                continue;
            }
            let (x, f) = corrupt(&row[lo..hi], ts[b], vocab.mask, rng)?;
            xt[lo..hi].copy_from_slice(&x);
            flags[lo..hi].copy_from_slice(&f);
        }
        batch.x0.extend(row);
        batch.xt.extend(xt);
        batch.mask_flags.extend(flags);
        batch.t_values.extend(ts);
        batch.valid_lengths.push(doc.len());
    }
    Ok(batch)
}

/// ELBO loss from the log-probabilities of the clean tokens at every masked
/// position, given in [`MaskedBatch::masked_positions`] order.
pub fn elbo_loss(log_probs_at_masked: &[f64], batch: &MaskedBatch) -> Result<f64> {
    let positions = batch.masked_positions();
    if positions.len() != log_probs_at_masked.len() {
        return Err(Error::Contract(format!(
            "{} log-probs for {} masked positions",
            log_probs_at_masked.len(),
            positions.len()
        )));
    }
    let mut loss = 0.0;
    for (&(s, i), &lp) in positions.iter().zip(log_probs_at_masked) {
        if !lp.is_finite() {
            return Err(Error::Numeric(format!("non-finite log-prob {lp} at sample {s}, position {i}")));
        }
        loss -= batch.loss_coefficient(s, i) * lp;
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocabulary, VocabConfig};
    use crate::seed;

    fn vocab() -> Vocabulary {
        build_vocabulary(&VocabConfig::default()).unwrap()
    }

    #[test]
    fn full_corruption_masks_everything() {
        let x0: Vec<TokenId> = (10..30).collect();
        let (xt, f) = corrupt(&x0, 1.0, 0, &mut seed::rng(1)).unwrap();
        assert!(xt.iter().all(|&t| t == 0));
        assert!(f.iter().all(|&m| m));
    }

    #[test]
    fn corrupt_rejects_bad_levels() {
        for t in [0.0, -0.5, 1.01, f64::NAN] {
            assert!(matches!(corrupt(&[1, 2], t, 0, &mut seed::rng(0)), Err(Error::Domain(_))));
        }
    }

    #[test]
    fn corruption_marginal() {
        let x0 = vec![7 as TokenId; 100_000];
        for t in [0.1, 0.5, 0.9] {
            let (xt, f) = corrupt(&x0, t, 0, &mut seed::rng(42)).unwrap();
            let frac = f.iter().filter(|&&m| m).count() as f64 / 1e5;
            assert!((frac - t).abs() < 0.01, "t={t}: {frac}");
            for (a, (&b, &m)) in x0.iter().zip(xt.iter().zip(&f)) {
                assert_eq!(m, b == 0);
                if !m {
                    assert_eq!(*a, b);
                }
            }
        }
    }

    #[test]
    fn tiny_noise_level_rarely_masks() {
        let x0: Vec<TokenId> = vec![5; 10];
        let mut rng = seed::rng(3);
        let mut total = 0usize;
        for _ in 0..10_000 {
            total += corrupt(&x0, 1e-3, 0, &mut rng).unwrap().1.iter().filter(|&&m| m).count();
        }
        let mean = total as f64 / 10_000.0;
        // Expected 0.01 per sequence; 3 sd of the mean is about 0.003.
        assert!((mean - 0.01).abs() < 0.003, "{mean}");
    }

    #[test]
    fn time_sampler_support_and_mean() {
        let mut rng = seed::rng(9);
        let draws: Vec<f64> = (0..100_000).map(|_| sample_time(&mut rng, 1e-3)).collect();
        assert!(draws.iter().all(|&t| t > 1e-3 && t <= 1.0));
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!((mean - 0.5005).abs() < 0.005, "{mean}");
        let mut a = seed::rng(5);
        let mut b = seed::rng(5);
        for _ in 0..100 {
            assert_eq!(sample_time(&mut a, 1e-3).to_bits(), sample_time(&mut b, 1e-3).to_bits());
        }
    }

    fn docs(v: &Vocabulary, n: usize, len: usize) -> Vec<Vec<TokenId>> {
        (0..n)
            .map(|i| {
                let mut d: Vec<TokenId> = (0..len - 1).map(|j| v.words()[(i + j) % 26]).collect();
                d.push(v.eos);
                d
            })
            .collect()
    }

    #[test]
    fn per_block_levels_are_independent() {
        let v = vocab();
        let d = docs(&v, 1, 32);
        let refs: Vec<&[TokenId]> = d.iter().map(Vec::as_slice).collect();
        let b = make_training_batch(&refs, None, 16, None, &NoiseConfig::default(), &v, &mut seed::rng(2)).unwrap();
        assert_eq!(b.n_blocks(), 2);
        assert_ne!(b.t_values[0], b.t_values[1]);
    }

    #[test]
    fn global_full_noise_masks_all_valid_tokens_only() {
        let v = vocab();
        let mut d = docs(&v, 3, 20);
        d[1].truncate(7);
        let refs: Vec<&[TokenId]> = d.iter().map(Vec::as_slice).collect();
        let noise = NoiseConfig {
            mode: NoiseMode::GlobalT,
            fixed_t: Some(1.0),
            ..Default::default()
        };
        let b = make_training_batch(&refs, None, 16, None, &noise, &v, &mut seed::rng(2)).unwrap();
        assert_eq!(b.width, 32);
        for s in 0..3 {
            for i in 0..32 {
                let valid = i < b.valid_lengths[s];
                assert_eq!(b.mask_row(s)[i], valid);
                assert_eq!(b.xt_row(s)[i], if valid { v.mask } else { v.pad });
            }
        }
    }

    #[test]
    fn width_must_be_block_multiple() {
        let v = vocab();
        let d = docs(&v, 1, 10);
        let refs: Vec<&[TokenId]> = d.iter().map(Vec::as_slice).collect();
        let r = make_training_batch(&refs, None, 16, Some(40), &NoiseConfig::default(), &v, &mut seed::rng(0));
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn per_block_rates_track_their_own_level() {
        let v = vocab();
        let d = docs(&v, 10_000, 32);
        let refs: Vec<&[TokenId]> = d.iter().map(Vec::as_slice).collect();
        let b = make_training_batch(&refs, None, 16, None, &NoiseConfig::default(), &v, &mut seed::rng(11)).unwrap();
        // Stratify blocks by their level and compare the masked fraction.
        let mut bins = vec![(0.0f64, 0usize, 0usize); 10];
        for s in 0..b.len() {
            for blk in 0..2 {
                let t = b.t_values[s * 2 + blk];
                let masked = b.mask_row(s)[blk * 16..(blk + 1) * 16].iter().filter(|&&m| m).count();
                let bin = ((t * 10.0) as usize).min(9);
                bins[bin].0 += t * 16.0;
                bins[bin].1 += masked;
                bins[bin].2 += 16;
            }
        }
        for (expected, masked, total) in bins {
            let diff = (masked as f64 - expected) / total as f64;
            assert!(diff.abs() < 0.02, "{diff}");
        }
    }

    fn full_batch(v: &Vocabulary, weights: Option<&[f64]>) -> MaskedBatch {
        let d = docs(v, 2, 12);
        let refs: Vec<&[TokenId]> = d.iter().map(Vec::as_slice).collect();
        let noise = NoiseConfig {
            mode: NoiseMode::GlobalT,
            fixed_t: Some(1.0),
            ..Default::default()
        };
        make_training_batch(&refs, weights, 4, None, &noise, v, &mut seed::rng(0)).unwrap()
    }

    #[test]
    fn uniform_predictor_gives_log_vocab() {
        let v = vocab();
        let b = full_batch(&v, None);
        let lp = vec![-(51f64).ln(); b.masked_positions().len()];
        let loss = elbo_loss(&lp, &b).unwrap();
        assert!((loss - 51f64.ln()).abs() < 1e-12, "{loss}");
        assert!((loss - 3.9318).abs() < 1e-4);
    }

    #[test]
    fn perfect_predictor_has_zero_loss() {
        let v = vocab();
        let b = full_batch(&v, None);
        let lp = vec![0.0; b.masked_positions().len()];
        assert_eq!(elbo_loss(&lp, &b).unwrap(), 0.0);
    }

    #[test]
    fn sample_weight_is_linear() {
        let v = vocab();
        let base = full_batch(&v, None);
        let heavy = full_batch(&v, Some(&[2.0, 1.0]));
        let pos = base.masked_positions();
        let lp: Vec<f64> = (0..pos.len()).map(|i| -0.1 * (i % 7) as f64 - 0.05).collect();
        let first_only: Vec<f64> = pos.iter().zip(&lp).map(|(p, &x)| if p.0 == 0 { x } else { 0.0 }).collect();
        let l1 = elbo_loss(&lp, &base).unwrap();
        let l2 = elbo_loss(&lp, &heavy).unwrap();
        let s0 = elbo_loss(&first_only, &base).unwrap();
        assert_eq!(l2, l1 + s0);
    }

    #[test]
    fn non_finite_log_prob_is_reported() {
        let v = vocab();
        let b = full_batch(&v, None);
        let mut lp = vec![-1.0; b.masked_positions().len()];
        lp[3] = f64::NEG_INFINITY;
        assert!(matches!(elbo_loss(&lp, &b), Err(Error::Numeric(_))));
        lp[3] = f64::NAN;
        assert!(matches!(elbo_loss(&lp, &b), Err(Error::Numeric(_))));
    }

    #[test]
    fn loss_ignores_order_and_grows_when_hardened() {
        let v = vocab();
        let b = full_batch(&v, None);
        let n = b.masked_positions().len();
        let lp: Vec<f64> = (0..n).map(|i| -0.3 - 0.01 * i as f64).collect();
        let base = elbo_loss(&lp, &b).unwrap();
        // Swapping two positions of the same sample (same coefficient) is a no-op.
        let mut swapped = lp.clone();
        swapped.swap(0, 5);
        assert!((elbo_loss(&swapped, &b).unwrap() - base).abs() < 1e-12);
        for i in 0..n {
            let mut h = lp.clone();
            h[i] -= 0.5;
            assert!(elbo_loss(&h, &b).unwrap() > base);
        }
    }
}
