//! Incremental inference with a per-layer key/value cache.
//!
//! The cache always holds the conditioning prefix followed by the finalized
//! text positions `0..text_len`. [`KvCache::extend`] runs a window of new
//! text positions against the cache and appends the first `commit` of them.

use super::forward::{check_inputs, embed_prefix, embed_text, Conditioning};
use super::mask::AttentionMode;
use super::params::{idx, Parameters};
use super::tensor::{add_bias, gelu, layer_norm, masked_softmax, matmul, Real};
use crate::corpus::TokenId;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct KvCache<F> {
    keys: Vec<Vec<F>>,
    values: Vec<Vec<F>>,
    prefix_len: usize,
    text_len: usize,
    d: usize,
}

impl<F: Real> KvCache<F> {
    /// Encodes the conditioning prefix once.
    pub fn prefill(params: &Parameters<F>, cond: &Conditioning) -> Result<Self> {
        check_inputs(params, cond, 0, &[])?;
        let d = params.config.d_model;
        let p = cond.prefix_len();
        let mut x = vec![F::zero(); p * d];
        embed_prefix(params, cond, &mut x);
        let mut cache = Self {
            keys: vec![Vec::new(); params.config.n_layers],
            values: vec![Vec::new(); params.config.n_layers],
            prefix_len: 0,
            text_len: 0,
            d,
        };
        // Prefix rows see exactly the prefix, so running them as a window
        // over an empty cache with full attention reproduces the prefix.
        cache.run(params, x, p, p, |_, _| true);
        cache.prefix_len = p;
        Ok(cache)
    }

    pub fn prefix_len(&self) -> usize {
        self.prefix_len
    }

    /// Number of finalized text positions.
    pub fn text_len(&self) -> usize {
        self.text_len
    }

    /// Runs `tokens` at text positions `text_len..` and returns their logits
    /// (`tokens.len() × vocab`). Afterwards the first `commit` positions are
    /// finalized: their keys and values stay in the cache.
    pub fn extend(
        &mut self,
        params: &Parameters<F>,
        tokens: &[TokenId],
        commit: usize,
        mode: AttentionMode,
    ) -> Result<Vec<F>> {
        if commit > tokens.len() {
            return Err(Error::Contract(format!(
                "cannot commit {commit} of {} tokens",
                tokens.len()
            )));
        }
        let start = self.text_len;
        let end = start + tokens.len();
        let c = &params.config;
        if end > c.max_text_len {
            return Err(Error::Domain(format!(
                "text length {end} exceeds model maximum {}",
                c.max_text_len
            )));
        }
        if tokens.iter().any(|&t| t as usize >= c.vocab_size) {
            return Err(Error::Domain("token id outside vocabulary".into()));
        }
        let d = self.d;
        let n = tokens.len();
        let mut x = vec![F::zero(); n * d];
        embed_text(params, tokens, start, &mut x);
        let x = self.run(params, x, n, commit, |i, j| mode.allows(start + i, start + j));
        self.text_len += commit;

        let nv = c.vocab_size;
        let mut y = vec![F::zero(); n * d];
        let mut xhat = vec![F::zero(); n * d];
        let mut rstd = vec![F::zero(); n];
        layer_norm(&x, params.t(idx::LNF_G), params.t(idx::LNF_B), &mut y, &mut xhat, &mut rstd);
        let mut logits = vec![F::zero(); n * nv];
        matmul(&y, params.t(idx::OUT_W), &mut logits, n, d, nv, false);
        add_bias(&mut logits, params.t(idx::OUT_B));
        Ok(logits)
    }

    /// Passes `n` new rows through every layer. Each row sees the whole cache
    /// and the new rows admitted by `allowed`. Appends the first `keep` rows'
    /// keys and values once all layers are done.
    fn run(
        &mut self,
        params: &Parameters<F>,
        mut x: Vec<F>,
        n: usize,
        keep: usize,
        allowed: impl Fn(usize, usize) -> bool,
    ) -> Vec<F> {
        let c = &params.config;
        let (d, nh, hd, ff) = (c.d_model, c.n_heads, c.head_dim(), c.d_ff);
        let d3 = 3 * d;
        let m = self.prefix_len + self.text_len;
        let total = m + n;
        let scale = F::one() / F::of(hd as f64).sqrt();
        let mut ln = vec![F::zero(); n * d];
        let mut xhat = vec![F::zero(); n * d];
        let mut rstd = vec![F::zero(); n];
        let mut qkv = vec![F::zero(); n * d3];
        let mut scores = vec![F::zero(); n * total];
        let mut att_out = vec![F::zero(); n * d];
        let mut y = vec![F::zero(); n * d];
        let mut h = vec![F::zero(); n * ff];
        let mut new_kv = Vec::with_capacity(c.n_layers);
        for l in 0..c.n_layers {
            layer_norm(&x, params.lt(l, idx::LN1_G), params.lt(l, idx::LN1_B), &mut ln, &mut xhat, &mut rstd);
            matmul(&ln, params.lt(l, idx::W_QKV), &mut qkv, n, d, d3, false);
            add_bias(&mut qkv, params.lt(l, idx::B_QKV));
            let mut k = self.keys[l].clone();
            let mut v = self.values[l].clone();
            for r in 0..n {
                k.extend_from_slice(&qkv[r * d3 + d..r * d3 + 2 * d]);
                v.extend_from_slice(&qkv[r * d3 + 2 * d..r * d3 + 3 * d]);
            }
            for hh in 0..nh {
                F::gemm(
                    n, hd, total, scale,
                    &qkv[hh * hd..], d3 as isize, 1,
                    &k[hh * hd..], 1, d as isize,
                    F::zero(), &mut scores, total as isize, 1,
                );
                for i in 0..n {
                    masked_softmax(&mut scores[i * total..(i + 1) * total], |j| {
                        j < m || allowed(i, j - m)
                    });
                }
                F::gemm(
                    n, total, hd, F::one(),
                    &scores, total as isize, 1,
                    &v[hh * hd..], d as isize, 1,
                    F::zero(), &mut att_out[hh * hd..], d as isize, 1,
                );
            }
            matmul(&att_out, params.lt(l, idx::W_O), &mut y, n, d, d, false);
            add_bias(&mut y, params.lt(l, idx::B_O));
            for (a, b) in x.iter_mut().zip(&y) {
                *a += *b;
            }
            layer_norm(&x, params.lt(l, idx::LN2_G), params.lt(l, idx::LN2_B), &mut ln, &mut xhat, &mut rstd);
            matmul(&ln, params.lt(l, idx::W_1), &mut h, n, d, ff, false);
            add_bias(&mut h, params.lt(l, idx::B_1));
            h.iter_mut().for_each(|v| *v = gelu(*v));
            matmul(&h, params.lt(l, idx::W_2), &mut y, n, ff, d, false);
            add_bias(&mut y, params.lt(l, idx::B_2));
            for (a, b) in x.iter_mut().zip(&y) {
                *a += *b;
            }
            new_kv.push((k, v));
        }
        for (l, (mut k, mut v)) in new_kv.into_iter().enumerate() {
            k.truncate((m + keep) * d);
            v.truncate((m + keep) * d);
            self.keys[l] = k;
            self.values[l] = v;
        }
        x
    }
}
