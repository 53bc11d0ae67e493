//! Full-sequence forward pass with stored activations, its reverse-mode
//! gradient, and the ELBO training loss built on top of them.

use super::mask::{AttentionMaskSpec, AttentionMode};
use super::params::{idx, Parameters};
use super::tensor::{
    add_bias, bias_grad, gelu, gelu_grad, layer_norm, layer_norm_backward, log_softmax,
    masked_softmax, matmul, matmul_at, matmul_bt, Real,
};
use crate::corpus::TokenId;
use crate::diffusion::MaskedBatch;
use crate::error::{Error, Result};
use crate::renderer::VisualTokens;

/// What the denoiser is conditioned on: the task tag and the visual patches.
/// Together they form the fully visible prefix `[tag, cell_0, cell_1, ...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    pub tag: TokenId,
    pub visual: VisualTokens,
}

impl Conditioning {
    pub fn prefix_len(&self) -> usize {
        1 + self.visual.len()
    }
}

pub(crate) fn check_inputs<F: Real>(
    params: &Parameters<F>,
    cond: &Conditioning,
    text_end: usize,
    tokens: &[TokenId],
) -> Result<()> {
    let c = &params.config;
    if cond.visual.len() > 0 && cond.visual.dim != c.visual_dim {
        return Err(Error::Domain(format!(
            "visual dim {} does not match model {}",
            cond.visual.dim, c.visual_dim
        )));
    }
    if cond.visual.len() > c.max_visual_len {
        return Err(Error::Domain(format!(
            "{} visual cells exceed model maximum {}",
            cond.visual.len(),
            c.max_visual_len
        )));
    }
    if text_end > c.max_text_len {
        return Err(Error::Domain(format!(
            "text length {text_end} exceeds model maximum {}",
            c.max_text_len
        )));
    }
    let v = c.vocab_size as TokenId;
    if cond.tag >= v || tokens.iter().any(|&t| t >= v) {
        return Err(Error::Domain("token id outside vocabulary".into()));
    }
    Ok(())
}

/// Embeds the conditioning prefix into `x` (`prefix_len × d`).
pub(crate) fn embed_prefix<F: Real>(params: &Parameters<F>, cond: &Conditioning, x: &mut [F]) {
    let d = params.config.d_model;
    let tag = cond.tag as usize;
    x[..d].copy_from_slice(&params.t(idx::TOK_EMB)[tag * d..(tag + 1) * d]);
    let n = cond.visual.len();
    if n == 0 {
        return;
    }
    let vdim = cond.visual.dim;
    let vis: Vec<F> = cond.visual.data.iter().map(|&v| F::of(v as f64)).collect();
    let rows = &mut x[d..(1 + n) * d];
    matmul(&vis, params.t(idx::VIS_PROJ), rows, n, vdim, d, false);
    add_bias(rows, params.t(idx::VIS_BIAS));
    let pos = params.t(idx::VIS_POS);
    for (r, row) in rows.chunks_exact_mut(d).enumerate() {
        for (a, b) in row.iter_mut().zip(&pos[r * d..(r + 1) * d]) {
            *a += *b;
        }
    }
}

/// Embeds text tokens at absolute text positions `start..`.
pub(crate) fn embed_text<F: Real>(
    params: &Parameters<F>,
    tokens: &[TokenId],
    start: usize,
    x: &mut [F],
) {
    let d = params.config.d_model;
    let emb = params.t(idx::TOK_EMB);
    let pos = params.t(idx::TEXT_POS);
    for (i, &t) in tokens.iter().enumerate() {
        let t = t as usize;
        let p = start + i;
        let row = &mut x[i * d..(i + 1) * d];
        for j in 0..d {
            row[j] = emb[t * d + j] + pos[p * d + j];
        }
    }
}

struct LayerActs<F> {
    ln1: Vec<F>,
    ln1_xhat: Vec<F>,
    ln1_rstd: Vec<F>,
    qkv: Vec<F>,
    att: Vec<F>,
    att_out: Vec<F>,
    ln2: Vec<F>,
    ln2_xhat: Vec<F>,
    ln2_rstd: Vec<F>,
    h: Vec<F>,
    g: Vec<F>,
}

/// Activations of one forward pass, kept for the backward pass.
pub(crate) struct Trace<F> {
    spec: AttentionMaskSpec,
    layers: Vec<LayerActs<F>>,
    lnf: Vec<F>,
    lnf_xhat: Vec<F>,
    lnf_rstd: Vec<F>,
    /// `text_len × vocab` logits.
    pub logits: Vec<F>,
}

pub(crate) fn forward_trace<F: Real>(
    params: &Parameters<F>,
    cond: &Conditioning,
    text: &[TokenId],
    mode: AttentionMode,
) -> Result<Trace<F>> {
    check_inputs(params, cond, text.len(), text)?;
    let c = &params.config;
    let (d, nh, hd, ff, nv) = (c.d_model, c.n_heads, c.head_dim(), c.d_ff, c.vocab_size);
    let p = cond.prefix_len();
    let t = text.len();
    let s = p + t;
    let spec = AttentionMaskSpec {
        mode,
        prefix_len: p,
        text_len: t,
    };
    let mut x = vec![F::zero(); s * d];
    embed_prefix(params, cond, &mut x[..p * d]);
    embed_text(params, text, 0, &mut x[p * d..]);

    let scale = F::one() / F::of(hd as f64).sqrt();
    let d3 = 3 * d;
    let mut layers = Vec::with_capacity(c.n_layers);
    for l in 0..c.n_layers {
        let mut a = LayerActs {
            ln1: vec![F::zero(); s * d],
            ln1_xhat: vec![F::zero(); s * d],
            ln1_rstd: vec![F::zero(); s],
            qkv: vec![F::zero(); s * d3],
            att: vec![F::zero(); nh * s * s],
            att_out: vec![F::zero(); s * d],
            ln2: vec![F::zero(); s * d],
            ln2_xhat: vec![F::zero(); s * d],
            ln2_rstd: vec![F::zero(); s],
            h: vec![F::zero(); s * ff],
            g: vec![F::zero(); s * ff],
        };
        layer_norm(
            &x,
            params.lt(l, idx::LN1_G),
            params.lt(l, idx::LN1_B),
            &mut a.ln1,
            &mut a.ln1_xhat,
            &mut a.ln1_rstd,
        );
        matmul(&a.ln1, params.lt(l, idx::W_QKV), &mut a.qkv, s, d, d3, false);
        add_bias(&mut a.qkv, params.lt(l, idx::B_QKV));
        for h in 0..nh {
            let sc = &mut a.att[h * s * s..(h + 1) * s * s];
            F::gemm(
                s, hd, s, scale,
                &a.qkv[h * hd..], d3 as isize, 1,
                &a.qkv[d + h * hd..], 1, d3 as isize,
                F::zero(), sc, s as isize, 1,
            );
            for i in 0..s {
                masked_softmax(&mut sc[i * s..(i + 1) * s], |j| spec.allows(i, j));
            }
            F::gemm(
                s, s, hd, F::one(),
                sc, s as isize, 1,
                &a.qkv[2 * d + h * hd..], d3 as isize, 1,
                F::zero(), &mut a.att_out[h * hd..], d as isize, 1,
            );
        }
        let mut y = vec![F::zero(); s * d];
        matmul(&a.att_out, params.lt(l, idx::W_O), &mut y, s, d, d, false);
        add_bias(&mut y, params.lt(l, idx::B_O));
        for (xi, yi) in x.iter_mut().zip(&y) {
            *xi += *yi;
        }
        layer_norm(
            &x,
            params.lt(l, idx::LN2_G),
            params.lt(l, idx::LN2_B),
            &mut a.ln2,
            &mut a.ln2_xhat,
            &mut a.ln2_rstd,
        );
        matmul(&a.ln2, params.lt(l, idx::W_1), &mut a.h, s, d, ff, false);
        add_bias(&mut a.h, params.lt(l, idx::B_1));
        for (gi, hi) in a.g.iter_mut().zip(&a.h) {
            *gi = gelu(*hi);
        }
        matmul(&a.g, params.lt(l, idx::W_2), &mut y, s, ff, d, false);
        add_bias(&mut y, params.lt(l, idx::B_2));
        for (xi, yi) in x.iter_mut().zip(&y) {
            *xi += *yi;
        }
        layers.push(a);
    }
    let mut lnf = vec![F::zero(); t * d];
    let mut lnf_xhat = vec![F::zero(); t * d];
    let mut lnf_rstd = vec![F::zero(); t];
    layer_norm(
        &x[p * d..],
        params.t(idx::LNF_G),
        params.t(idx::LNF_B),
        &mut lnf,
        &mut lnf_xhat,
        &mut lnf_rstd,
    );
    let mut logits = vec![F::zero(); t * nv];
    matmul(&lnf, params.t(idx::OUT_W), &mut logits, t, d, nv, false);
    add_bias(&mut logits, params.t(idx::OUT_B));
    Ok(Trace {
        spec,
        layers,
        lnf,
        lnf_xhat,
        lnf_rstd,
        logits,
    })
}

/// Accumulates into `grads` the gradient of `Σ dlogits·logits`.
pub(crate) fn backward<F: Real>(
    params: &Parameters<F>,
    cond: &Conditioning,
    text: &[TokenId],
    trace: &Trace<F>,
    dlogits: &[F],
    grads: &mut Parameters<F>,
) {
    let c = &params.config;
    let (d, nh, hd, ff, nv) = (c.d_model, c.n_heads, c.head_dim(), c.d_ff, c.vocab_size);
    let p = trace.spec.prefix_len;
    let t = trace.spec.text_len;
    let s = p + t;
    let d3 = 3 * d;
    let scale = F::one() / F::of(hd as f64).sqrt();

    matmul_at(&trace.lnf, dlogits, grads.t_mut(idx::OUT_W), d, t, nv, true);
    bias_grad(dlogits, grads.t_mut(idx::OUT_B));
    let mut dlnf = vec![F::zero(); t * d];
    matmul_bt(dlogits, params.t(idx::OUT_W), &mut dlnf, t, nv, d, false);
    let mut dx = vec![F::zero(); s * d];
    {
        let (dg, rest) = grads.tensors.split_at_mut(idx::LNF_B);
        layer_norm_backward(
            &dlnf,
            &trace.lnf_xhat,
            &trace.lnf_rstd,
            params.t(idx::LNF_G),
            &mut dx[p * d..],
            &mut dg[idx::LNF_G].data,
            &mut rest[0].data,
        );
    }

    let mut dh = vec![F::zero(); s * ff];
    let mut dln = vec![F::zero(); s * d];
    let mut dqkv = vec![F::zero(); s * d3];
    let mut datt_out = vec![F::zero(); s * d];
    let mut da = vec![F::zero(); s * s];
    for l in (0..c.n_layers).rev() {
        let a = &trace.layers[l];
        let g = |which| idx::layer(l, which);
        // Feed-forward block; `dx` is the gradient w.r.t. the block output.
        matmul_at(&a.g, &dx, grads.t_mut(g(idx::W_2)), ff, s, d, true);
        bias_grad(&dx, grads.t_mut(g(idx::B_2)));
        matmul_bt(&dx, params.lt(l, idx::W_2), &mut dh, s, d, ff, false);
        for (dv, hv) in dh.iter_mut().zip(&a.h) {
            *dv *= gelu_grad(*hv);
        }
        matmul_at(&a.ln2, &dh, grads.t_mut(g(idx::W_1)), d, s, ff, true);
        bias_grad(&dh, grads.t_mut(g(idx::B_1)));
        matmul_bt(&dh, params.lt(l, idx::W_1), &mut dln, s, ff, d, false);
        {
            let (lo, hi) = grads.tensors.split_at_mut(g(idx::LN2_B));
            layer_norm_backward(
                &dln,
                &a.ln2_xhat,
                &a.ln2_rstd,
                params.lt(l, idx::LN2_G),
                &mut dx,
                &mut lo[g(idx::LN2_G)].data,
                &mut hi[0].data,
            );
        }
        // Attention block.
        matmul_at(&a.att_out, &dx, grads.t_mut(g(idx::W_O)), d, s, d, true);
        bias_grad(&dx, grads.t_mut(g(idx::B_O)));
        matmul_bt(&dx, params.lt(l, idx::W_O), &mut datt_out, s, d, d, false);
        for h in 0..nh {
            let att = &a.att[h * s * s..(h + 1) * s * s];
            // dV = Aᵀ dO
            F::gemm(
                s, s, hd, F::one(),
                att, 1, s as isize,
                &datt_out[h * hd..], d as isize, 1,
                F::zero(), &mut dqkv[2 * d + h * hd..], d3 as isize, 1,
            );
            // dA = dO Vᵀ
            F::gemm(
                s, hd, s, F::one(),
                &datt_out[h * hd..], d as isize, 1,
                &a.qkv[2 * d + h * hd..], 1, d3 as isize,
                F::zero(), &mut da, s as isize, 1,
            );
            for i in 0..s {
                let ar = &att[i * s..(i + 1) * s];
                let dr = &mut da[i * s..(i + 1) * s];
                let dot: F = ar.iter().zip(dr.iter()).map(|(x, y)| *x * *y).sum();
                for j in 0..s {
                    dr[j] = ar[j] * (dr[j] - dot) * scale;
                }
            }
            // dQ = dS K, dK = dSᵀ Q
            F::gemm(
                s, s, hd, F::one(),
                &da, s as isize, 1,
                &a.qkv[d + h * hd..], d3 as isize, 1,
                F::zero(), &mut dqkv[h * hd..], d3 as isize, 1,
            );
            F::gemm(
                s, s, hd, F::one(),
                &da, 1, s as isize,
                &a.qkv[h * hd..], d3 as isize, 1,
                F::zero(), &mut dqkv[d + h * hd..], d3 as isize, 1,
            );
        }
        matmul_at(&a.ln1, &dqkv, grads.t_mut(g(idx::W_QKV)), d, s, d3, true);
        bias_grad(&dqkv, grads.t_mut(g(idx::B_QKV)));
        matmul_bt(&dqkv, params.lt(l, idx::W_QKV), &mut dln, s, d3, d, false);
        {
            let (lo, hi) = grads.tensors.split_at_mut(g(idx::LN1_B));
            layer_norm_backward(
                &dln,
                &a.ln1_xhat,
                &a.ln1_rstd,
                params.lt(l, idx::LN1_G),
                &mut dx,
                &mut lo[g(idx::LN1_G)].data,
                &mut hi[0].data,
            );
        }
    }

    // Embeddings.
    let tag = cond.tag as usize;
    {
        let e = grads.t_mut(idx::TOK_EMB);
        for j in 0..d {
            e[tag * d + j] += dx[j];
        }
        for (i, &tok) in text.iter().enumerate() {
            let tok = tok as usize;
            for j in 0..d {
                e[tok * d + j] += dx[(p + i) * d + j];
            }
        }
    }
    {
        let tp = grads.t_mut(idx::TEXT_POS);
        for i in 0..t {
            for j in 0..d {
                tp[i * d + j] += dx[(p + i) * d + j];
            }
        }
    }
    let nvis = cond.visual.len();
    if nvis > 0 {
        let dvis = &dx[d..(1 + nvis) * d];
        let vis: Vec<F> = cond.visual.data.iter().map(|&v| F::of(v as f64)).collect();
        matmul_at(&vis, dvis, grads.t_mut(idx::VIS_PROJ), cond.visual.dim, nvis, d, true);
        bias_grad(dvis, grads.t_mut(idx::VIS_BIAS));
        let vp = grads.t_mut(idx::VIS_POS);
        for (a, b) in vp[..nvis * d].iter_mut().zip(dvis) {
            *a += *b;
        }
    }
}

/// Uncached forward: logits (`text.len() × vocab`) for every text position.
pub fn forward<F: Real>(
    params: &Parameters<F>,
    cond: &Conditioning,
    text: &[TokenId],
    mode: AttentionMode,
) -> Result<Vec<F>> {
    Ok(forward_trace(params, cond, text, mode)?.logits)
}

/// Loss, gradients and masked-token accuracy of one batch.
#[derive(Debug, Clone)]
pub struct LossGrad<F> {
    pub loss: f64,
    pub grads: Parameters<F>,
    pub masked: usize,
    pub correct: usize,
}

impl<F> LossGrad<F> {
    pub fn masked_accuracy(&self) -> f64 {
        if self.masked == 0 {
            0.0
        } else {
            self.correct as f64 / self.masked as f64
        }
    }
}

fn check_batch(conds: &[Conditioning], batch: &MaskedBatch) -> Result<()> {
    if conds.len() != batch.len() {
        return Err(Error::Contract(format!(
            "{} conditionings for a batch of {}",
            conds.len(),
            batch.len()
        )));
    }
    Ok(())
}

/// Per-sample slice of work: the effective text canvas and its masked rows.
fn sample_rows(batch: &MaskedBatch, s: usize, mode: AttentionMode) -> (usize, Vec<usize>) {
    let len = mode.effective_len(batch.valid_lengths[s], batch.width);
    let rows = batch.mask_row(s)[..len]
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(i, _)| i)
        .collect();
    (len, rows)
}

/// ELBO loss and its gradient. Each sample runs on the shortest text canvas
/// that leaves its masked positions' context unchanged.
pub fn loss_and_grad<F: Real>(
    params: &Parameters<F>,
    conds: &[Conditioning],
    batch: &MaskedBatch,
    mode: AttentionMode,
) -> Result<LossGrad<F>> {
    check_batch(conds, batch)?;
    let nv = params.config.vocab_size;
    let mut grads = params.zeros_like();
    let (mut loss, mut masked, mut correct) = (0.0, 0, 0);
    for (s, cond) in conds.iter().enumerate() {
        let (len, rows) = sample_rows(batch, s, mode);
        if rows.is_empty() {
            continue;
        }
        let text = &batch.xt_row(s)[..len];
        let trace = forward_trace(params, cond, text, mode)?;
        let mut dlogits = vec![F::zero(); len * nv];
        let x0 = batch.x0_row(s);
        for &i in &rows {
            let coef = batch.loss_coefficient(s, i);
            let row = &trace.logits[i * nv..(i + 1) * nv];
            let lp = log_softmax(row);
            let target = x0[i] as usize;
            loss -= coef * lp[target];
            let argmax = (0..nv).fold(0, |b, j| if lp[j] > lp[b] { j } else { b });
            correct += usize::from(argmax == target);
            masked += 1;
            let dr = &mut dlogits[i * nv..(i + 1) * nv];
            for j in 0..nv {
                let onehot = if j == target { 1.0 } else { 0.0 };
                dr[j] = F::of(coef * (lp[j].exp() - onehot));
            }
        }
        backward(params, cond, text, &trace, &dlogits, &mut grads);
    }
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {loss}")));
    }
    Ok(LossGrad {
        loss,
        grads,
        masked,
        correct,
    })
}

/// Forward-only ELBO loss; matches the `loss` of [`loss_and_grad`].
pub fn loss_only<F: Real>(
    params: &Parameters<F>,
    conds: &[Conditioning],
    batch: &MaskedBatch,
    mode: AttentionMode,
) -> Result<f64> {
    check_batch(conds, batch)?;
    let nv = params.config.vocab_size;
    let mut loss = 0.0;
    for (s, cond) in conds.iter().enumerate() {
        let (len, rows) = sample_rows(batch, s, mode);
        if rows.is_empty() {
            continue;
        }
        let logits = forward(params, cond, &batch.xt_row(s)[..len], mode)?;
        for &i in &rows {
            let lp = log_softmax(&logits[i * nv..(i + 1) * nv]);
            loss -= batch.loss_coefficient(s, i) * lp[batch.x0_row(s)[i] as usize];
        }
    }
    Ok(loss)
}

/// Log-probabilities of the clean token at every masked position, in
/// [`MaskedBatch::masked_positions`] order.
pub fn masked_log_probs<F: Real>(
    params: &Parameters<F>,
    conds: &[Conditioning],
    batch: &MaskedBatch,
    mode: AttentionMode,
) -> Result<Vec<f64>> {
    check_batch(conds, batch)?;
    let nv = params.config.vocab_size;
    let mut out = Vec::new();
    for (s, cond) in conds.iter().enumerate() {
        let flags = batch.mask_row(s);
        if !flags.iter().any(|&m| m) {
            continue;
        }
        let logits = forward(params, cond, batch.xt_row(s), mode)?;
        for (i, _) in flags.iter().enumerate().filter(|(_, &m)| m) {
            let lp = log_softmax(&logits[i * nv..(i + 1) * nv]);
            out.push(lp[batch.x0_row(s)[i] as usize]);
        }
    }
    Ok(out)
}
