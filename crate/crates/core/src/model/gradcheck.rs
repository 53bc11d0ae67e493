//! Central finite-difference check of the reverse-mode gradients.

use rand::Rng as _;

use super::forward::{loss_and_grad, loss_only, Conditioning};
use super::mask::AttentionMode;
use super::params::Parameters;
use crate::diffusion::MaskedBatch;
use crate::error::Result;
use crate::seed;

/// Gradients smaller than this are compared absolutely rather than relatively.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(tensor, index, analytic, numeric)` for every checked coordinate.
    pub coords: Vec<(usize, usize, f64, f64)>,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Coordinates drawn by picking a tensor uniformly, then an entry within it,
/// so that small tensors (biases, gains) are exercised as often as large ones.
pub fn sample_coords(params: &Parameters<f64>, n: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut rng = seed::rng(seed);
    (0..n)
        .map(|_| {
            let t = rng.gen_range(0..params.tensors.len());
            (t, rng.gen_range(0..params.tensors[t].data.len()))
        })
        .collect()
}

/// Compares `grads` with central differences of the loss at `coords`.
pub fn compare_gradients(
    params: &Parameters<f64>,
    grads: &Parameters<f64>,
    conds: &[Conditioning],
    batch: &MaskedBatch,
    mode: AttentionMode,
    delta: f64,
    coords: &[(usize, usize)],
) -> Result<GradCheckReport> {
    let mut p = params.clone();
    let mut out = Vec::with_capacity(coords.len());
    let mut max = 0.0f64;
    for &(t, i) in coords {
        let orig = p.tensors[t].data[i];
        p.tensors[t].data[i] = orig + delta;
        let up = loss_only(&p, conds, batch, mode)?;
        p.tensors[t].data[i] = orig - delta;
        let down = loss_only(&p, conds, batch, mode)?;
        p.tensors[t].data[i] = orig;
        let numeric = (up - down) / (2.0 * delta);
        let analytic = grads.tensors[t].data[i];
        max = max.max(relative_error(analytic, numeric));
        out.push((t, i, analytic, numeric));
    }
    Ok(GradCheckReport { max_rel_error: max, coords: out })
}

/// Reverse-mode vs finite differences on `n_coords` random coordinates.
pub fn grad_check(
    params: &Parameters<f64>,
    conds: &[Conditioning],
    batch: &MaskedBatch,
    mode: AttentionMode,
    delta: f64,
    n_coords: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let lg = loss_and_grad(params, conds, batch, mode)?;
    let coords = sample_coords(params, n_coords, seed);
    compare_gradients(params, &lg.grads, conds, batch, mode, delta, &coords)
}
