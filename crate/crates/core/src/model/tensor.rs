//! Dense row-major kernels shared by the forward, backward and cached paths.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type of a model: `f32` for training and decoding,
/// `f64` for gradient checking.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    /// `C = alpha * A·B + beta * C` with explicit strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("representable")
    }

    fn f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

// The slices are bounds-checked against the extents implied by the strides
// before calling into the unchecked kernel.
fn check_extent<T>(s: &[T], rows: usize, cols: usize, rs: isize, cs: isize) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) as isize * rs + (cols - 1) as isize * cs;
    assert!(rs >= 0 && cs >= 0 && (last as usize) < s.len(), "matrix view out of bounds");
}

macro_rules! impl_real {
    ($t:ty, $f:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                check_extent(a, m, k, rsa, csa);
                check_extent(b, k, n, rsb, csb);
                check_extent(c, m, n, rsc, csc);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: extents verified above; the output does not alias inputs
                // because `c` is a unique borrow.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    )
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// `c (m×n) [+]= a (m×k) · b (k×n)`, all contiguous row-major.
pub fn matmul<F: Real>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize, acc: bool) {
    let beta = if acc { F::one() } else { F::zero() };
    F::gemm(m, k, n, F::one(), a, k as isize, 1, b, n as isize, 1, beta, c, n as isize, 1);
}

/// `c (m×n) [+]= a (m×k) · bᵀ` where `b` is stored `n×k`.
pub fn matmul_bt<F: Real>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize, acc: bool) {
    let beta = if acc { F::one() } else { F::zero() };
    F::gemm(m, k, n, F::one(), a, k as isize, 1, b, 1, k as isize, beta, c, n as isize, 1);
}

/// `c (m×n) [+]= aᵀ · b` where `a` is stored `k×m` and `b` is `k×n`.
pub fn matmul_at<F: Real>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize, acc: bool) {
    let beta = if acc { F::one() } else { F::zero() };
    F::gemm(m, k, n, F::one(), a, 1, m as isize, b, n as isize, 1, beta, c, n as isize, 1);
}

pub fn add_bias<F: Real>(x: &mut [F], bias: &[F]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += *b;
        }
    }
}

/// Accumulates column sums of `dy` into `db`.
pub fn bias_grad<F: Real>(dy: &[F], db: &mut [F]) {
    for row in dy.chunks_exact(db.len()) {
        for (g, v) in db.iter_mut().zip(row) {
            *g += *v;
        }
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Layer norm over rows of width `gain.len()`. Writes normalized inputs to
/// `xhat` and per-row reciprocal standard deviations to `rstd`.
pub fn layer_norm<F: Real>(
    x: &[F],
    gain: &[F],
    bias: &[F],
    y: &mut [F],
    xhat: &mut [F],
    rstd: &mut [F],
) {
    let d = gain.len();
    let eps = F::of(LN_EPS);
    let inv_d = F::one() / F::of(d as f64);
    for (r, row) in x.chunks_exact(d).enumerate() {
        let mean = row.iter().copied().sum::<F>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
        let rs = F::one() / (var + eps).sqrt();
        rstd[r] = rs;
        let xh = &mut xhat[r * d..(r + 1) * d];
        let yr = &mut y[r * d..(r + 1) * d];
        for i in 0..d {
            xh[i] = (row[i] - mean) * rs;
            yr[i] = xh[i] * gain[i] + bias[i];
        }
    }
}

/// Backward of [`layer_norm`]; accumulates into `dx`, `dgain`, `dbias`.
pub fn layer_norm_backward<F: Real>(
    dy: &[F],
    xhat: &[F],
    rstd: &[F],
    gain: &[F],
    dx: &mut [F],
    dgain: &mut [F],
    dbias: &mut [F],
) {
    let d = gain.len();
    let inv_d = F::one() / F::of(d as f64);
    for r in 0..rstd.len() {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &xhat[r * d..(r + 1) * d];
        let mut mean_g = F::zero();
        let mut mean_gx = F::zero();
        for i in 0..d {
            let g = dyr[i] * gain[i];
            mean_g += g;
            mean_gx += g * xh[i];
            dgain[i] += dyr[i] * xh[i];
            dbias[i] += dyr[i];
        }
        mean_g = mean_g * inv_d;
        mean_gx = mean_gx * inv_d;
        let dxr = &mut dx[r * d..(r + 1) * d];
        for i in 0..d {
            let g = dyr[i] * gain[i];
            dxr[i] += rstd[r] * (g - mean_g - xh[i] * mean_gx);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<F: Real>(x: F) -> F {
    let c = F::of(GELU_C);
    let a = F::of(GELU_A);
    let half = F::of(0.5);
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<F: Real>(x: F) -> F {
    let c = F::of(GELU_C);
    let a = F::of(GELU_A);
    let half = F::of(0.5);
    let u = c * (x + a * x * x * x);
    let th = u.tanh();
    let du = c * (F::one() + F::of(3.0) * a * x * x);
    half * (F::one() + th) + half * x * (F::one() - th * th) * du
}

/// In-place softmax of `row`; entries with `allowed[j] == false` get zero.
pub fn masked_softmax<F: Real>(row: &mut [F], allowed: impl Fn(usize) -> bool) {
    let mut max = F::neg_infinity();
    for (j, v) in row.iter().enumerate() {
        if allowed(j) && *v > max {
            max = *v;
        }
    }
    let mut z = F::zero();
    for (j, v) in row.iter_mut().enumerate() {
        if allowed(j) {
            *v = (*v - max).exp();
            z += *v;
        } else {
            *v = F::zero();
        }
    }
    let inv = F::one() / z;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Log-softmax of a logit row, computed in f64.
pub fn log_softmax<F: Real>(logits: &[F]) -> Vec<f64> {
    let max = logits.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v.f64() - max).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v.f64() - lse).collect()
}
