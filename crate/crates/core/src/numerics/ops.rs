//! Dense kernels and their backward passes.
//!
//! Every reduction runs in a fixed order so repeated calls are bit-identical.
//! The slice kernels (`gemm_*`) are what the encoder uses on its hot path;
//! the `Tensor` wrappers check shapes first.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let chunks = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for c in 0..chunks {
        let i = c * 4;
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..n {
        tail += a[i] * b[i];
    }
    (s0 + s1) + (s2 + s3) + tail
}

#[inline]
pub(crate) fn axpy_slice(out: &mut [f64], s: f64, x: &[f64]) {
    debug_assert_eq!(out.len(), x.len());
    for (o, v) in out.iter_mut().zip(x) {
        *o += s * v;
    }
}

/// Strided view of a row-major operand: element `(i, p)` lives at
/// `data[i * rs + p * cs]`.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub rs: usize,
    pub cs: usize,
}

impl<'a> View<'a> {
    pub fn rows(data: &'a [f64], ld: usize) -> Self {
        Self { data, rs: ld, cs: 1 }
    }

    /// The transpose of a row-major matrix with leading dimension `ld`.
    pub fn transposed(data: &'a [f64], ld: usize) -> Self {
        Self { data, rs: 1, cs: ld }
    }

    #[inline(always)]
    fn at(&self, i: usize, p: usize) -> f64 {
        self.data[i * self.rs + p * self.cs]
    }
}

const MR: usize = 4;
const NR: usize = 8;

/// `out (m×n) (+)= A (m×k) · B (k×n)`, `B` rows `ldb` apart and `out` rows
/// `ldo` apart.
///
/// Every output element is accumulated over `p = 0..k` in order, starting
/// from its previous value when `acc` is set, so results do not depend on
/// the register blocking.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    a: View<'_>,
    b: &[f64],
    ldb: usize,
    m: usize,
    k: usize,
    n: usize,
    out: &mut [f64],
    ldo: usize,
    acc: bool,
) {
    let mut i0 = 0;
    while i0 < m {
        let rows = MR.min(m - i0);
        let mut j0 = 0;
        while j0 < n {
            let cols = NR.min(n - j0);
            if rows == MR && cols == NR {
                let mut c = [[0.0f64; NR]; MR];
                if acc {
                    for (r, cr) in c.iter_mut().enumerate() {
                        cr.copy_from_slice(&out[(i0 + r) * ldo + j0..(i0 + r) * ldo + j0 + NR]);
                    }
                }
                // Bounds for the whole block are checked once up front.
                assert!((i0 + MR - 1) * a.rs + (k.max(1) - 1) * a.cs < a.data.len() || k == 0);
                assert!(k == 0 || (k - 1) * ldb + j0 + NR <= b.len());
                for p in 0..k {
                    // SAFETY: covered by the asserts above.
                    let (bp, av) = unsafe {
                        let bp = &*(b.as_ptr().add(p * ldb + j0) as *const [f64; NR]);
                        let base = i0 * a.rs + p * a.cs;
                        let av: [f64; MR] = std::array::from_fn(|r| *a.data.get_unchecked(base + r * a.rs));
                        (bp, av)
                    };
                    for (cr, av) in c.iter_mut().zip(av) {
                        for (cv, bv) in cr.iter_mut().zip(bp) {
                            *cv += av * bv;
                        }
                    }
                }
                for (r, cr) in c.iter().enumerate() {
                    out[(i0 + r) * ldo + j0..(i0 + r) * ldo + j0 + NR].copy_from_slice(cr);
                }
            } else {
                for r in 0..rows {
                    for cidx in 0..cols {
                        let o = &mut out[(i0 + r) * ldo + j0 + cidx];
                        let mut v = if acc { *o } else { 0.0 };
                        for p in 0..k {
                            v += a.at(i0 + r, p) * b[p * ldb + j0 + cidx];
                        }
                        *o = v;
                    }
                }
            }
            j0 += NR;
        }
        i0 += MR;
    }
}

/// Copies the `rows×cols` block of `src` (rows `ld` apart) transposed into
/// `dst` (`cols×rows`, contiguous).
pub(crate) fn transpose_into(src: &[f64], ld: usize, rows: usize, cols: usize, dst: &mut Vec<f64>) {
    dst.clear();
    dst.resize(rows * cols, 0.0);
    for i in 0..rows {
        for j in 0..cols {
            dst[j * rows + i] = src[i * ld + j];
        }
    }
}

/// `out (m×n) (+)= a (m×k) · b (k×n)`
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64], acc: bool) {
    gemm(View::rows(a, k), b, n, m, k, n, out, n, acc);
}

thread_local! {
    static SCRATCH: std::cell::RefCell<Vec<f64>> = const { std::cell::RefCell::new(Vec::new()) };
}

/// `out (m×n) (+)= a (m×k) · bᵀ` where `b` is `n×k`.
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64], acc: bool) {
    SCRATCH.with(|s| {
        let mut bt = s.borrow_mut();
        transpose_into(b, k, n, k, &mut bt);
        gemm(View::rows(a, k), &bt, n, m, k, n, out, n, acc);
    });
}

/// `out (k×n) (+)= aᵀ · b` where `a` is `m×k` and `b` is `m×n`.
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64], acc: bool) {
    gemm(View::transposed(a, k), b, n, k, m, n, out, n, acc);
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if !t.is_matrix() {
        return Err(Error::shape(op, t.shape(), &[0, 0]));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

/// Standard matrix product `a · b`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_matrix("matmul", a)?;
    let (k2, n) = require_matrix("matmul", b)?;
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = Tensor::zeros(&[m, n]);
    gemm_nn(a.data(), b.data(), m, k, n, out.data_mut(), false);
    Ok(out)
}

/// `a · bᵀ`
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_matrix("matmul_nt", a)?;
    let (n, k2) = require_matrix("matmul_nt", b)?;
    if k != k2 {
        return Err(Error::shape("matmul_nt", a.shape(), b.shape()));
    }
    let mut out = Tensor::zeros(&[m, n]);
    gemm_nt(a.data(), b.data(), m, k, n, out.data_mut(), false);
    Ok(out)
}

/// `aᵀ · b`
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_matrix("matmul_tn", a)?;
    let (m2, n) = require_matrix("matmul_tn", b)?;
    if m != m2 {
        return Err(Error::shape("matmul_tn", a.shape(), b.shape()));
    }
    let mut out = Tensor::zeros(&[k, n]);
    gemm_tn(a.data(), b.data(), m, k, n, out.data_mut(), false);
    Ok(out)
}

/// Matrix-vector product `w · x` for `w` of shape `out×in`.
pub fn matvec(w: &Tensor, x: &[f64]) -> Result<Vec<f64>> {
    let (m, k) = require_matrix("matvec", w)?;
    if k != x.len() {
        return Err(Error::shape("matvec", w.shape(), &[x.len()]));
    }
    Ok((0..m).map(|i| dot(w.row(i), x)).collect())
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Row-wise softmax with max subtraction. Rank-1 input is treated as one row.
pub fn softmax_rows(m: &Tensor) -> Tensor {
    let mut out = m.clone();
    let c = out.cols();
    if c == 0 {
        return out;
    }
    for row in out.data_mut().chunks_mut(c) {
        softmax_in_place(row);
    }
    out
}

/// Given softmax output `p` and upstream gradient `dp`, writes the gradient
/// with respect to the logits into `dp`.
pub(crate) fn softmax_backward_in_place(p: &[f64], dp: &mut [f64]) {
    let s = dot(p, dp);
    for (g, &pv) in dp.iter_mut().zip(p) {
        *g = pv * (*g - s);
    }
}

pub fn softmax_rows_backward(p: &Tensor, dp: &Tensor) -> Result<Tensor> {
    if p.shape() != dp.shape() {
        return Err(Error::shape("softmax_rows_backward", p.shape(), dp.shape()));
    }
    let mut out = dp.clone();
    let c = p.cols();
    if c == 0 {
        return Ok(out);
    }
    for (prow, grow) in p.data().chunks(c).zip(out.data_mut().chunks_mut(c)) {
        softmax_backward_in_place(prow, grow);
    }
    Ok(out)
}

/// `gain ⊙ (x − mean)/√(var + eps) + bias` with population variance.
pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::Input("layer_norm needs at least one element".into()));
    }
    if gain.len() != x.len() || bias.len() != x.len() {
        return Err(Error::shape("layer_norm", &[x.len()], &[gain.len(), bias.len()]));
    }
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    layer_norm_row(x, gain, bias, eps, &mut out, &mut xhat);
    Ok(out)
}

/// Normalizes one row; returns `1/√(var + eps)` and leaves `x̂` in `xhat`.
pub(crate) fn layer_norm_row(
    x: &[f64],
    gain: &[f64],
    bias: &[f64],
    eps: f64,
    out: &mut [f64],
    xhat: &mut [f64],
) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let denom = (var + eps).sqrt();
    let inv_std = if denom > 0.0 { 1.0 / denom } else { 0.0 };
    for i in 0..x.len() {
        xhat[i] = (x[i] - mean) * inv_std;
        out[i] = gain[i] * xhat[i] + bias[i];
    }
    inv_std
}

/// Backward of `layer_norm_row`. Accumulates gain/bias gradients when given
/// and returns the input gradient in `dx`.
pub(crate) fn layer_norm_row_backward(
    dy: &[f64],
    xhat: &[f64],
    inv_std: f64,
    gain: &[f64],
    dx: &mut [f64],
    dgain: Option<&mut [f64]>,
    dbias: Option<&mut [f64]>,
) {
    let n = dy.len() as f64;
    if let Some(dg) = dgain {
        for i in 0..dy.len() {
            dg[i] += dy[i] * xhat[i];
        }
    }
    if let Some(db) = dbias {
        for i in 0..dy.len() {
            db[i] += dy[i];
        }
    }
    let mut mean_d = 0.0;
    let mut mean_dx = 0.0;
    for i in 0..dy.len() {
        let d = dy[i] * gain[i];
        mean_d += d;
        mean_dx += d * xhat[i];
    }
    mean_d /= n;
    mean_dx /= n;
    for i in 0..dy.len() {
        let d = dy[i] * gain[i];
        dx[i] = inv_std * (d - mean_d - xhat[i] * mean_dx);
    }
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

pub fn gelu_grad(x: f64) -> f64 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    normal_cdf(x) + x * pdf
}

pub fn gelu_tensor(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    out.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::finite_diff_grad;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let b = m(&[&[5.0, 6.0], &[7.0, 8.0]]);
        assert_eq!(matmul(&Tensor::identity(2), &b).unwrap(), b);
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&a, &b).unwrap(), m(&[&[19.0, 22.0], &[43.0, 50.0]]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 2]);
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn transposed_products_agree_with_plain_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::randn(&[5, 7], 1.0, &mut rng);
        let b = Tensor::randn(&[6, 7], 1.0, &mut rng);
        let nt = matmul_nt(&a, &b).unwrap();
        let plain = matmul(&a, &b.transpose().unwrap()).unwrap();
        for (x, y) in nt.data().iter().zip(plain.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let c = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let tn = matmul_tn(&a, &c).unwrap();
        let plain = matmul(&a.transpose().unwrap(), &c).unwrap();
        for (x, y) in tn.data().iter().zip(plain.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&Tensor::vector(vec![0.0, 0.0]));
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_rows(&Tensor::vector(vec![2f64.ln(), 0.0]));
        assert!((s.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.data()[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_examples() {
        let y = layer_norm(&[3.0; 4], &[1.0; 4], &[0.0; 4], 1e-5).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
        let y = layer_norm(&[1.0, -1.0], &[1.0; 2], &[0.0; 2], 0.0).unwrap();
        assert_eq!(y, vec![1.0, -1.0]);
        let x = [0.3, -2.0, 5.5, 1.25, 0.0];
        let y = layer_norm(&x, &[1.0; 5], &[0.0; 5], 0.0).unwrap();
        let mean = y.iter().sum::<f64>() / 5.0;
        let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 5.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gelu_examples() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(1.0) - 0.841345).abs() < 1e-6);
        assert!(gelu(-10.0).abs() < 1e-20);
    }

    #[test]
    fn gelu_grad_matches_finite_differences() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.2] {
            let fd = finite_diff_grad(|t: &[f64]| gelu(t[0]), &[x], 1e-5).unwrap()[0];
            assert!((fd - gelu_grad(x)).abs() < 1e-9, "x={x}");
        }
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logits = Tensor::randn(&[1, 6], 1.0, &mut rng);
        let w = Tensor::randn(&[1, 6], 1.0, &mut rng);
        let f = |t: &[f64]| {
            let p = softmax_rows(&Tensor::vector(t.to_vec()));
            dot(p.data(), w.data())
        };
        let fd = finite_diff_grad(f, logits.data(), 1e-5).unwrap();
        let p = softmax_rows(&logits);
        let an = softmax_rows_backward(&p, &w).unwrap();
        for (a, b) in an.data().iter().zip(&fd) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[7], 1.0, &mut rng);
        let g = Tensor::randn(&[7], 1.0, &mut rng);
        let b = Tensor::randn(&[7], 1.0, &mut rng);
        let up = Tensor::randn(&[7], 1.0, &mut rng);
        let eps = 1e-5;
        let fx = |t: &[f64]| dot(&layer_norm(t, g.data(), b.data(), eps).unwrap(), up.data());
        let fd = finite_diff_grad(fx, x.data(), 1e-5).unwrap();
        let mut y = vec![0.0; 7];
        let mut xhat = vec![0.0; 7];
        let inv = layer_norm_row(x.data(), g.data(), b.data(), eps, &mut y, &mut xhat);
        let mut dx = vec![0.0; 7];
        let mut dg = vec![0.0; 7];
        layer_norm_row_backward(up.data(), &xhat, inv, g.data(), &mut dx, Some(&mut dg), None);
        for (a, n) in dx.iter().zip(&fd) {
            assert!((a - n).abs() < 1e-8 * (1.0 + n.abs()));
        }
        let fg = |t: &[f64]| dot(&layer_norm(x.data(), t, b.data(), eps).unwrap(), up.data());
        let fd = finite_diff_grad(fg, g.data(), 1e-5).unwrap();
        for (a, n) in dg.iter().zip(&fd) {
            assert!((a - n).abs() < 1e-8);
        }
    }

    #[test]
    fn kernels_are_bit_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Tensor::randn(&[9, 13], 1.0, &mut rng);
        let b = Tensor::randn(&[13, 4], 1.0, &mut rng);
        let first = matmul(&a, &b).unwrap();
        for _ in 0..3 {
            assert_eq!(matmul(&a, &b).unwrap().data(), first.data());
        }
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one_and_shift_invariant(
            row in proptest::collection::vec(-30.0f64..30.0, 1..12),
            shift in -50.0f64..50.0,
        ) {
            let p = softmax_rows(&Tensor::vector(row.clone()));
            let total: f64 = p.data().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(p.data().iter().all(|&v| v >= 0.0));
            let shifted: Vec<f64> = row.iter().map(|v| v + shift).collect();
            let q = softmax_rows(&Tensor::vector(shifted));
            for (a, b) in p.data().iter().zip(q.data()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
