//! Dense row-major kernels shared by the eager ops and the graph.
//!
//! All kernels are generic over [`Element`] so the same code runs in 32-bit
//! for training and in 64-bit for gradient checks.

use super::Element;

/// Dot product with eight independent partial sums so the loop vectorizes.
#[inline]
pub fn dot<S: Element>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [S::zero(); 8];
    let chunks_a = a.chunks_exact(8);
    let chunks_b = b.chunks_exact(8);
    let rem_a = chunks_a.remainder();
    let rem_b = chunks_b.remainder();
    for (ca, cb) in chunks_a.zip(chunks_b) {
        for j in 0..8 {
            acc[j] = acc[j] + ca[j] * cb[j];
        }
    }
    let mut tail = S::zero();
    for (x, y) in rem_a.iter().zip(rem_b) {
        tail = tail + *x * *y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// `out += alpha * x`
#[inline]
pub fn axpy<S: Element>(alpha: S, x: &[S], out: &mut [S]) {
    debug_assert_eq!(x.len(), out.len());
    for (o, v) in out.iter_mut().zip(x) {
        *o = *o + alpha * *v;
    }
}

/// `out[m×n] = a[m×k] · b[k×n]`
pub fn matmul<S: Element>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    matmul_acc(a, b, m, k, n, &mut out);
    out
}

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn matmul_acc<S: Element>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip != S::zero() {
                axpy(aip, &b[p * n..(p + 1) * n], row);
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn matmul_nt_acc<S: Element>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = out[i * n + j] + dot(ar, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out[m×n] += a[k×m]ᵀ · b[k×n]`
pub fn matmul_tn_acc<S: Element>(a: &[S], b: &[S], k: usize, m: usize, n: usize, out: &mut [S]) {
    for p in 0..k {
        let br = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api != S::zero() {
                axpy(api, br, &mut out[i * n..(i + 1) * n]);
            }
        }
    }
}

/// Numerically stabilized softmax of one row with an optional additive mask.
/// Returns `false` when every entry is masked.
pub fn softmax_row<S: Element>(row: &[S], mask: Option<&[S]>, out: &mut [S]) -> bool {
    let mut max = S::neg_infinity();
    for (j, &x) in row.iter().enumerate() {
        let v = x + mask.map_or(S::zero(), |m| m[j]);
        if v > max {
            max = v;
        }
    }
    if max == S::neg_infinity() {
        return false;
    }
    let mut sum = 0.0f64;
    for (j, &x) in row.iter().enumerate() {
        let v = x + mask.map_or(S::zero(), |m| m[j]);
        let e = if v == S::neg_infinity() {
            S::zero()
        } else {
            (v - max).exp()
        };
        out[j] = e;
        sum += e.as_f64();
    }
    let inv = S::from_f64(1.0 / sum);
    for o in out.iter_mut() {
        *o = *o * inv;
    }
    true
}

/// `SiLU(x) = x · σ(x)`
#[inline]
pub fn silu<S: Element>(x: S) -> S {
    x / (S::one() + (-x).exp())
}

/// Derivative of SiLU.
#[inline]
pub fn silu_grad<S: Element>(x: S) -> S {
    let s = S::one() / (S::one() + (-x).exp());
    s * (S::one() + x * (S::one() - s))
}

/// Reciprocal root-mean-square of a row, accumulated in 64-bit.
#[inline]
pub fn inv_rms<S: Element>(row: &[S], eps: f64) -> S {
    let ms = row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>() / row.len() as f64;
    S::from_f64(1.0 / (ms + eps).sqrt())
}
