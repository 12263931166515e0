//! Raw forward kernels shared by the tape ops. All loops are row-major with
//! a fixed summation order.

use super::Real;

/// `out[m, n] = a[m, k] @ b[k, n]`.
pub(super) fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for l in 0..k {
            let a_il = a[i * k + l];
            if a_il == T::zero() {
                continue;
            }
            let b_row = &b[l * n..(l + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + a_il * bv;
            }
        }
    }
    out
}

/// `out[m, n] = a[m, k] @ b[n, k]^T`.
pub(super) fn matmul_nt<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc = acc + av * bv;
            }
            out[i * n + j] = acc;
        }
    }
    out
}

pub(super) fn transpose<T: Real>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

/// Row-stabilized softmax over each row of an `[n, d]` matrix.
pub(super) fn softmax_rows<T: Real>(x: &[T], n: usize, d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * d];
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for (o, &v) in out[i * d..(i + 1) * d].iter_mut().zip(row) {
            let e = (v - max).exp();
            *o = e;
            sum = sum + e;
        }
        for o in &mut out[i * d..(i + 1) * d] {
            *o = *o / sum;
        }
    }
    out
}

/// Per-row mean/variance normalization (no affine). Returns the normalized
/// rows together with the per-row `1/sqrt(var + eps)` needed by the adjoint.
pub(super) fn layer_norm_rows<T: Real>(x: &[T], n: usize, d: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let mut out = vec![T::zero(); n * d];
    let mut inv_std = vec![T::zero(); n];
    let dn = T::from_usize(d);
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let inv = (var + eps).sqrt().recip();
        inv_std[i] = inv;
        for (o, &v) in out[i * d..(i + 1) * d].iter_mut().zip(row) {
            *o = (v - mean) * inv;
        }
    }
    (out, inv_std)
}

/// Tanh-form GELU and its derivative.
pub(super) fn gelu<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    let c = T::from_f64(0.7978845608028654); // sqrt(2/pi)
    let a = T::from_f64(0.044715);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub(super) fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    let c = T::from_f64(0.7978845608028654);
    let a = T::from_f64(0.044715);
    let three = T::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + three * a * x * x)
}

pub(super) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
