//! Raw numeric kernels on row-major slices.
//!
//! Large products are split across rayon workers by output row. Each output
//! element is still reduced in a fixed order by exactly one worker, so
//! results are bitwise identical whatever the thread count.

use rayon::prelude::*;

use crate::scalar::Scalar;

const PAR_THRESHOLD: usize = 1 << 16;

/// `c[m×n] = a[m×k] · b[k×n]`
pub fn matmul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    let row = |(i, out): (usize, &mut [S])| {
        let ai = &a[i * k..(i + 1) * k];
        for (p, &av) in ai.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let bp = &b[p * n..(p + 1) * n];
            for (o, &bv) in out.iter_mut().zip(bp) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
    c
}

/// `c[m×n] = a[m×k] · b[n×k]ᵀ`
pub fn matmul_nt<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    let row = |(i, out): (usize, &mut [S])| {
        let ai = &a[i * k..(i + 1) * k];
        for (j, o) in out.iter_mut().enumerate() {
            let bj = &b[j * k..(j + 1) * k];
            *o = dot(ai, bj);
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
    c
}

/// `c[k×n] = a[m×k]ᵀ · b[m×n]`
pub fn matmul_tn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); k * n];
    let row = |(p, out): (usize, &mut [S])| {
        for i in 0..m {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let bi = &b[i * n..(i + 1) * n];
            for (o, &bv) in out.iter_mut().zip(bi) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
    c
}

#[inline]
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = S::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Numerically stable softmax of one contiguous row, written into `out`.
pub fn softmax_row<S: Scalar>(row: &[S], out: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// `log Σ exp(v)` over the given values.
pub fn log_sum_exp<S: Scalar>(values: impl Iterator<Item = S> + Clone) -> S {
    let max = values.clone().fold(S::neg_infinity(), S::max);
    if max == S::neg_infinity() {
        return max;
    }
    let sum: S = values.map(|v| (v - max).exp()).sum();
    max + sum.ln()
}
