//! Slice-level numeric kernels shared by the tape ops.
//!
//! Every output row is produced by exactly one thread with a fixed
//! accumulation order, so results do not depend on the thread count.

use rayon::prelude::*;

use crate::Float;

/// Work (in MACs) below which kernels stay on the calling thread.
const PAR_THRESHOLD: usize = 1 << 16;

/// `c[m×n] = a[m×k] · b[k×n]`.
pub fn matmul<F: Float>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::zero(); m * n];
    let row = |(i, out): (usize, &mut [F])| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in out.iter_mut().zip(brow) {
                *o = *o + aip * bv;
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

/// `c[m×n] = a[m×k] · b[n×k]ᵀ`.
pub fn matmul_nt<F: Float>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::zero(); m * n];
    let row = |(i, out): (usize, &mut [F])| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, o) in out.iter_mut().enumerate() {
            *o = dot(arow, &b[j * k..(j + 1) * k]);
        }
    };
    if m * k * n >= PAR_THRESHOLD {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
    c
}

/// `c[m×n] = a[k×m]ᵀ · b[k×n]`.
pub fn matmul_tn<F: Float>(a: &[F], b: &[F], k: usize, m: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::zero(); m * n];
    let row = |(i, out): (usize, &mut [F])| {
        for p in 0..k {
            let api = a[p * m + i];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in out.iter_mut().zip(brow) {
                *o = *o + api * bv;
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
pub fn dot<F: Float>(a: &[F], b: &[F]) -> F {
    a.iter()
        .zip(b)
        .fold(F::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Stable softmax over `row` in place (row-max subtraction).
pub fn softmax_in_place<F: Float>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

const GELU_C: f64 = 0.044_715;

/// Tanh-approximated GELU.
#[inline]
pub fn gelu<F: Float>(x: F) -> F {
    let k = F::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let c = F::from_f64(GELU_C);
    let half = F::from_f64(0.5);
    half * x * (F::one() + (k * (x + c * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<F: Float>(x: F) -> F {
    let k = F::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let c = F::from_f64(GELU_C);
    let half = F::from_f64(0.5);
    let three = F::from_f64(3.0);
    let t = (k * (x + c * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * k * (F::one() + three * c * x * x)
}
