//! Matrix kernels with a rayon path and a sequential fallback.
//!
//! Both paths compute every output element with the same summation order, so
//! results are bit-identical regardless of thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::tensor::Scalar;

/// Below this many multiply-accumulates the sequential kernel wins.
#[cfg(feature = "parallel")]
const PAR_MACS: usize = 1 << 16;

#[inline]
fn gemm_row<T: Scalar>(a_row: &[T], b: &[T], c_row: &mut [T], n: usize) {
    for (p, &av) in a_row.iter().enumerate() {
        if av == T::zero() {
            continue;
        }
        let b_row = &b[p * n..(p + 1) * n];
        for (c, &bv) in c_row.iter_mut().zip(b_row) {
            *c += av * bv;
        }
    }
}

/// `c[m,n] += a[m,k] · b[k,n]`, sequential.
pub fn gemm_seq<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for (i, c_row) in c.chunks_mut(n).enumerate() {
        gemm_row(&a[i * k..(i + 1) * k], b, c_row, n);
    }
}

/// `c[m,n] += a[m,k] · b[k,n]`, rows split across the rayon pool.
#[cfg(feature = "parallel")]
pub fn gemm_par<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(c.len(), m * n);
    c.par_chunks_mut(n)
        .enumerate()
        .for_each(|(i, c_row)| gemm_row(&a[i * k..(i + 1) * k], b, c_row, n));
}

pub fn gemm<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    #[cfg(feature = "parallel")]
    if m * k * n >= PAR_MACS && m > 1 {
        return gemm_par(a, b, c, m, k, n);
    }
    gemm_seq(a, b, c, m, k, n)
}

/// `c[k,n] += a[m,k]ᵀ · g[m,n]`.
pub fn gemm_tn<T: Scalar>(a: &[T], g: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let row = |p: usize, c_row: &mut [T]| {
        for i in 0..m {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            for (c, &gv) in c_row.iter_mut().zip(&g[i * n..(i + 1) * n]) {
                *c += av * gv;
            }
        }
    };
    #[cfg(feature = "parallel")]
    if m * k * n >= PAR_MACS && k > 1 {
        c.par_chunks_mut(n).enumerate().for_each(|(p, r)| row(p, r));
        return;
    }
    c.chunks_mut(n).enumerate().for_each(|(p, r)| row(p, r));
}

/// `c[m,k] += g[m,n] · b[k,n]ᵀ`.
pub fn gemm_nt<T: Scalar>(g: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let bt = transpose(b, k, n);
    gemm(g, &bt, c, m, n, k);
}

pub fn transpose<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}
