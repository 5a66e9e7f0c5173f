//! Dense matrix kernels shared by every contraction in the crate.
//!
//! Each output element is accumulated in a fixed order that does not depend
//! on the thread count, so results are bit-identical with or without the
//! row-parallel path (enabled by `FLOWDET_THREADS` > 1).

use once_cell::sync::Lazy;
use rayon::prelude::*;

use super::Scalar;

const PAR_MIN_WORK: usize = 1 << 18;

static POOL: Lazy<Option<rayon::ThreadPool>> = Lazy::new(|| {
    let threads = std::env::var("FLOWDET_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(1);
    if threads <= 1 {
        return None;
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .ok()
});

/// Number of kernel threads in use.
pub fn kernel_threads() -> usize {
    POOL.as_ref().map_or(1, |p| p.current_num_threads())
}

fn for_each_row<T: Scalar>(c: &mut [T], n: usize, work: usize, f: impl Fn(usize, &mut [T]) + Sync) {
    if n == 0 {
        return;
    }
    match POOL.as_ref() {
        Some(pool) if work >= PAR_MIN_WORK => pool.install(|| {
            c.par_chunks_mut(n).enumerate().for_each(|(i, row)| f(i, row));
        }),
        _ => c.chunks_mut(n).enumerate().for_each(|(i, row)| f(i, row)),
    }
}

/// `c[m,n] (+)= a[m,k] * b[k,n]`.
pub fn matmul_nn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize, accumulate: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for_each_row(c, n, m * n * k, |i, row| {
        if !accumulate {
            row.iter_mut().for_each(|v| *v = T::zero());
        }
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    });
}

/// `c[m,n] (+)= a[m,k] * b[n,k]^T`.
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize, accumulate: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for_each_row(c, n, m * n * k, |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, cv) in row.iter_mut().enumerate() {
            let d = dot(arow, &b[j * k..(j + 1) * k]);
            if accumulate {
                *cv += d;
            } else {
                *cv = d;
            }
        }
    });
}

/// `c[m,n] (+)= a[k,m]^T * b[k,n]`.
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize, accumulate: bool) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for_each_row(c, n, m * n * k, |i, row| {
        if !accumulate {
            row.iter_mut().for_each(|v| *v = T::zero());
        }
        for p in 0..k {
            let api = a[p * m + i];
            if api == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(brow) {
                *cv += api * bv;
            }
        }
    });
}

/// Eight-lane dot product; the lane split is fixed so the result is
/// reproducible.
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (ac, bc) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += ac[l] * bc[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}
