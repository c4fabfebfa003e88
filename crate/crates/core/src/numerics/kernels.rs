//! Hot inner-loop kernels with parallel and sequential variants.
//!
//! The parallel variants split work over disjoint output rows, so every
//! output element sees the exact same sequence of f32 operations as the
//! sequential variant: results are bit-identical, threaded or not. Both
//! variants are always compiled; the `parallel` feature only changes which
//! one the dispatching wrappers pick. Benchmarks compare them directly.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// `out = a @ b` where a is m×k, b is k×n, all row-major.
///
/// ikj loop order: the inner loop is an axpy over a contiguous row of `b`,
/// which the compiler vectorizes.
pub fn matmul_seq(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for (i, orow) in out.chunks_exact_mut(n).enumerate() {
        matmul_row(&a[i * k..(i + 1) * k], b, orow, n);
    }
}

#[cfg(feature = "parallel")]
pub fn matmul_par(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.par_chunks_exact_mut(n).enumerate().for_each(|(i, orow)| {
        matmul_row(&a[i * k..(i + 1) * k], b, orow, n);
    });
}

#[inline]
fn matmul_row(arow: &[f32], b: &[f32], orow: &mut [f32], n: usize) {
    // first k-iteration writes instead of accumulating, saving a
    // zero-fill pass over the output row
    let mut first = true;
    for (kk, &aik) in arow.iter().enumerate() {
        let brow = &b[kk * n..kk * n + n];
        if first {
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = aik * bv;
            }
            first = false;
        } else {
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    if first {
        orow.fill(0.0);
    }
}

/// `out = a @ b^T` where a is m×k, b is n×k. Each output element is a dot
/// product of two contiguous rows.
pub fn matmul_bt_seq(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for (i, orow) in out.chunks_exact_mut(n).enumerate() {
        matmul_bt_row(&a[i * k..(i + 1) * k], b, orow, k);
    }
}

#[cfg(feature = "parallel")]
pub fn matmul_bt_par(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    out.par_chunks_exact_mut(n).enumerate().for_each(|(i, orow)| {
        matmul_bt_row(&a[i * k..(i + 1) * k], b, orow, k);
    });
}

#[inline]
fn matmul_bt_row(arow: &[f32], b: &[f32], orow: &mut [f32], k: usize) {
    // four output columns at a time: reuses the `a` row across four dot
    // products and breaks the single-accumulator dependency chain
    let mut j = 0;
    let n = orow.len();
    while j + 4 <= n {
        let b0 = &b[j * k..j * k + k];
        let b1 = &b[(j + 1) * k..(j + 1) * k + k];
        let b2 = &b[(j + 2) * k..(j + 2) * k + k];
        let b3 = &b[(j + 3) * k..(j + 3) * k + k];
        let (mut s0, mut s1, mut s2, mut s3) = (0.0f32, 0.0f32, 0.0f32, 0.0f32);
        for (i, &av) in arow.iter().enumerate() {
            s0 += av * b0[i];
            s1 += av * b1[i];
            s2 += av * b2[i];
            s3 += av * b3[i];
        }
        orow[j] = s0;
        orow[j + 1] = s1;
        orow[j + 2] = s2;
        orow[j + 3] = s3;
        j += 4;
    }
    while j < n {
        let brow = &b[j * k..j * k + k];
        let mut acc = 0.0f32;
        for (&av, &bv) in arow.iter().zip(brow) {
            acc += av * bv;
        }
        orow[j] = acc;
        j += 1;
    }
}

/// `out = a^T @ b` where a is m×k, b is m×n, out is k×n.
///
/// Used by matmul backward (`dB = A^T @ dC`) without materializing the
/// transpose. Parallel variant splits over output rows (the k axis); each
/// output row still scans the m axis in order, so accumulation order is
/// unchanged.
pub fn matmul_at_b_seq(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for (kk, orow) in out.chunks_exact_mut(n).enumerate() {
        matmul_at_b_row(a, b, orow, kk, m, k, n);
    }
}

#[cfg(feature = "parallel")]
pub fn matmul_at_b_par(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    out.par_chunks_exact_mut(n).enumerate().for_each(|(kk, orow)| {
        matmul_at_b_row(a, b, orow, kk, m, k, n);
    });
}

#[inline]
fn matmul_at_b_row(a: &[f32], b: &[f32], orow: &mut [f32], kk: usize, m: usize, k: usize, n: usize) {
    orow.fill(0.0);
    for i in 0..m {
        let aik = a[i * k + kk];
        let brow = &b[i * n..i * n + n];
        for (o, &bv) in orow.iter_mut().zip(brow) {
            *o += aik * bv;
        }
    }
}

/// Below this many multiply-adds the thread-pool handoff costs more than
/// it buys (measured: 64x64x192 runs ~2x faster sequentially on 2 cores).
/// Thresholding is safe because both paths are bit-identical.
const PAR_MIN_MULS: usize = 1 << 21;

/// Dispatching wrappers: parallel when the feature is on and the problem
/// is large enough, sequential otherwise. The two paths agree bit-for-bit.
pub fn matmul(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    #[cfg(feature = "parallel")]
    if m * k * n >= PAR_MIN_MULS {
        return matmul_par(a, b, out, m, k, n);
    }
    matmul_seq(a, b, out, m, k, n);
}

pub fn matmul_bt(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    #[cfg(feature = "parallel")]
    if m * k * n >= PAR_MIN_MULS {
        return matmul_bt_par(a, b, out, m, k, n);
    }
    matmul_bt_seq(a, b, out, m, k, n);
}

pub fn matmul_at_b(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    #[cfg(feature = "parallel")]
    if m * k * n >= PAR_MIN_MULS {
        return matmul_at_b_par(a, b, out, m, k, n);
    }
    matmul_at_b_seq(a, b, out, m, k, n);
}
