//! Register-blocked matrix multiply used by the convolution kernels.
//!
//! Every output element is accumulated in strictly increasing `k` order,
//! starting from zero, and only then added to `c`. Appending zero columns to
//! `a` (with matching zero rows in `b`) therefore leaves results bit-identical,
//! which the image-only/fusion equivalence checks rely on.

use crate::real::Real;

const MR: usize = 4;
const NR: usize = 32;

/// `c[m×n] += a[m×k] · b[k×n]`, all row-major and contiguous.
pub fn gemm<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }

    // A packed per row panel as [p][r] so the kernel reads MR values contiguously.
    let mut panel = vec![T::zero(); MR * k];
    let mut i = 0;
    while i < m {
        let rows = MR.min(m - i);
        for p in 0..k {
            for r in 0..MR {
                panel[p * MR + r] = if r < rows { a[(i + r) * k + p] } else { T::zero() };
            }
        }
        let mut j = 0;
        while j + NR <= n {
            kernel_full(k, n, &panel, b, j, c, i, rows);
            j += NR;
        }
        if j < n {
            kernel_tail(k, n, &panel, b, j, c, i, rows);
        }
        i += MR;
    }
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn kernel_full<T: Real>(
    k: usize,
    n: usize,
    panel: &[T],
    b: &[T],
    j: usize,
    c: &mut [T],
    i: usize,
    rows: usize,
) {
    let mut acc = [[T::zero(); NR]; MR];
    for p in 0..k {
        let brow: &[T; NR] = b[p * n + j..p * n + j + NR].try_into().unwrap();
        let av: &[T; MR] = panel[p * MR..p * MR + MR].try_into().unwrap();
        for r in 0..MR {
            let a = av[r];
            for q in 0..NR {
                acc[r][q] = acc[r][q] + a * brow[q];
            }
        }
    }
    for r in 0..rows {
        let crow = &mut c[(i + r) * n + j..(i + r) * n + j + NR];
        for q in 0..NR {
            crow[q] = crow[q] + acc[r][q];
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn kernel_tail<T: Real>(
    k: usize,
    n: usize,
    panel: &[T],
    b: &[T],
    j: usize,
    c: &mut [T],
    i: usize,
    rows: usize,
) {
    let cols = n - j;
    let mut acc = [[T::zero(); NR]; MR];
    for p in 0..k {
        let brow = &b[p * n + j..p * n + n];
        for r in 0..MR {
            let a = panel[p * MR + r];
            for (q, &bv) in brow.iter().enumerate() {
                acc[r][q] = acc[r][q] + a * bv;
            }
        }
    }
    for r in 0..rows {
        let crow = &mut c[(i + r) * n + j..(i + r) * n + n];
        for q in 0..cols {
            crow[q] = crow[q] + acc[r][q];
        }
    }
}

/// Row-major transpose of an `rows × cols` matrix.
pub fn transpose<T: Real>(rows: usize, cols: usize, src: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    const B: usize = 32;
    for r0 in (0..rows).step_by(B) {
        for c0 in (0..cols).step_by(B) {
            for r in r0..(r0 + B).min(rows) {
                for cc in c0..(c0 + B).min(cols) {
                    out[cc * rows + r] = src[r * cols + cc];
                }
            }
        }
    }
    out
}
