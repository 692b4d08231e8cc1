//! Flat matrix kernels shared by the tape and its backward pass.
//!
//! All loops are written so the innermost dimension walks contiguous memory;
//! with opt-level 3 they autovectorize and are the throughput floor of the
//! whole trainer. Accumulation order is fixed, so results are bit-stable.

use crate::tensor::Element;

/// `out += a @ b` with `a: [m x k]`, `b: [k x n]`, `out: [m x n]`.
pub fn matmul_nn_acc<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize, out: &mut [E]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

pub fn matmul_nn<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::zero(); m * n];
    matmul_nn_acc(a, b, m, k, n, &mut out);
    out
}

/// `out += a @ b^T` with `a: [m x p]`, `b: [q x p]`, `out: [m x q]`.
pub fn matmul_nt_acc<E: Element>(a: &[E], b: &[E], m: usize, p: usize, q: usize, out: &mut [E]) {
    debug_assert_eq!(a.len(), m * p);
    debug_assert_eq!(b.len(), q * p);
    debug_assert_eq!(out.len(), m * q);
    for i in 0..m {
        let arow = &a[i * p..(i + 1) * p];
        let orow = &mut out[i * q..(i + 1) * q];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * p..(j + 1) * p];
            let mut s = E::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                s = s + av * bv;
            }
            *o = *o + s;
        }
    }
}

pub fn matmul_nt<E: Element>(a: &[E], b: &[E], m: usize, p: usize, q: usize) -> Vec<E> {
    let mut out = vec![E::zero(); m * q];
    matmul_nt_acc(a, b, m, p, q, &mut out);
    out
}

/// `out += a^T @ b` with `a: [p x m]`, `b: [p x n]`, `out: [m x n]`.
pub fn matmul_tn_acc<E: Element>(a: &[E], b: &[E], p: usize, m: usize, n: usize, out: &mut [E]) {
    debug_assert_eq!(a.len(), p * m);
    debug_assert_eq!(b.len(), p * n);
    debug_assert_eq!(out.len(), m * n);
    for r in 0..p {
        let arow = &a[r * m..(r + 1) * m];
        let brow = &b[r * n..(r + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

pub fn transpose<E: Element>(a: &[E], rows: usize, cols: usize) -> Vec<E> {
    let mut out = vec![E::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}
