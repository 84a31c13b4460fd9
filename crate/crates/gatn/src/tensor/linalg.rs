//! Flat-slice matrix helpers used by the tape operations.

use super::Elem;

/// C = A (m x k) * B (k x n), row-major. ikj loop order keeps the inner
/// loop contiguous in both B and C.
pub fn matmul<T: Elem>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// C = A^T (k x m transposed to m-major) * B, with A given as k x m.
pub fn matmul_at<T: Elem>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![T::zero(); m * n];
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == T::zero() {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// C = A * B^T, with B given as n x k.
pub fn matmul_bt<T: Elem>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            c[i * n + j] = a_row.iter().zip(b_row).map(|(&x, &y)| x * y).sum();
        }
    }
    c
}

/// Unfold image patches into columns: output is (C*KH*KW) x (B*OH*OW).
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Elem>(
    input: &[T],
    batch: usize,
    ch: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let cols_n = batch * oh * ow;
    let rows = ch * kh * kw;
    let mut cols = vec![T::zero(); rows * cols_n];
    for c in 0..ch {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let out_row = &mut cols[row * cols_n..(row + 1) * cols_n];
                for b in 0..batch {
                    let img = &input[(b * ch + c) * h * w..(b * ch + c + 1) * h * w];
                    for oi in 0..oh {
                        let ii = (oi * stride + ki) as isize - pad as isize;
                        let dst = &mut out_row[(b * oh + oi) * ow..(b * oh + oi + 1) * ow];
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        let src_row = &img[ii as usize * w..(ii as usize + 1) * w];
                        for (oj, d) in dst.iter_mut().enumerate() {
                            let jj = (oj * stride + kj) as isize - pad as isize;
                            if jj >= 0 && jj < w as isize {
                                *d = src_row[jj as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add columns back to image layout; adjoint of [`im2col`].
#[allow(clippy::too_many_arguments)]
pub fn col2im<T: Elem>(
    cols: &[T],
    batch: usize,
    ch: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let cols_n = batch * oh * ow;
    let mut img = vec![T::zero(); batch * ch * h * w];
    for c in 0..ch {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let src_row = &cols[row * cols_n..(row + 1) * cols_n];
                for b in 0..batch {
                    let dst = &mut img[(b * ch + c) * h * w..(b * ch + c + 1) * h * w];
                    for oi in 0..oh {
                        let ii = (oi * stride + ki) as isize - pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        let src = &src_row[(b * oh + oi) * ow..(b * oh + oi + 1) * ow];
                        for (oj, &v) in src.iter().enumerate() {
                            let jj = (oj * stride + kj) as isize - pad as isize;
                            if jj >= 0 && jj < w as isize {
                                dst[ii as usize * w + jj as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
    img
}
