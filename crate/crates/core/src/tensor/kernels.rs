use rayon::prelude::*;

use super::{is_deterministic, Scalar};

// Below this many multiply-adds a matmul stays on the calling thread.
const PAR_THRESHOLD: usize = 1 << 16;

const MR: usize = 4;
const NR: usize = 8;
// Output rows handed to one rayon task.
const ROW_BLOCK: usize = 16;
// Below this many elements an elementwise map stays on the calling thread.
const PAR_ELEMS: usize = 1 << 14;

/// `out[m,n] += a[m,k] · b[k,n]`, all row-major.
///
/// Every output element is summed over `p` in ascending order into a fresh
/// accumulator and then added to `out`, whatever the tiling or thread count.
pub(crate) fn gemm<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if n == 0 || m == 0 {
        return;
    }
    let block = |(bi, out_blk): (usize, &mut [T])| {
        let r0 = bi * ROW_BLOCK;
        let rows = out_blk.len() / n;
        let mut r = 0;
        while r < rows {
            let mr = MR.min(rows - r);
            let a_rows = &a[(r0 + r) * k..(r0 + r + mr) * k];
            let out_rows = &mut out_blk[r * n..(r + mr) * n];
            if mr == MR {
                tile_rows::<T, MR>(k, n, a_rows, b, out_rows);
            } else {
                for i in 0..mr {
                    tile_rows::<T, 1>(k, n, &a_rows[i * k..(i + 1) * k], b, &mut out_rows[i * n..(i + 1) * n]);
                }
            }
            r += mr;
        }
    };
    if is_deterministic() || m * k * n < PAR_THRESHOLD || m <= ROW_BLOCK {
        out.chunks_mut(ROW_BLOCK * n).enumerate().for_each(block);
    } else {
        out.par_chunks_mut(ROW_BLOCK * n).enumerate().for_each(block);
    }
}

/// `R` rows of `a` against all of `b`, `NR` output columns at a time.
#[inline(always)]
fn tile_rows<T: Scalar, const R: usize>(k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    let mut j = 0;
    while j + NR <= n {
        let mut acc = [[T::zero(); NR]; R];
        for p in 0..k {
            let bp: &[T; NR] = b[p * n + j..p * n + j + NR].try_into().expect("NR");
            for (r, acc_r) in acc.iter_mut().enumerate() {
                let av = a[r * k + p];
                for c in 0..NR {
                    acc_r[c] += av * bp[c];
                }
            }
        }
        for (r, acc_r) in acc.iter().enumerate() {
            for c in 0..NR {
                out[r * n + j + c] += acc_r[c];
            }
        }
        j += NR;
    }
    for c in j..n {
        for r in 0..R {
            let mut acc = T::zero();
            for p in 0..k {
                acc += a[r * k + p] * b[p * n + c];
            }
            out[r * n + c] += acc;
        }
    }
}

/// `f` applied elementwise.
pub(crate) fn map<T: Scalar>(x: &[T], f: impl Fn(T) -> T + Sync) -> Vec<T> {
    if is_deterministic() || x.len() < PAR_ELEMS {
        x.iter().map(|&v| f(v)).collect()
    } else {
        x.par_iter().with_min_len(PAR_ELEMS / 4).map(|&v| f(v)).collect()
    }
}

/// `out[i] += f(a[i], b[i])`.
pub(crate) fn zip_acc<T: Scalar>(out: &mut [T], a: &[T], b: &[T], f: impl Fn(T, T) -> T + Sync) {
    if is_deterministic() || out.len() < PAR_ELEMS {
        for ((o, &x), &y) in out.iter_mut().zip(a).zip(b) {
            *o += f(x, y);
        }
    } else {
        out.par_iter_mut()
            .zip(a.par_iter())
            .zip(b.par_iter())
            .with_min_len(PAR_ELEMS / 4)
            .for_each(|((o, &x), &y)| *o += f(x, y));
    }
}

pub(crate) fn transpose<T: Scalar>(rows: usize, cols: usize, x: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub(crate) fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

/// In-place softmax; entries that are `-inf` come out exactly zero.
pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        row.iter_mut().for_each(|v| *v = T::zero());
        return;
    }
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
