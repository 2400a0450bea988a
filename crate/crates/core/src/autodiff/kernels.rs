//! Dense matrix product kernels over row-major slices.
//!
//! Every kernel accumulates into `out`. Rows of `out` are independent, so the
//! parallel path splits on output rows and keeps each element's summation
//! order identical to the serial loop.

use rayon::prelude::*;

use crate::exec;

const PAR_THRESHOLD: usize = 1 << 15;
const PAR_ROWS: usize = 64;

/// Strided view of an `m×k` left operand.
#[derive(Clone, Copy)]
struct Lhs<'a> {
    data: &'a [f64],
    row_stride: usize,
    col_stride: usize,
}

/// `out[m×n] += lhs · b`, where `b` is given by its strides over `k×n`.
/// Row blocks of `out` are independent and each element is summed in the
/// same order whatever the blocking, so both paths give the same bits.
#[allow(clippy::too_many_arguments)]
fn gemm(parallel: bool, lhs: Lhs, b: &[f64], b_strides: (usize, usize), m: usize, k: usize, n: usize, out: &mut [f64]) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    assert!(out.len() >= m * n);
    let block = |i0: usize, rows: usize, out: &mut [f64]| {
        let start = i0 * lhs.row_stride;
        // SAFETY: every index touched lies inside the slices, checked by the
        // callers' shape validation and the asserts above and below.
        unsafe {
            matrixmultiply::dgemm(
                rows,
                k,
                n,
                1.0,
                lhs.data.as_ptr().add(start),
                lhs.row_stride as isize,
                lhs.col_stride as isize,
                b.as_ptr(),
                b_strides.0 as isize,
                b_strides.1 as isize,
                1.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    };
    if parallel && m > PAR_ROWS && m * k * n >= PAR_THRESHOLD {
        out[..m * n]
            .par_chunks_mut(PAR_ROWS * n)
            .enumerate()
            .for_each(|(c, chunk)| block(c * PAR_ROWS, chunk.len() / n, chunk));
    } else {
        block(0, m, out);
    }
}

fn check(len: usize, need: usize) {
    assert!(len >= need, "gemm operand too short");
}

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn gemm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    check(a.len(), m * k);
    check(b.len(), k * n);
    let lhs = Lhs { data: a, row_stride: k, col_stride: 1 };
    gemm(exec::parallel(), lhs, b, (n, 1), m, k, n, out);
}

/// `out[m×n] += a[m×k] · bᵀ` where `b` is stored as `n×k`.
pub fn gemm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    check(a.len(), m * k);
    check(b.len(), k * n);
    let lhs = Lhs { data: a, row_stride: k, col_stride: 1 };
    gemm(exec::parallel(), lhs, b, (1, k), m, k, n, out);
}

/// `out[m×n] += aᵀ · b` where `a` is stored as `k×m` and `b` as `k×n`.
pub fn gemm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    check(a.len(), m * k);
    check(b.len(), k * n);
    let lhs = Lhs { data: a, row_stride: 1, col_stride: m };
    gemm(exec::parallel(), lhs, b, (n, 1), m, k, n, out);
}
