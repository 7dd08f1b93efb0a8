//! Dense numeric kernels shared by the autograd ops and the frozen-path code.
//!
//! Every reduction is split into fixed-size chunks whose partial results are
//! summed in chunk order, so results never depend on the worker count.

use rayon::prelude::*;

/// Rows per parallel work item for row-partitioned products.
const ROW_CHUNK: usize = 512;
/// Rows per partial sum for reductions over the row axis.
const REDUCE_CHUNK: usize = 4096;

/// Strided matrix operand: element (i, j) lives at `offset + i*rs + j*cs`.
#[derive(Clone, Copy, Debug)]
pub struct View {
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View {
    pub fn dense(cols: usize) -> Self {
        View {
            offset: 0,
            rs: cols,
            cs: 1,
        }
    }

    /// Transposed view of a dense row-major `[rows, cols]` buffer.
    pub fn dense_t(cols: usize) -> Self {
        View {
            offset: 0,
            rs: 1,
            cs: cols,
        }
    }

    pub fn at(self, offset: usize) -> Self {
        View { offset, ..self }
    }

    fn check(&self, len: usize, rows: usize, cols: usize) {
        if rows == 0 || cols == 0 {
            return;
        }
        let last = self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs;
        assert!(last < len, "strided view out of bounds ({last} >= {len})");
    }
}

/// `c = alpha * a·b + beta * c` for strided `a: [m,k]`, `b: [k,n]`, `c: [m,n]`.
#[allow(clippy::too_many_arguments)]
pub fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    av: View,
    b: &[f32],
    bv: View,
    beta: f32,
    c: &mut [f32],
    cv: View,
) {
    if m == 0 || n == 0 {
        return;
    }
    av.check(a.len(), m, k);
    bv.check(b.len(), k, n);
    cv.check(c.len(), m, n);
    // SAFETY: the three views were bounds-checked above and `c` is borrowed mutably.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(av.offset),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.offset),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}

/// Dense `c[m,n] = a·b (+ c if accumulate)`, where `a` is `[m,k]` (or `[k,m]`
/// when `a_t`) and `b` is `[k,n]` (or `[n,k]` when `b_t`). Row blocks of the
/// output are computed in parallel.
#[allow(clippy::too_many_arguments)]
pub fn matmul(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if n == 0 {
        return;
    }
    let av = if a_t { View::dense_t(m) } else { View::dense(k) };
    let bv = if b_t { View::dense_t(k) } else { View::dense(n) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    c.par_chunks_mut(ROW_CHUNK * n)
        .enumerate()
        .for_each(|(ci, chunk)| {
            let r0 = ci * ROW_CHUNK;
            let rows = chunk.len() / n;
            sgemm(
                rows,
                k,
                n,
                1.0,
                a,
                av.at(r0 * av.rs),
                b,
                bv,
                beta,
                chunk,
                View::dense(n),
            );
        });
}

/// `out[p,q] += aᵀ·b` for `a: [rows,p]`, `b: [rows,q]`, reduced over rows.
pub fn matmul_tn_acc(rows: usize, p: usize, q: usize, a: &[f32], b: &[f32], out: &mut [f32]) {
    assert_eq!(a.len(), rows * p);
    assert_eq!(b.len(), rows * q);
    assert_eq!(out.len(), p * q);
    let chunks = rows.div_ceil(REDUCE_CHUNK).max(1);
    let partials: Vec<Vec<f32>> = (0..chunks)
        .into_par_iter()
        .map(|ci| {
            let r0 = ci * REDUCE_CHUNK;
            let r1 = (r0 + REDUCE_CHUNK).min(rows);
            let mut part = vec![0.0f32; p * q];
            sgemm(
                p,
                r1 - r0,
                q,
                1.0,
                a,
                View {
                    offset: r0 * p,
                    rs: 1,
                    cs: p,
                },
                b,
                View {
                    offset: r0 * q,
                    rs: q,
                    cs: 1,
                },
                0.0,
                &mut part,
                View::dense(q),
            );
            part
        })
        .collect();
    for part in partials {
        for (o, v) in out.iter_mut().zip(part) {
            *o += v;
        }
    }
}

/// Column sums of a `[rows, cols]` buffer, accumulated into `out`.
pub fn col_sums_acc(rows: usize, cols: usize, a: &[f32], out: &mut [f32]) {
    debug_assert_eq!(a.len(), rows * cols);
    for r in 0..rows {
        let row = &a[r * cols..(r + 1) * cols];
        for (o, v) in out.iter_mut().zip(row) {
            *o += *v;
        }
    }
}

const FRAC_1_SQRT_2: f32 = std::f32::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f32 = 0.398_942_3;

/// Exact (erf-based) GELU.
#[inline]
pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + libm::erff(x * FRAC_1_SQRT_2))
}

#[inline]
pub fn gelu_grad(x: f32) -> f32 {
    let cdf = 0.5 * (1.0 + libm::erff(x * FRAC_1_SQRT_2));
    let pdf = INV_SQRT_2PI * (-0.5 * x * x).exp();
    cdf + x * pdf
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f32], b: &[f32]) -> Vec<f32> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    c[i * n + j] += a[i * k + l] * b[l * n + j];
                }
            }
        }
        c
    }

    fn transpose(rows: usize, cols: usize, a: &[f32]) -> Vec<f32> {
        let mut t = vec![0.0; a.len()];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = a[i * cols + j];
            }
        }
        t
    }

    #[test]
    fn matmul_matches_naive_all_layouts() {
        let (m, k, n) = (1100, 7, 5);
        let a: Vec<f32> = (0..m * k).map(|i| ((i * 37) % 11) as f32 - 5.0).collect();
        let b: Vec<f32> = (0..k * n).map(|i| ((i * 13) % 7) as f32 - 3.0).collect();
        let want = naive(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (aa, a_t) in [(&a, false), (&at, true)] {
            for (bb, b_t) in [(&b, false), (&bt, true)] {
                let mut c = vec![0.0; m * n];
                matmul(m, k, n, aa, a_t, bb, b_t, &mut c, false);
                assert_eq!(c, want);
            }
        }
    }

    #[test]
    fn tn_reduction_matches_naive() {
        let (rows, p, q) = (9000, 3, 4);
        let a: Vec<f32> = (0..rows * p).map(|i| ((i % 5) as f32) * 0.5).collect();
        let b: Vec<f32> = (0..rows * q).map(|i| ((i % 3) as f32) - 1.0).collect();
        let mut out = vec![0.0; p * q];
        matmul_tn_acc(rows, p, q, &a, &b, &mut out);
        let want = naive(p, rows, q, &transpose(rows, p, &a), &b);
        for (o, w) in out.iter().zip(&want) {
            assert!((o - w).abs() <= 1e-3 * w.abs().max(1.0));
        }
    }

    #[test]
    fn gelu_reference_values() {
        assert!((gelu(2.0) - 1.954_5).abs() < 1e-4);
        assert_eq!(gelu(0.0), 0.0);
        let h = 1e-3;
        for x in [-2.0f32, -0.3, 0.0, 0.7, 3.0] {
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 2e-3);
        }
    }
}
