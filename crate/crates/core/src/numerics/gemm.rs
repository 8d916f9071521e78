//! Strided single-precision GEMM, backed by `matrixmultiply`.
//!
//! Strides let callers multiply by a transposed operand without copying.

/// A strided matrix view: `(data, row_stride, col_stride)`.
pub(crate) type View<'a> = (&'a [f32], isize, isize);
pub(crate) type ViewMut<'a> = (&'a mut [f32], isize, isize);

fn max_offset(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    assert!(rs >= 0 && cs >= 0, "negative strides are not supported");
    (rows.saturating_sub(1)) * rs as usize + (cols.saturating_sub(1)) * cs as usize
}

/// `c = a · b` (or `c += a · b` when `accumulate`), with `a` m×k and `b` k×n.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: View<'_>,
    b: View<'_>,
    c: ViewMut<'_>,
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    let (ad, rsa, csa) = a;
    let (bd, rsb, csb) = b;
    let (cd, rsc, csc) = c;
    if k == 0 {
        if !accumulate {
            cd.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    assert!(max_offset(m, k, rsa, csa) < ad.len());
    assert!(max_offset(k, n, rsb, csb) < bd.len());
    assert!(max_offset(m, n, rsc, csc) < cd.len());
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every element the kernel touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            ad.as_ptr(),
            rsa,
            csa,
            bd.as_ptr(),
            rsb,
            csb,
            beta,
            cd.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f32], b: &[f32]) -> Vec<f32> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matches_naive_loops_including_transposed_views() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f32> = (0..m * k).map(|i| (i as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i as f32 * 0.11).cos()).collect();
        let expect = naive(m, k, n, &a, &b);

        let mut c = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            (&a, k as isize, 1),
            (&b, n as isize, 1),
            (&mut c, n as isize, 1),
            false,
        );
        for (x, y) in c.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-5);
        }

        // bᵀ stored as n×k, read back through swapped strides
        let mut bt = vec![0.0; k * n];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c2 = vec![1.0; m * n];
        gemm(
            m,
            k,
            n,
            (&a, k as isize, 1),
            (&bt, 1, k as isize),
            (&mut c2, n as isize, 1),
            true,
        );
        for (x, y) in c2.iter().zip(&expect) {
            assert!((x - (y + 1.0)).abs() < 1e-5);
        }
    }
}
