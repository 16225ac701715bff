//! Dense f64 matrix kernels behind the graph ops.
//!
//! Row-major layouts, inner loops over contiguous rows so LLVM can
//! vectorize them. These three cover every matmul the graph needs
//! (forward, and both operand gradients).

/// C += A(m,k) * B(k,n).
pub fn mm_nn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for (arow, crow) in a.chunks_exact(k).zip(c.chunks_exact_mut(n)) {
        for (&av, brow) in arow.iter().zip(b.chunks_exact(n)) {
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// C += A(m,k) * B(n,k)^T, i.e. C[i][j] = dot(row_i(A), row_j(B)).
pub fn mm_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for (arow, crow) in a.chunks_exact(k).zip(c.chunks_exact_mut(n)) {
        for (cv, brow) in crow.iter_mut().zip(b.chunks_exact(k)) {
            let mut s = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                s += av * bv;
            }
            *cv += s;
        }
    }
}

/// C += A(m,k)^T * B(m,n), i.e. C[p][j] = sum_r A[r][p] * B[r][j].
pub fn mm_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for (arow, brow) in a.chunks_exact(k).zip(b.chunks_exact(n)) {
        for (&av, crow) in arow.iter().zip(c.chunks_exact_mut(n)) {
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// y += alpha * x.
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
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

    fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        let mut t = vec![0.0; x.len()];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = x[r * cols + c];
            }
        }
        t
    }

    #[test]
    fn kernels_match_naive_matmul() {
        let (m, k, n) = (5, 7, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.73).cos()).collect();
        let want = naive(&a, &b, m, k, n);

        let mut c = vec![0.0; m * n];
        mm_nn_acc(&a, &b, &mut c, m, k, n);
        assert_eq!(c, want);

        let mut c = vec![0.0; m * n];
        mm_nt_acc(&a, &transpose(&b, k, n), &mut c, m, k, n);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        // mm_tn takes the transposed operand as [k, m] rows, so m and k swap.
        let mut c = vec![0.0; m * n];
        mm_tn_acc(&transpose(&a, m, k), &b, &mut c, k, m, n);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
