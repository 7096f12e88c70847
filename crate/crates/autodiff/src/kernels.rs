//! Dense inner loops shared by forward and backward passes.
//!
//! All matrices are row-major slices. Loop orders keep the innermost
//! access contiguous so the compiler can vectorize.

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut total = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        total += a[i] * b[i];
    }
    total
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out ← out + a·b` through strided dgemm; `(rs, cs)` are row and column
/// strides of each operand.
#[allow(clippy::too_many_arguments)]
fn dgemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_st: (usize, usize),
    b: &[f64],
    b_st: (usize, usize),
    out: &mut [f64],
) {
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    debug_assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
    // SAFETY: the strides describe in-bounds m×k, k×n and m×n views of
    // the slices, as asserted above; `out` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_st.0 as isize,
            a_st.1 as isize,
            b.as_ptr(),
            b_st.0 as isize,
            b_st.1 as isize,
            1.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// out[m×n] += a[m×k] · b[k×n]
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    dgemm_acc(m, k, n, a, (k, 1), b, (n, 1), out);
}

/// out[m×n] += a[m×k] · b[n×k]ᵀ
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    dgemm_acc(m, k, n, a, (k, 1), b, (1, k), out);
}

/// out[k×n] += a[m×k]ᵀ · b[m×n]
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    dgemm_acc(k, m, n, a, (1, k), b, (n, 1), out);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for kk in 0..k {
                    out[i * n + j] += a[i * k + kk] * b[kk * n + j];
                }
            }
        }
        out
    }

    fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        let mut t = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = x[r * cols + c];
            }
        }
        t
    }

    #[test]
    fn gemm_variants_agree_with_triple_loop() {
        let (m, k, n) = (3, 5, 7);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let expected = naive(&a, &b, m, k, n);

        let mut nn = vec![0.0; m * n];
        gemm_nn(&a, &b, &mut nn, m, k, n);

        let bt = transpose(&b, k, n);
        let mut nt = vec![0.0; m * n];
        gemm_nt(&a, &bt, &mut nt, m, k, n);

        let at = transpose(&a, m, k);
        let mut tn = vec![0.0; m * n];
        gemm_tn(&at, &b, &mut tn, k, m, n);

        for i in 0..m * n {
            assert!((nn[i] - expected[i]).abs() < 1e-12);
            assert!((nt[i] - expected[i]).abs() < 1e-12);
            assert!((tn[i] - expected[i]).abs() < 1e-12);
        }
    }
}
