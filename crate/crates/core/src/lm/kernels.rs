//! Dense row-major kernels. All of them accumulate into `out`.

use crate::float::Float;

/// `out (m x n) += a (m x k) · b (k x n)`.
pub(crate) fn matmul(a: &[Float], b: &[Float], m: usize, k: usize, n: usize, out: &mut [Float]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (p, &x) in a[i * k..(i + 1) * k].iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            axpy(x, &b[p * n..(p + 1) * n], row);
        }
    }
}

/// `out (m x n) += a (m x k) · bᵀ` where `b` is `n x k`.
pub(crate) fn matmul_bt(a: &[Float], b: &[Float], m: usize, k: usize, n: usize, out: &mut [Float]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] += dot(ar, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out (k x n) += aᵀ · b` where `a` is `m x k` and `b` is `m x n`.
pub(crate) fn matmul_at(a: &[Float], b: &[Float], m: usize, k: usize, n: usize, out: &mut [Float]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for t in 0..m {
        let br = &b[t * n..(t + 1) * n];
        for (p, &x) in a[t * k..(t + 1) * k].iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            axpy(x, br, &mut out[p * n..(p + 1) * n]);
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[Float], b: &[Float]) -> Float {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn axpy(alpha: Float, x: &[Float], y: &mut [Float]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Adds `bias` to every row of `out`.
pub(crate) fn add_rows(out: &mut [Float], bias: &[Float]) {
    for row in out.chunks_exact_mut(bias.len()) {
        for (o, b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

/// Sums the rows of `m` into `out`.
pub(crate) fn sum_rows(m: &[Float], out: &mut [Float]) {
    for row in m.chunks_exact(out.len()) {
        for (o, x) in out.iter_mut().zip(row) {
            *o += x;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use alloc::vec::Vec;

    fn naive(a: &[Float], b: &[Float], m: usize, k: usize, n: usize) -> Vec<Float> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    fn transpose(a: &[Float], r: usize, c: usize) -> Vec<Float> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = a[i * c + j];
            }
        }
        t
    }

    #[test]
    fn variants_agree_with_triple_loop() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<Float> = (0..m * k).map(|i| libm::sin(i as f64 * 0.37) as Float).collect();
        let b: Vec<Float> = (0..k * n).map(|i| libm::cos(i as f64 * 0.11) as Float).collect();
        let want = naive(&a, &b, m, k, n);

        let mut got = vec![0.0; m * n];
        matmul(&a, &b, m, k, n, &mut got);
        assert_eq!(got, want);

        let mut got = vec![0.0; m * n];
        matmul_bt(&a, &transpose(&b, k, n), m, k, n, &mut got);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }

        let mut got = vec![0.0; m * n];
        matmul_at(&transpose(&a, m, k), &b, k, m, n, &mut got);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }
}
