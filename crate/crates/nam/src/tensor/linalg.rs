//! Inner loops shared by the tape and the value-level modules.
//!
//! Written with fixed-order accumulation so results are bit-reproducible
//! run to run; the four-lane unrolling is enough for the autovectorizer.

use super::Scalar;

/// Dot product with four independent accumulators.
#[inline]
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [S::zero(); 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] = acc[0] + a[j] * b[j];
        acc[1] = acc[1] + a[j + 1] * b[j + 1];
        acc[2] = acc[2] + a[j + 2] * b[j + 2];
        acc[3] = acc[3] + a[j + 3] * b[j + 3];
    }
    let mut tail = S::zero();
    for j in chunks * 4..a.len() {
        tail = tail + a[j] * b[j];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + tail
}

/// y += alpha * x
#[inline]
pub fn axpy<S: Scalar>(y: &mut [S], alpha: S, x: &[S]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, &xi) in y.iter_mut().zip(x.iter()) {
        *yi = *yi + alpha * xi;
    }
}

/// C[m,n] = A[m,k] * B[k,n], accumulated in ikj order.
pub fn matmul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(crow, a[i * k + p], &b[p * n..(p + 1) * n]);
        }
    }
    c
}

/// y[m] = A[m,k] * x[k]
pub fn matvec<S: Scalar>(a: &[S], x: &[S], m: usize, k: usize) -> Vec<S> {
    (0..m).map(|i| dot(&a[i * k..(i + 1) * k], x)).collect()
}

/// y[k] = A^T[k,m] * x[m], i.e. x through the transpose of A[m,k].
pub fn matvec_t<S: Scalar>(a: &[S], x: &[S], m: usize, k: usize) -> Vec<S> {
    let mut y = vec![S::zero(); k];
    for i in 0..m {
        axpy(&mut y, x[i], &a[i * k..(i + 1) * k]);
    }
    y
}

/// v[m] k[n] -> [m,n]
pub fn outer<S: Scalar>(v: &[S], k: &[S]) -> Vec<S> {
    let mut out = vec![S::zero(); v.len() * k.len()];
    for (i, &vi) in v.iter().enumerate() {
        let row = &mut out[i * k.len()..(i + 1) * k.len()];
        for (o, &kj) in row.iter_mut().zip(k.iter()) {
            *o = vi * kj;
        }
    }
    out
}

pub fn transpose<S: Scalar>(a: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f64> = (0..11).map(|i| i as f64 * 0.5).collect();
        let b: Vec<f64> = (0..11).map(|i| 1.0 - i as f64 * 0.25).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }

    #[test]
    fn matmul_identity() {
        let eye = vec![1.0, 0.0, 0.0, 1.0];
        let a = vec![1.0, 2.0, 3.0, 4.0];
        assert_eq!(matmul(&eye, &a, 2, 2, 2), a);
    }

    #[test]
    fn matvec_transpose_consistent() {
        let a = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let x = vec![0.5, -1.0];
        let at = transpose(&a, 2, 3);
        assert_eq!(matvec_t(&a, &x, 2, 3), matvec(&at, &x, 3, 2));
    }
}
