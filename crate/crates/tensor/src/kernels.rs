//! Matrix kernels. Every output element is accumulated in ascending `k`
//! order regardless of how many rows are computed together, so a row of a
//! product is bitwise identical whether it is computed alone or as part of a
//! larger matrix. Cached decoding relies on this.

use rayon::prelude::*;

use crate::Scalar;

const PAR_THRESHOLD: usize = 1 << 18;

#[inline]
fn row_nn<T: Scalar>(arow: &[T], b: &[T], n: usize, out: &mut [T]) {
    for (kk, &av) in arow.iter().enumerate() {
        if av == T::zero() {
            continue;
        }
        let brow = &b[kk * n..(kk + 1) * n];
        for (c, &bv) in out.iter_mut().zip(brow) {
            *c += av * bv;
        }
    }
}

/// `a[m,k] x b[k,n]`.
pub(crate) fn matmul_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    if n == 0 || k == 0 {
        return out;
    }
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        out.par_chunks_mut(n)
            .zip(a.par_chunks(k))
            .for_each(|(orow, arow)| row_nn(arow, b, n, orow));
    } else {
        for (orow, arow) in out.chunks_mut(n).zip(a.chunks(k)) {
            row_nn(arow, b, n, orow);
        }
    }
    out
}

pub(crate) fn transpose<T: Scalar>(a: &[T], m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// `a[m,k] x b[n,k]^T`.
pub(crate) fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let bt = transpose(b, n, k);
    matmul_nn(a, &bt, m, k, n)
}

/// `a[k,m]^T x b[k,n]`.
pub(crate) fn matmul_tn<T: Scalar>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    let at = transpose(a, k, m);
    matmul_nn(&at, b, m, k, n)
}

pub(crate) fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nn_matches_naive_triple_loop() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let c = matmul_nn(&a, &b, m, k, n);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|t| a[i * k + t] * b[t * n + j]).sum();
                assert!((c[i * n + j] - want).abs() < 1e-12);
            }
        }
        let bt = transpose(&b, k, n);
        assert_eq!(matmul_nt(&a, &bt, m, k, n), c);
        let at = transpose(&a, m, k);
        assert_eq!(matmul_tn(&at, &b, k, m, n), c);
    }

    #[test]
    fn single_row_is_bitwise_equal_to_full_product_row() {
        let (m, k, n) = (64, 96, 80);
        let a: Vec<f32> = (0..m * k).map(|i| ((i * 7919) % 1000) as f32 / 997.0 - 0.5).collect();
        let b: Vec<f32> = (0..k * n).map(|i| ((i * 104729) % 1000) as f32 / 991.0 - 0.5).collect();
        let full = matmul_nn(&a, &b, m, k, n);
        for i in [0, 17, 63] {
            let one = matmul_nn(&a[i * k..(i + 1) * k], &b, 1, k, n);
            assert_eq!(&full[i * n..(i + 1) * n], &one[..]);
        }
    }
}
