//! Dense linear algebra helpers over `nalgebra::DMatrix` (column-major).
//!
//! Large products go through `matrixmultiply`; small `k x k` factorizations use
//! nalgebra; the large symmetric eigenproblem of the Hessian operator uses faer.

use alloc::vec::Vec;
use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::math;

/// `c <- alpha * op(a) * op(b) + beta * c`, where `op` optionally transposes.
pub fn gemm(
    alpha: f64,
    a: &DMatrix<f64>,
    transpose_a: bool,
    b: &DMatrix<f64>,
    transpose_b: bool,
    beta: f64,
    c: &mut DMatrix<f64>,
) {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let (m, k, rsa, csa) = if transpose_a {
        (ac, ar, ar as isize, 1)
    } else {
        (ar, ac, 1, ar as isize)
    };
    let (kb, n, rsb, csb) = if transpose_b {
        (bc, br, br as isize, 1)
    } else {
        (br, bc, 1, br as isize)
    };
    assert_eq!(k, kb, "gemm inner dimensions");
    assert_eq!(c.shape(), (m, n), "gemm output shape");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.scale_mut(beta);
        return;
    }
    let rsc = 1;
    let csc = m as isize;
    // SAFETY: all pointers address live column-major buffers whose extents match
    // the dimensions and strides passed; `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

/// `op(a) * op(b)` as a new matrix.
pub fn matmul(
    a: &DMatrix<f64>,
    transpose_a: bool,
    b: &DMatrix<f64>,
    transpose_b: bool,
) -> DMatrix<f64> {
    let m = if transpose_a { a.ncols() } else { a.nrows() };
    let n = if transpose_b { b.nrows() } else { b.ncols() };
    let mut c = DMatrix::zeros(m, n);
    gemm(1.0, a, transpose_a, b, transpose_b, 0.0, &mut c);
    c
}

/// `(m + m^T) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Inverse of a symmetric positive definite matrix, or `None` if the Cholesky
/// factorization fails.
pub fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let chol = nalgebra::linalg::Cholesky::new(symmetrize(m))?;
    Some(symmetrize(&chol.inverse()))
}

/// Eigenvalues of a small symmetric matrix in ascending order.
pub fn sym_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let eig = nalgebra::linalg::SymmetricEigen::new(symmetrize(m));
    let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    vals.sort_by(f64::total_cmp);
    vals
}

/// Eigenvalues (ascending) and matching orthonormal eigenvectors (columns) of a
/// small symmetric matrix.
pub fn sym_eigen(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = nalgebra::linalg::SymmetricEigen::new(symmetrize(m));
    let n = m.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let vals = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vecs = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    (vals, vecs)
}

/// Dense symmetric eigensolver for large matrices (faer). Returns ascending
/// eigenvalues and eigenvectors as columns.
pub fn sym_eigen_large(m: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = m.nrows();
    let a = faer::Mat::<f64>::from_fn(n, n, |i, j| 0.5 * (m[(i, j)] + m[(j, i)]));
    let eig = a
        .self_adjoint_eigen(faer::Side::Lower)
        .map_err(|_| Error::EigenFailed)?;
    let s = eig.S().column_vector();
    let u = eig.U();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| s[i].total_cmp(&s[j]));
    let vals = order.iter().map(|&i| s[i]).collect();
    let vecs = DMatrix::from_fn(n, n, |r, c| u[(r, order[c])]);
    Ok((vals, vecs))
}

/// Singular value decomposition `m = U diag(s) V^T` with `s` descending.
pub fn svd(m: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    let svd = nalgebra::linalg::SVD::new(m.clone(), true, true);
    let u = svd.u.expect("requested U");
    let vt = svd.v_t.expect("requested V^T");
    let s = &svd.singular_values;
    let r = s.len();
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&i, &j| s[j].total_cmp(&s[i]));
    let sv = order.iter().map(|&i| s[i]).collect();
    let u_sorted = DMatrix::from_fn(u.nrows(), r, |row, c| u[(row, order[c])]);
    let v_sorted = DMatrix::from_fn(vt.ncols(), r, |row, c| vt[(order[c], row)]);
    (u_sorted, sv, v_sorted)
}

pub fn nuclear_norm(m: &DMatrix<f64>) -> f64 {
    nalgebra::linalg::SVD::new(m.clone(), false, false)
        .singular_values
        .iter()
        .sum()
}

pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    nalgebra::linalg::SVD::new(m.clone(), false, false)
        .singular_values
        .iter()
        .fold(0.0, |acc: f64, &s| acc.max(s))
}

pub fn trace(m: &DMatrix<f64>) -> f64 {
    m.diagonal().iter().sum()
}

/// `tr(a * b)` without forming the product.
pub fn trace_of_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.ncols(), b.nrows());
    assert_eq!(a.nrows(), b.ncols());
    let mut acc = 0.0;
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            acc += a[(i, j)] * b[(j, i)];
        }
    }
    acc
}

pub fn frobenius(m: &DMatrix<f64>) -> f64 {
    math::sqrt(m.iter().map(|v| v * v).sum())
}

/// Principal inverse square root of a symmetric PSD matrix restricted to its
/// range: eigenvalues below `tol * lambda_max` are treated as zero.
pub fn psd_inverse_sqrt(m: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    let (vals, vecs) = sym_eigen(m);
    let top = vals.iter().fold(0.0_f64, |a, &b| a.max(b));
    let n = m.nrows();
    let mut out = DMatrix::zeros(n, n);
    for (i, &lam) in vals.iter().enumerate() {
        if lam > tol * top && lam > 0.0 {
            let v = vecs.column(i);
            out += (v * v.transpose()) / math::sqrt(lam);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pseudo(seed: &mut u64) -> f64 {
        *seed = seed
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64) / ((1u64 << 53) as f64) - 0.5
    }

    fn random(r: usize, c: usize, seed: &mut u64) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| pseudo(seed))
    }

    #[test]
    fn gemm_matches_naive_product_for_all_transpositions() {
        let mut s = 3;
        let a = random(4, 6, &mut s);
        let b = random(6, 5, &mut s);
        let expect = &a * &b;
        assert!((matmul(&a, false, &b, false) - &expect).abs().max() < 1e-14);
        let at = a.transpose();
        let bt = b.transpose();
        assert!((matmul(&at, true, &b, false) - &expect).abs().max() < 1e-14);
        assert!((matmul(&a, false, &bt, true) - &expect).abs().max() < 1e-14);
        assert!((matmul(&at, true, &bt, true) - &expect).abs().max() < 1e-14);

        let mut c = DMatrix::from_element(4, 5, 1.0);
        gemm(2.0, &a, false, &b, false, 0.5, &mut c);
        let want = &expect * 2.0 + DMatrix::from_element(4, 5, 0.5);
        assert!((c - want).abs().max() < 1e-14);
    }

    #[test]
    fn svd_reconstructs() {
        let mut s = 11;
        let m = random(5, 5, &mut s);
        let (u, sv, v) = svd(&m);
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(sv.clone()));
        assert!((&u * d * v.transpose() - &m).abs().max() < 1e-12);
        assert!(sv.windows(2).all(|w| w[0] >= w[1]));
        assert!((nuclear_norm(&m) - sv.iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn large_and_small_eigensolvers_agree() {
        let mut s = 5;
        let m = random(30, 30, &mut s);
        let sym = symmetrize(&m);
        let (a, va) = sym_eigen_large(&sym).unwrap();
        let b = sym_eigenvalues(&sym);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        let resid = &sym * &va - &va * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(a));
        assert!(resid.abs().max() < 1e-12);
    }

    #[test]
    fn spd_inverse_rejects_indefinite() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(spd_inverse(&m).is_none());
        let p = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let inv = spd_inverse(&p).unwrap();
        assert!((&p * inv - DMatrix::identity(2, 2)).abs().max() < 1e-14);
    }

    #[test]
    fn inverse_sqrt_whitens() {
        let mut s = 7;
        let g = random(4, 4, &mut s);
        let p = &g * g.transpose() + DMatrix::identity(4, 4) * 0.1;
        let w = psd_inverse_sqrt(&p, 1e-12);
        assert!((&w * &p * &w - DMatrix::identity(4, 4)).abs().max() < 1e-10);
    }
}
