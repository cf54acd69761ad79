//! Small complex linear-algebra helpers on top of nalgebra.

use alloc::format;
use alloc::vec::Vec;
use nalgebra::Cholesky;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::{CMatrix, CVector};

pub const J: Complex64 = Complex64 { re: 0.0, im: 1.0 };

/// Frobenius norm of `m - m^H`.
pub fn hermitian_defect(m: &CMatrix) -> f64 {
    (m - m.adjoint()).norm()
}

/// `(m + m^H) / 2`, removing round-off asymmetry before factorizations.
pub fn hermitian_part(m: &CMatrix) -> CMatrix {
    (m + m.adjoint()).scale(0.5)
}

/// Eigen-decomposition of a Hermitian matrix with eigenvalues sorted in
/// descending order. Column `i` of the returned matrix pairs with value `i`.
pub fn hermitian_eigen(m: &CMatrix) -> (Vec<f64>, CMatrix) {
    let n = m.nrows();
    let eig = hermitian_part(m).symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = CMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

/// Rank tolerance used for "exact" rank: `n * eps` relative to the largest
/// eigenvalue.
pub fn exact_rank_tol(n: usize) -> f64 {
    n as f64 * f64::EPSILON
}

/// Number of eigenvalues above `rel_tol * lambda_max`.
pub fn numerical_rank(m: &CMatrix, rel_tol: f64) -> usize {
    let (values, _) = hermitian_eigen(m);
    let top = values.first().copied().unwrap_or(0.0);
    if top <= 0.0 {
        return 0;
    }
    values.iter().filter(|&&v| v > rel_tol * top).count()
}

/// Cholesky factor of a Hermitian positive-definite matrix.
pub fn cholesky(m: &CMatrix, what: &str) -> Result<Cholesky<Complex64, nalgebra::Dyn>> {
    hermitian_part(m).cholesky().ok_or_else(|| {
        Error::Numerical(format!(
            "{what} ({}x{}) is not numerically positive definite",
            m.nrows(),
            m.ncols()
        ))
    })
}

pub fn identity(n: usize) -> CMatrix {
    CMatrix::identity(n, n)
}

pub fn column(m: &CMatrix, j: usize) -> CVector {
    m.column(j).into_owned()
}

/// `x^H y`.
pub fn inner(x: &CVector, y: &CVector) -> Complex64 {
    x.dotc(y)
}

/// Maps an angle onto `[0, 2*pi)`.
pub fn wrap_phase(x: f64) -> f64 {
    let two_pi = core::f64::consts::TAU;
    let r = x % two_pi;
    if r < 0.0 {
        r + two_pi
    } else {
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigen_sorted_descending_and_reconstructs() {
        let a = CMatrix::from_fn(3, 3, |i, j| {
            Complex64::new((i * 3 + j) as f64 * 0.1, i as f64 - j as f64)
        });
        let h = &a * a.adjoint();
        let (vals, vecs) = hermitian_eigen(&h);
        assert!(vals.windows(2).all(|w| w[0] >= w[1]));
        let d = CMatrix::from_diagonal(&CVector::from_iterator(3, vals.iter().map(|&v| Complex64::new(v, 0.0))));
        let back = &vecs * d * vecs.adjoint();
        assert!((back - &h).norm() < 1e-10 * h.norm());
    }

    #[test]
    fn rank_of_outer_product() {
        let v = CVector::from_fn(4, |i, _| Complex64::new(1.0, i as f64));
        let m = &v * v.adjoint();
        assert_eq!(numerical_rank(&m, 1e-10), 1);
        assert_eq!(numerical_rank(&CMatrix::zeros(3, 3), 1e-10), 0);
    }

    #[test]
    fn wrap() {
        assert!((wrap_phase(-0.5) - (core::f64::consts::TAU - 0.5)).abs() < 1e-15);
        assert!((wrap_phase(7.0) - (7.0 - core::f64::consts::TAU)).abs() < 1e-15);
    }
}
