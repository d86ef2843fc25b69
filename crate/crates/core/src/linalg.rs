//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;

pub type Mat = DMatrix<f64>;
pub type CMat = DMatrix<Complex64>;
pub type Vector = DVector<f64>;
pub type CVector = DVector<Complex64>;

pub fn to_complex(m: &Mat) -> CMat {
    m.map(|v| Complex64::new(v, 0.0))
}

pub fn to_complex_vec(v: &Vector) -> CVector {
    v.map(|x| Complex64::new(x, 0.0))
}

/// Column-stacking vectorization, matching the `vec(XYZ) = (Zᵀ ⊗ X) vec(Y)` convention.
pub fn vec_of<T: nalgebra::Scalar + Copy>(m: &DMatrix<T>) -> DVector<T> {
    DVector::from_column_slice(m.as_slice())
}

pub fn unvec<T: nalgebra::Scalar + Copy>(v: &DVector<T>, n: usize) -> DMatrix<T> {
    DMatrix::from_column_slice(n, v.len() / n, v.as_slice())
}

pub fn is_symmetric(m: &Mat, tol: f64) -> bool {
    if !m.is_square() {
        return false;
    }
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            if (m[(i, j)] - m[(j, i)]).abs() > tol {
                return false;
            }
        }
    }
    true
}

/// Largest eigenvalue magnitude.
pub fn spectral_radius(m: &Mat) -> f64 {
    if m.nrows() == 0 {
        return 0.0;
    }
    if is_symmetric(m, 0.0) {
        let eig = SymmetricEigen::new(m.clone());
        eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()))
    } else {
        m.complex_eigenvalues()
            .iter()
            .fold(0.0f64, |a, v| a.max(v.norm()))
    }
}

/// Largest singular value.
pub fn spectral_norm(m: &Mat) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    let gram = m.transpose() * m;
    let eig = SymmetricEigen::new(gram);
    eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(*v)).max(0.0).sqrt()
}

/// Largest singular value of a complex matrix.
pub fn spectral_norm_c(m: &CMat) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    m.clone()
        .singular_values()
        .iter()
        .fold(0.0f64, |a, v| a.max(*v))
}

/// Smallest eigenvalue of the Hermitian part of `m`.
pub fn min_hermitian_eigenvalue(m: &CMat) -> f64 {
    let h = (m + m.adjoint()) * Complex64::new(0.5, 0.0);
    let eig = SymmetricEigen::new(h);
    eig.eigenvalues.iter().fold(f64::INFINITY, |a, v| a.min(*v))
}

pub fn min_symmetric_eigenvalue(m: &Mat) -> f64 {
    let h = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(h);
    eig.eigenvalues.iter().fold(f64::INFINITY, |a, v| a.min(*v))
}

pub fn trace_product(a: &Mat, b: &Mat) -> f64 {
    // tr(AB) = sum_ij A_ij B_ji
    let n = a.nrows();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..a.ncols() {
            acc += a[(i, j)] * b[(j, i)];
        }
    }
    acc
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    (a - b).iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

pub fn max_abs_diff_c(a: &CMat, b: &CMat) -> f64 {
    (a - b).iter().fold(0.0f64, |m, v| m.max(v.norm()))
}

pub fn mat_pow(m: &Mat, k: usize) -> Mat {
    let mut out = Mat::identity(m.nrows(), m.ncols());
    for _ in 0..k {
        out = &out * m;
    }
    out
}

/// Diagonal as a vector.
pub fn diag_of(m: &Mat) -> Vec<f64> {
    (0..m.nrows()).map(|i| m[(i, i)]).collect()
}

pub fn diag_of_c(m: &CMat) -> Vec<Complex64> {
    (0..m.nrows()).map(|i| m[(i, i)]).collect()
}

pub fn diag_mat_c(d: &[Complex64]) -> CMat {
    CMat::from_diagonal(&CVector::from_column_slice(d))
}

pub fn db(linear: f64) -> f64 {
    10.0 * linear.log10()
}
