//! Dense symmetric helpers on top of `nalgebra`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

const EIGEN_MAX_ITER: usize = 10_000;

/// Eigendecomposition of a symmetric matrix with eigenvalues sorted in
/// descending order. Ties keep the solver's original order.
pub fn sym_eigen_desc(m: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
    if !m.is_square() {
        return Err(Error::dims("symmetric eigendecomposition (columns)", m.nrows(), m.ncols()));
    }
    let eig = SymmetricEigen::try_new(symmetrized(m), f64::EPSILON, EIGEN_MAX_ITER)
        .ok_or_else(|| Error::Numeric("symmetric eigendecomposition did not converge".into()))?;
    let mut order: Vec<usize> = (0..m.nrows()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(m.nrows(), m.ncols(), |r, c| eig.eigenvectors[(r, order[c])]);
    Ok((values, vectors))
}

pub fn symmetrized(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// `U · diag(values) · Uᵀ`, symmetrized.
pub fn reconstruct(basis: &DMatrix<f64>, values: &[f64]) -> DMatrix<f64> {
    let mut scaled = basis.clone();
    for (j, &v) in values.iter().enumerate() {
        scaled.column_mut(j).scale_mut(v);
    }
    symmetrized(&(scaled * basis.transpose()))
}

/// `U · diag(values) · Uᵀ · z` without forming the matrix.
pub fn apply_eigen_form(basis: &DMatrix<f64>, values: &[f64], z: &DVector<f64>) -> DVector<f64> {
    let mut coeffs = basis.tr_mul(z);
    for (c, &v) in coeffs.iter_mut().zip(values) {
        *c *= v;
    }
    basis * coeffs
}

/// Makes the largest-magnitude entry of each column positive (first index
/// wins on exact ties).
pub fn fix_column_signs(m: &mut DMatrix<f64>) {
    for mut col in m.column_iter_mut() {
        let mut best = 0usize;
        for i in 1..col.len() {
            if col[i].abs() > col[best].abs() {
                best = i;
            }
        }
        if col[best] < 0.0 {
            col.neg_mut();
        }
    }
}
