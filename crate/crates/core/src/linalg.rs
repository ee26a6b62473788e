//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Eigendecomposition of a symmetric matrix with eigenvalues sorted in
/// descending order and each eigenvector's largest-magnitude entry positive.
#[derive(Debug, Clone)]
pub struct SortedEigen {
    pub values: DVector<f64>,
    /// Eigenvectors as columns, in the same order as `values`.
    pub vectors: DMatrix<f64>,
}

pub fn sorted_symmetric_eigen(a: &DMatrix<f64>) -> Result<SortedEigen> {
    if !a.is_square() {
        return Err(Error::ShapeMismatch(format!(
            "eigendecomposition of a {}x{} matrix",
            a.nrows(),
            a.ncols()
        )));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("symmetric eigendecomposition".into()));
    }
    let n = a.nrows();
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(src).clone_owned();
        let pivot = col
            .iter()
            .copied()
            .max_by(|x, y| x.abs().total_cmp(&y.abs()))
            .unwrap_or(0.0);
        if pivot < 0.0 {
            col.neg_mut();
        }
        vectors.set_column(dst, &col);
    }
    Ok(SortedEigen { values, vectors })
}

pub fn column_means(z: &DMatrix<f64>) -> DVector<f64> {
    let n = z.nrows().max(1) as f64;
    DVector::from_iterator(z.ncols(), z.column_iter().map(|c| c.sum() / n))
}

/// Subtracts `mu` from every row.
pub fn center_rows(z: &DMatrix<f64>, mu: &DVector<f64>) -> DMatrix<f64> {
    let mut out = z.clone();
    for mut row in out.row_iter_mut() {
        for (v, m) in row.iter_mut().zip(mu.iter()) {
            *v -= m;
        }
    }
    out
}

/// Adds `b` to every row.
pub fn add_row_vector(z: &mut DMatrix<f64>, b: &DVector<f64>) {
    for mut row in z.row_iter_mut() {
        for (v, m) in row.iter_mut().zip(b.iter()) {
            *v += m;
        }
    }
}

/// Unbiased sample covariance of the rows of `z`.
pub fn sample_covariance(z: &DMatrix<f64>) -> DMatrix<f64> {
    let mu = column_means(z);
    let zc = center_rows(z, &mu);
    let denom = (z.nrows().max(2) - 1) as f64;
    zc.transpose() * zc / denom
}

/// `(A + ridge I)^{-1/2}` for symmetric positive semi-definite `A`.
pub fn inv_sqrt_psd(a: &DMatrix<f64>, ridge: f64) -> Result<DMatrix<f64>> {
    let eig = sorted_symmetric_eigen(a)?;
    let n = a.nrows();
    let mut scaled = eig.vectors.clone();
    for j in 0..n {
        let v = eig.values[j].max(0.0) + ridge;
        if v <= 0.0 {
            return Err(Error::RankDeficient("inverse square root of a singular matrix".into()));
        }
        scaled.column_mut(j).scale_mut(1.0 / v.sqrt());
    }
    Ok(&scaled * eig.vectors.transpose())
}

/// Largest singular value.
pub fn operator_norm(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.clone().svd(false, false).singular_values.max()
}

pub fn frobenius(a: &DMatrix<f64>) -> f64 {
    a.norm()
}
