//! Small dense helpers shared by the solvers: induced infinity norms,
//! symmetric square roots and SPD factorizations.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{EnkiError, Result};

/// Induced matrix infinity norm (max absolute row sum).
pub fn inf_norm(m: &DMatrix<f64>) -> f64 {
    (0..m.nrows())
        .map(|i| m.row(i).iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

pub fn vec_inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Principal square root of a symmetric PSD matrix. Negative eigenvalues
/// (round-off on rank-deficient input) are clamped to zero.
pub fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    let mut out = v * DMatrix::from_diagonal(&roots) * v.transpose();
    symmetrize(&mut out);
    out
}

/// Smallest and largest eigenvalue of a symmetric matrix.
pub fn sym_eig_extremes(m: &DMatrix<f64>) -> (f64, f64) {
    if m.nrows() == 0 {
        return (0.0, 0.0);
    }
    let ev = SymmetricEigen::new(m.clone()).eigenvalues;
    let lo = ev.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = ev.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

pub fn cholesky(m: &DMatrix<f64>, what: &'static str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m.clone()).ok_or(EnkiError::NotPositiveDefinite(what))
}

/// `mu * I + scale * s`
pub fn shifted(s: &DMatrix<f64>, mu: f64, scale: f64) -> DMatrix<f64> {
    let mut m = s * scale;
    for i in 0..m.nrows() {
        m[(i, i)] += mu;
    }
    m
}

/// Orthonormal basis of the column span, dropping directions whose singular
/// value is below `rel_tol * sigma_max`.
pub fn column_space_basis(m: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let svd = m.clone().svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    if smax == 0.0 {
        return DMatrix::zeros(m.nrows(), 0);
    }
    let keep: Vec<usize> = svd
        .singular_values
        .iter()
        .enumerate()
        .filter(|(_, s)| **s > rel_tol * smax)
        .map(|(i, _)| i)
        .collect();
    u.select_columns(&keep)
}

/// Asserts entrywise shape agreement and reports a readable message otherwise.
pub(crate) fn check_dims(what: &str, got: (usize, usize), want: (usize, usize)) -> Result<()> {
    if got != want {
        return Err(EnkiError::Dimension(format!(
            "{what}: expected {}x{}, got {}x{}",
            want.0, want.1, got.0, got.1
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inf_norm_is_max_row_sum() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, -2.0, 0.5, 0.25]);
        assert_eq!(inf_norm(&m), 3.0);
        assert_eq!(inf_norm(&m.transpose()), 2.25);
    }

    #[test]
    fn sqrt_squares_back() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 2.0]);
        let r = sym_sqrt(&a);
        assert!((&r * &r - &a).abs().max() < 1e-13);
    }

    #[test]
    fn sqrt_clamps_negative_roundoff() {
        let v = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let mut a = &v * v.transpose();
        a[(0, 0)] -= 1e-14;
        let r = sym_sqrt(&a);
        assert!(r.iter().all(|x| x.is_finite()));
        assert!((&r * &r - &a).abs().max() < 1e-6);
    }

    #[test]
    fn basis_of_rank_one() {
        let v = DVector::from_vec(vec![1.0, 1.0, 0.0]);
        let m = DMatrix::from_columns(&[v.clone(), v * 2.0]);
        let b = column_space_basis(&m, 1e-12);
        assert_eq!(b.ncols(), 1);
    }
}
