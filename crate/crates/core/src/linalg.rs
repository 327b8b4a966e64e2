//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Eigenvalues in ascending order with matching eigenvector columns.
pub fn sorted_eigen(a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(a.clone());
    let n = a.nrows();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let vals = DVector::from_iterator(n, idx.iter().map(|&i| eig.eigenvalues[i]));
    let mut vecs = DMatrix::zeros(n, n);
    for (c, &i) in idx.iter().enumerate() {
        vecs.set_column(c, &eig.eigenvectors.column(i));
    }
    (vals, vecs)
}

pub fn eigenvalues(a: &DMatrix<f64>) -> Vec<f64> {
    sorted_eigen(a).0.iter().copied().collect()
}

pub fn max_asymmetry(a: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..a.nrows() {
        for j in (i + 1)..a.ncols() {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst
}

pub fn ensure_square(a: &DMatrix<f64>) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(Error::DimensionMismatch {
            expected: "square matrix".into(),
            found: format!("{}x{}", a.nrows(), a.ncols()),
        });
    }
    Ok(())
}

pub fn ensure_symmetric(a: &DMatrix<f64>, tol: f64) -> Result<()> {
    ensure_square(a)?;
    let scale = a.amax().max(1.0);
    let asym = max_asymmetry(a);
    if asym > tol * scale {
        return Err(Error::NotSymmetric(asym));
    }
    Ok(())
}

/// Largest singular value.
pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    let ata = a.transpose() * a;
    eigenvalues(&ata).last().copied().unwrap_or(0.0).max(0.0).sqrt()
}

/// Solve `a x = b` for symmetric positive definite `a`.
pub fn spd_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let chol = a
        .clone()
        .cholesky()
        .ok_or_else(|| Error::SolveFailed("matrix not positive definite".into()))?;
    Ok(chol.solve(b))
}

/// Moore-Penrose pseudo-inverse of a symmetric PSD matrix, dropping
/// eigenvalues below `rel_tol * lambda_max`.
pub fn psd_pinv(a: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let (vals, vecs) = sorted_eigen(a);
    let lmax = vals.iter().fold(0.0f64, |m, v| m.max(*v));
    let n = a.nrows();
    let mut d = DVector::zeros(n);
    for i in 0..n {
        if vals[i] > rel_tol * lmax {
            d[i] = 1.0 / vals[i];
        }
    }
    &vecs * DMatrix::from_diagonal(&d) * vecs.transpose()
}

pub fn dot(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.dot(b)
}

/// Log-log least-squares slope of `ys` against `xs`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    linear_slope(&lx, &ly)
}

/// Ordinary least-squares slope.
pub fn linear_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
    }
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigen_sorted_ascending() {
        let a = DMatrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 1.0]);
        let (v, vecs) = sorted_eigen(&a);
        assert_eq!(v.as_slice(), &[1.0, 3.0]);
        assert!((vecs[(1, 0)].abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pinv_of_rank_one() {
        let a = DMatrix::from_element(2, 2, 1.0);
        let p = psd_pinv(&a, 1e-9);
        let back = &a * &p * &a;
        assert!((back - a).norm() < 1e-12);
    }

    #[test]
    fn slopes() {
        let xs = [1.0, 10.0, 100.0];
        let ys = [2.0, 20.0, 200.0];
        assert!((loglog_slope(&xs, &ys) - 1.0).abs() < 1e-12);
        assert!((spectral_norm(&DMatrix::from_row_slice(1, 2, &[3.0, 4.0])) - 5.0).abs() < 1e-12);
    }
}
