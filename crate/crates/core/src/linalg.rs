//! Small dense linear-algebra helpers shared by the estimators.

use nalgebra::{DMatrix, DVector};

/// Pivot tolerance relative to the largest pivot of a column-pivoted QR.
pub const RANK_TOL: f64 = 1e-10;

/// Returns the indices of columns that are (numerically) linear combinations
/// of the others, as judged by a column-pivoted QR.
pub fn dependent_columns(x: &DMatrix<f64>) -> Vec<usize> {
    let k = x.ncols();
    if k == 0 {
        return Vec::new();
    }
    if x.nrows() == 0 {
        return (0..k).collect();
    }
    let qr = x.clone().col_piv_qr();
    let r = qr.r();
    let mut order = DMatrix::from_fn(1, k, |_, j| j as f64);
    qr.p().permute_columns(&mut order);
    let diag: Vec<f64> = (0..r.nrows().min(k)).map(|i| r[(i, i)].abs()).collect();
    let largest = diag.iter().cloned().fold(0.0, f64::max);
    let mut dependent = Vec::new();
    for pos in 0..k {
        let pivot = diag.get(pos).copied().unwrap_or(0.0);
        if largest == 0.0 || pivot <= RANK_TOL * largest {
            dependent.push(order[(0, pos)] as usize);
        }
    }
    dependent.sort_unstable();
    dependent
}

/// `X'X` computed with a fixed summation order.
pub fn gram(x: &DMatrix<f64>) -> DMatrix<f64> {
    x.tr_mul(x)
}

/// Inverse of a symmetric positive definite matrix.
pub fn inv_spd(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if a.nrows() == 0 {
        return Some(DMatrix::zeros(0, 0));
    }
    a.clone().cholesky().map(|c| c.inverse())
}

/// Solves `A b = rhs` for symmetric positive definite `A`.
pub fn solve_spd(a: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    if a.nrows() == 0 {
        return Some(DVector::zeros(0));
    }
    a.clone().cholesky().map(|c| c.solve(rhs))
}

/// Symmetric matrix power through an eigendecomposition; eigenvalues are
/// floored at zero before exponentiation.
pub fn sym_pow(a: &DMatrix<f64>, power: f64) -> DMatrix<f64> {
    let n = a.nrows();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let sym = (a + a.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let vals = eig.eigenvalues.map(|v| v.max(0.0).powf(power));
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Eigenvalues and eigenvectors of a symmetric matrix, sorted by descending
/// eigenvalue.
pub fn sym_eigen_desc(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let sym = (a + a.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let vals = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vecs = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    (vals, vecs)
}

pub fn select_columns(x: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), cols.len(), |i, j| x[(i, cols[j])])
}

pub fn select_rows(x: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), x.ncols(), |i, j| x[(rows[i], j)])
}

pub fn select_entries(v: &DVector<f64>, rows: &[usize]) -> DVector<f64> {
    DVector::from_iterator(rows.len(), rows.iter().map(|&i| v[i]))
}

pub fn hstack(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    assert_eq!(a.nrows(), b.nrows(), "hstack row mismatch");
    let ka = a.ncols();
    DMatrix::from_fn(a.nrows(), ka + b.ncols(), |i, j| {
        if j < ka {
            a[(i, j)]
        } else {
            b[(i, j - ka)]
        }
    })
}

/// Residuals of an OLS projection of every column of `y` on `x`.
pub fn residualize(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if x.ncols() == 0 {
        return Some(y.clone());
    }
    let xtx_inv = inv_spd(&gram(x))?;
    let coef = xtx_inv * x.tr_mul(y);
    Some(y - x * coef)
}
