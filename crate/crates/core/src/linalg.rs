//! Small dense helpers shared by the modules. Everything here is f64.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Relative tolerance used for rank decisions.
pub const RANK_TOL: f64 = 1e-9;

/// Singular values in descending order. Empty for an empty matrix.
pub fn singular_values(m: &Matrix) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    let mut s: Vec<f64> = m.clone().svd(false, false).singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Rank with singular values counted above `rel_tol * sigma_max`.
pub fn rank(m: &Matrix, rel_tol: f64) -> usize {
    let s = singular_values(m);
    match s.first() {
        Some(&smax) if smax > 0.0 => s.iter().filter(|&&v| v > rel_tol * smax).count(),
        _ => 0,
    }
}

/// Full SVD `(s, U, V^T)` computed on the zero-padded square matrix and
/// trimmed back, so `U` is `r x k` and `V^T` is `k x c` with `k = max(r, c)`.
/// nalgebra's singular vectors for rectangular input can be wrong (seen on
/// wide matrices with near-zero rows); the square path is not affected.
fn padded_svd(m: &Matrix) -> (Vec<f64>, Matrix, Matrix) {
    let (r, c) = m.shape();
    let k = r.max(c);
    let mut sq = Matrix::zeros(k, k);
    sq.view_mut((0, 0), (r, c)).copy_from(m);
    let svd = sq.svd(true, true);
    let u = svd.u.expect("requested u").rows(0, r).into_owned();
    let v_t = svd.v_t.expect("requested v_t").columns(0, c).into_owned();
    (svd.singular_values.iter().copied().collect(), u, v_t)
}

/// Orthonormal basis of the row space, returned as the rows of a matrix,
/// strongest direction first.
pub fn row_space_basis(m: &Matrix, rel_tol: f64) -> Matrix {
    let cols = m.ncols();
    if m.nrows() == 0 || cols == 0 {
        return Matrix::zeros(0, cols);
    }
    let (s, _, v_t) = padded_svd(m);
    let smax = s.iter().copied().fold(0.0, f64::max);
    let mut order: Vec<usize> = (0..s.len()).filter(|&i| smax > 0.0 && s[i] > rel_tol * smax).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    Matrix::from_fn(order.len(), cols, |r, c| v_t[(order[r], c)])
}

/// Orthonormal basis of the null space, returned as columns.
pub fn null_space(m: &Matrix, rel_tol: f64) -> Matrix {
    let n = m.ncols();
    let basis = row_space_basis(m, rel_tol);
    if basis.nrows() == 0 {
        return Matrix::identity(n, n);
    }
    // complete the row space with a projector-based Gram-Schmidt sweep
    let proj = Matrix::identity(n, n) - basis.transpose() * &basis;
    let mut cols: Vec<Vector> = Vec::new();
    for j in 0..n {
        let mut v: Vector = proj.column(j).into_owned();
        for c in &cols {
            let d = c.dot(&v);
            v -= c * d;
        }
        let norm = v.norm();
        if norm > 1e-8 {
            cols.push(v / norm);
        }
        if cols.len() + basis.nrows() == n {
            break;
        }
    }
    if cols.is_empty() {
        return Matrix::zeros(n, 0);
    }
    Matrix::from_columns(&cols)
}

/// Moore-Penrose pseudo-inverse with the relative cutoff `rel_tol`.
pub fn pinv(m: &Matrix, rel_tol: f64) -> Matrix {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Matrix::zeros(m.ncols(), m.nrows());
    }
    let (sv, u, v_t) = padded_svd(m);
    let smax = sv.iter().copied().fold(0.0, f64::max);
    let mut out = Matrix::zeros(m.ncols(), m.nrows());
    for (k, &s) in sv.iter().enumerate() {
        if smax > 0.0 && s > rel_tol * smax {
            out += (v_t.row(k).transpose() / s) * u.column(k).transpose();
        }
    }
    out
}

/// Inverse of a square matrix, refusing numerically singular input.
pub fn inverse(m: &Matrix) -> Result<Matrix> {
    let s = singular_values(m);
    let (smax, smin) = (s.first().copied().unwrap_or(0.0), s.last().copied().unwrap_or(0.0));
    if m.nrows() != m.ncols() || smax == 0.0 || smin <= 1e-13 * smax {
        return Err(Error::Numeric(format!(
            "matrix is singular or too ill-conditioned to invert (condition {:.3e})",
            if smin > 0.0 { smax / smin } else { f64::INFINITY }
        )));
    }
    m.clone()
        .try_inverse()
        .ok_or_else(|| Error::Numeric("matrix inversion failed".into()))
}

pub fn mat_pow(a: &Matrix, k: usize) -> Matrix {
    let mut out = Matrix::identity(a.nrows(), a.ncols());
    for _ in 0..k {
        out = &out * a;
    }
    out
}

/// `||a - b||_F / max(||b||_F, 1e-300)`.
pub fn rel_diff(a: &Matrix, b: &Matrix) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

/// Symmetric positive semidefinite check with tolerance scaled by the matrix size.
pub fn check_psd(m: &Matrix, what: &str) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::Input(format!("{what} must be square, got {}x{}", m.nrows(), m.ncols())));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input(format!("{what} has non-finite entries")));
    }
    let scale = m.norm().max(1.0);
    if (m - m.transpose()).norm() > 1e-9 * scale {
        return Err(Error::Input(format!("{what} is not symmetric")));
    }
    if m.nrows() == 0 {
        return Ok(());
    }
    let sym = (m + m.transpose()) * 0.5;
    let min_eig = sym.symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min);
    if min_eig < -1e-9 * scale {
        return Err(Error::Input(format!(
            "{what} is not positive semidefinite (smallest eigenvalue {min_eig:.3e})"
        )));
    }
    Ok(())
}

/// A factor `G` with `G G^T = m` for a PSD matrix, via the symmetric eigendecomposition.
pub fn psd_factor(m: &Matrix) -> Matrix {
    let n = m.nrows();
    if n == 0 {
        return Matrix::zeros(0, 0);
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let mut g = eig.eigenvectors.clone();
    for j in 0..n {
        let s = eig.eigenvalues[j].max(0.0).sqrt();
        for i in 0..n {
            g[(i, j)] *= s;
        }
    }
    g
}

/// Block-diagonal assembly.
pub fn block_diag(blocks: &[Matrix]) -> Matrix {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Matrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// Vertical stack of matrices with equal column counts.
pub fn vstack(blocks: &[Matrix], cols: usize) -> Matrix {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = Matrix::zeros(rows, cols);
    let mut r = 0;
    for b in blocks {
        out.view_mut((r, 0), (b.nrows(), cols)).copy_from(b);
        r += b.nrows();
    }
    out
}

/// Eigenvalues sorted by decreasing modulus, then real part, then imaginary part.
pub fn eigenvalues(a: &Matrix) -> Vec<Complex64> {
    if a.nrows() == 0 {
        return Vec::new();
    }
    let mut ev: Vec<Complex64> = a.complex_eigenvalues().iter().copied().collect();
    sort_eigenvalues(&mut ev);
    ev
}

pub fn sort_eigenvalues(ev: &mut [Complex64]) {
    ev.sort_by(|x, y| {
        y.norm()
            .total_cmp(&x.norm())
            .then(y.re.total_cmp(&x.re))
            .then(y.im.total_cmp(&x.im))
    });
}

pub fn to_matrix(rows: &[Vec<f64>]) -> Result<Matrix> {
    let r = rows.len();
    let c = rows.first().map_or(0, |row| row.len());
    if rows.iter().any(|row| row.len() != c) {
        return Err(Error::Input("ragged matrix rows".into()));
    }
    Ok(Matrix::from_fn(r, c, |i, j| rows[i][j]))
}

pub fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pinv_of_full_column_rank_is_left_inverse() {
        let m = Matrix::from_row_slice(3, 2, &[1.0, 2.0, 0.0, 1.0, 3.0, -1.0]);
        let p = pinv(&m, 1e-12);
        assert!((p * &m - Matrix::identity(2, 2)).norm() < 1e-12);
    }

    #[test]
    fn wide_row_space_with_near_zero_rows() {
        // rows 0 and 1 are rounding noise, rows 2 and 3 are orthonormal
        let m = Matrix::from_row_slice(4, 5, &[
            3.78e-16, 5.86e-16, 4.44e-16, -2.88e-16, -6.66e-16,
            -1.26e-15, -6.73e-16, -3.99e-16, -8.67e-17, -4.44e-16,
            0.5911623369472878, 0.7302470840803197, 0.14484845910162708, 0.10803795961227577, 0.2908831565180644,
            -0.17586874013715356, -0.022999698275796954, -0.6341011842946987, 0.5304971734002544, 0.5338816696724039,
        ]);
        let b = row_space_basis(&m, RANK_TOL);
        assert_eq!(b.nrows(), 2);
        assert!((&m - &m * b.transpose() * &b).norm() < 1e-12);
        let p = pinv(&m, RANK_TOL);
        assert!((&m * &p * &m - &m).norm() < 1e-12);
    }

    #[test]
    fn rank_and_row_space() {
        let m = Matrix::from_row_slice(3, 3, &[1.0, 0.0, 1.0, 2.0, 0.0, 2.0, 0.0, 1.0, 0.0]);
        assert_eq!(rank(&m, RANK_TOL), 2);
        let b = row_space_basis(&m, RANK_TOL);
        assert_eq!(b.nrows(), 2);
        assert!((&b * b.transpose() - Matrix::identity(2, 2)).norm() < 1e-12);
        let ns = null_space(&m, RANK_TOL);
        assert_eq!(ns.ncols(), 1);
        assert!((&m * &ns).norm() < 1e-12);
    }

    #[test]
    fn psd_factor_reconstructs() {
        let m = Matrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let g = psd_factor(&m);
        assert!((&g * g.transpose() - &m).norm() < 1e-12);
        assert!(check_psd(&Matrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]), "m").is_err());
    }
}
