//! Real Jordan coordinates: `J = P A P^{-1}` with 1x1 real atoms and 2x2
//! rotation-scale atoms `[[a, b], [-b, a]]` for complex pairs `a +- ib`.

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};

/// One real Jordan block inside `J`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct JordanBlock {
    pub start: usize,
    pub dim: usize,
    /// Eigenvalue with non-negative imaginary part.
    pub eigenvalue: (f64, f64),
    pub complex: bool,
}

impl JordanBlock {
    pub fn lambda(&self) -> Complex64 {
        Complex64::new(self.eigenvalue.0, self.eigenvalue.1)
    }

    pub fn modulus(&self) -> f64 {
        self.lambda().norm()
    }

    pub fn atom(&self) -> usize {
        if self.complex {
            2
        } else {
            1
        }
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.dim
    }

    /// Exact block matrix for this eigenvalue and size.
    pub fn matrix(&self) -> Matrix {
        block_matrix(self.lambda(), self.dim, self.complex)
    }
}

fn rotation(z: Complex64) -> Matrix {
    Matrix::from_row_slice(2, 2, &[z.re, z.im, -z.im, z.re])
}

fn block_matrix(lambda: Complex64, dim: usize, complex: bool) -> Matrix {
    let mut m = Matrix::zeros(dim, dim);
    if complex {
        let d = rotation(lambda);
        for k in (0..dim).step_by(2) {
            m.view_mut((k, k), (2, 2)).copy_from(&d);
            if k + 2 < dim {
                m.view_mut((k, k + 2), (2, 2)).copy_from(&Matrix::identity(2, 2));
            }
        }
    } else {
        for k in 0..dim {
            m[(k, k)] = lambda.re;
            if k + 1 < dim {
                m[(k, k + 1)] = 1.0;
            }
        }
    }
    m
}

/// A real Jordan decomposition of some matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RealJordan {
    pub p: Matrix,
    pub p_inv: Matrix,
    pub j: Matrix,
    pub blocks: Vec<JordanBlock>,
}

impl RealJordan {
    pub fn dim(&self) -> usize {
        self.j.nrows()
    }

    /// Eigenvalues of `J` with multiplicity, conjugates included.
    pub fn eigenvalues(&self) -> Vec<Complex64> {
        let mut out = Vec::new();
        for b in &self.blocks {
            for _ in 0..b.dim / b.atom() {
                out.push(b.lambda());
                if b.complex {
                    out.push(b.lambda().conj());
                }
            }
        }
        out
    }

    /// Reorder blocks; `order[k]` is the index of the block placed k-th.
    pub fn permute_blocks(&self, order: &[usize]) -> RealJordan {
        let mut rows = Vec::with_capacity(self.dim());
        let mut blocks = Vec::with_capacity(order.len());
        let mut start = 0;
        for &b in order {
            let blk = self.blocks[b];
            rows.extend(blk.range());
            blocks.push(JordanBlock { start, ..blk });
            start += blk.dim;
        }
        let n = self.dim();
        let perm = Matrix::from_fn(n, n, |i, k| if rows[i] == k { 1.0 } else { 0.0 });
        RealJordan {
            p: &perm * &self.p,
            p_inv: &self.p_inv * perm.transpose(),
            j: &perm * &self.j * perm.transpose(),
            blocks,
        }
    }

    /// Real Jordan decomposition of `A^k`, built block by block from this one.
    pub fn power(&self, k: u32) -> Result<RealJordan> {
        let n = self.dim();
        let mut v = Matrix::zeros(n, n);
        let mut j = Matrix::zeros(n, n);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let mu = blk.lambda().powu(k);
            let mu = if blk.complex { mu } else { Complex64::new(mu.re, 0.0) };
            let powered = linalg::mat_pow(&blk.matrix(), k as usize);
            let vb = chain_basis(&powered, mu, blk.dim, blk.complex);
            let target = block_matrix(mu, blk.dim, blk.complex);
            let vb_inv = linalg::inverse(&vb)?;
            let got = &vb_inv * &powered * &vb;
            if linalg::rel_diff(&got, &target) > 1e-9 {
                return Err(Error::Numeric(format!(
                    "Jordan structure of the {k}-th power could not be rebuilt accurately"
                )));
            }
            v.view_mut((blk.start, blk.start), (blk.dim, blk.dim)).copy_from(&vb);
            j.view_mut((blk.start, blk.start), (blk.dim, blk.dim)).copy_from(&target);
            let eig = if mu.im < 0.0 { mu.conj() } else { mu };
            blocks.push(JordanBlock { eigenvalue: (eig.re, eig.im), ..*blk });
        }
        let v_inv = linalg::inverse(&v)?;
        Ok(RealJordan { p: &v_inv * &self.p, p_inv: &self.p_inv * &v, j, blocks })
    }
}

/// Columns spanning a Jordan chain of `b` for eigenvalue `mu`.
fn chain_basis(b: &Matrix, mu: Complex64, dim: usize, complex: bool) -> Matrix {
    let atom = if complex { 2 } else { 1 };
    let count = dim / atom;
    if count == 1 {
        return Matrix::identity(dim, dim);
    }
    let d_mu = if complex { rotation(mu) } else { Matrix::from_element(1, 1, mu.re) };
    let mut v = Matrix::zeros(dim, dim);
    let mut x = Matrix::zeros(dim, atom);
    x.view_mut((dim - atom, 0), (atom, atom)).copy_from(&Matrix::identity(atom, atom));
    for i in (0..count).rev() {
        v.view_mut((0, i * atom), (dim, atom)).copy_from(&x);
        x = b * &x - &x * &d_mu;
    }
    v
}

fn is_zero(v: f64, tol: f64) -> bool {
    v.abs() <= tol
}

/// Recognise a matrix that is already in real Jordan form.
pub fn parse_real_jordan(a: &Matrix, rel_tol: f64) -> Option<Vec<JordanBlock>> {
    let n = a.nrows();
    if n == 0 || a.ncols() != n {
        return None;
    }
    let tol = rel_tol * a.norm().max(1.0);
    // atoms along the diagonal
    let mut atoms: Vec<(usize, usize, Complex64)> = Vec::new();
    let mut i = 0;
    while i < n {
        if i + 1 < n && !is_zero(a[(i + 1, i)], tol) {
            let (p, q, r, s) = (a[(i, i)], a[(i, i + 1)], a[(i + 1, i)], a[(i + 1, i + 1)]);
            if !is_zero(p - s, tol) || !is_zero(q + r, tol) || is_zero(q, tol) {
                return None;
            }
            atoms.push((i, 2, Complex64::new(p, q.abs())));
            i += 2;
        } else {
            atoms.push((i, 1, Complex64::new(a[(i, i)], 0.0)));
            i += 1;
        }
    }
    let mut expected = Matrix::zeros(n, n);
    let mut blocks: Vec<JordanBlock> = Vec::new();
    for (k, &(start, size, lam)) in atoms.iter().enumerate() {
        let atom = if size == 2 { rotation(Complex64::new(a[(start, start)], a[(start, start + 1)])) } else {
            Matrix::from_element(1, 1, lam.re)
        };
        expected.view_mut((start, start), (size, size)).copy_from(&atom);
        let chained = k > 0 && {
            let (ps, psize, plam) = atoms[k - 1];
            psize == size
                && (plam - lam).norm() <= tol
                && (size == 1 || a[(ps, ps + 1)] == a[(start, start + 1)])
                && (0..size).all(|r| {
                    (0..size).all(|c| {
                        let want = if r == c { 1.0 } else { 0.0 };
                        is_zero(a[(ps + r, start + c)] - want, tol)
                    })
                })
        };
        if chained {
            let (ps, ..) = atoms[k - 1];
            expected.view_mut((ps, start), (size, size)).copy_from(&Matrix::identity(size, size));
            blocks.last_mut().expect("chained block has a predecessor").dim += size;
        } else {
            blocks.push(JordanBlock { start, dim: size, eigenvalue: (lam.re, lam.im), complex: size == 2 });
        }
    }
    if (a - &expected).iter().all(|&v| is_zero(v, tol)) {
        Some(blocks)
    } else {
        None
    }
}

fn sort_order(blocks: &[JordanBlock]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..blocks.len()).collect();
    order.sort_by(|&x, &y| {
        let (a, b) = (blocks[x].lambda(), blocks[y].lambda());
        b.norm().total_cmp(&a.norm()).then(b.re.total_cmp(&a.re)).then(b.im.total_cmp(&a.im))
    });
    order
}

fn from_structure(a: &Matrix, p: Matrix, blocks: Vec<JordanBlock>) -> Result<RealJordan> {
    let p_inv = linalg::inverse(&p)?;
    let n = a.nrows();
    let mut j = Matrix::zeros(n, n);
    for b in &blocks {
        j.view_mut((b.start, b.start), (b.dim, b.dim)).copy_from(&block_matrix(b.lambda(), b.dim, b.complex));
    }
    // keep the sign convention of the supplied rotation atoms
    let computed = &p * a * &p_inv;
    for b in blocks.iter().filter(|b| b.complex) {
        for k in (b.start..b.start + b.dim).step_by(2) {
            j[(k, k + 1)] = computed[(k, k + 1)].signum() * b.eigenvalue.1;
            j[(k + 1, k)] = -j[(k, k + 1)];
        }
    }
    if linalg::rel_diff(&computed, &j) > 1e-9 {
        return Err(Error::Numeric("transform does not reproduce a real Jordan form to 1e-9".into()));
    }
    Ok(RealJordan { p, p_inv, j, blocks })
}

/// Real Jordan form of `a`. Diagonalizable matrices and matrices already in
/// real Jordan form are supported; other defective matrices need
/// [`to_real_jordan_with`].
pub fn to_real_jordan(a: &Matrix) -> Result<RealJordan> {
    let n = a.nrows();
    if n == 0 || a.ncols() != n {
        return Err(Error::Input("A must be square and non-empty".into()));
    }
    if let Some(blocks) = parse_real_jordan(a, 1e-12) {
        let rj = from_structure(a, Matrix::identity(n, n), blocks)?;
        let order = sort_order(&rj.blocks);
        return Ok(if order.iter().enumerate().all(|(k, &b)| k == b) { rj } else { rj.permute_blocks(&order) });
    }
    diagonalize(a)
}

/// Real Jordan form using a caller-supplied `P`.
pub fn to_real_jordan_with(a: &Matrix, p: &Matrix) -> Result<RealJordan> {
    if p.nrows() != a.nrows() || p.ncols() != a.ncols() {
        return Err(Error::Input("supplied transform has the wrong shape".into()));
    }
    let p_inv = linalg::inverse(p)?;
    let j = p * a * &p_inv;
    let blocks = parse_real_jordan(&j, 1e-9)
        .ok_or_else(|| Error::Input("supplied transform does not bring A to real Jordan form".into()))?;
    from_structure(a, p.clone(), blocks)
}

struct Cluster {
    lambda: Complex64,
    size: usize,
}

fn clusters(a: &Matrix) -> Vec<Cluster> {
    let eigs = linalg::eigenvalues(a);
    let mut out: Vec<(Complex64, Vec<Complex64>)> = Vec::new();
    for z in eigs {
        let tol = 1e-6 * z.norm().max(1.0);
        match out.iter_mut().find(|(c, _)| (c - z).norm() <= tol) {
            Some((c, members)) => {
                members.push(z);
                *c = members.iter().sum::<Complex64>() / members.len() as f64;
            }
            None => out.push((z, vec![z])),
        }
    }
    out.into_iter()
        .map(|(c, members)| {
            let real = c.im.abs() <= 1e-9 * c.norm().max(1.0);
            Cluster { lambda: if real { Complex64::new(c.re, 0.0) } else { c }, size: members.len() }
        })
        .filter(|c| c.lambda.im >= 0.0)
        .collect()
}

fn diagonalize(a: &Matrix) -> Result<RealJordan> {
    let n = a.nrows();
    let scale = a.norm().max(1.0);
    let null_tol = 1e-8 * scale;
    let mut cl = clusters(a);
    cl.sort_by(|x, y| {
        y.lambda
            .norm()
            .total_cmp(&x.lambda.norm())
            .then(y.lambda.re.total_cmp(&x.lambda.re))
            .then(y.lambda.im.total_cmp(&x.lambda.im))
    });
    let mut columns: Vec<nalgebra::DVector<f64>> = Vec::with_capacity(n);
    let mut blocks = Vec::new();
    for c in &cl {
        if c.lambda.im == 0.0 {
            let shifted = a - Matrix::identity(n, n) * c.lambda.re;
            let svd = shifted.svd(false, true);
            let v_t = svd.v_t.expect("v_t");
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&x, &y| svd.singular_values[x].total_cmp(&svd.singular_values[y]));
            for &k in idx.iter().take(c.size) {
                if svd.singular_values[k] > null_tol {
                    return Err(defective(c.lambda));
                }
                let mut v: nalgebra::DVector<f64> = v_t.row(k).transpose();
                let pivot = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
                if pivot < 0.0 {
                    v = -v;
                }
                blocks.push(JordanBlock { start: columns.len(), dim: 1, eigenvalue: (c.lambda.re, 0.0), complex: false });
                columns.push(v);
            }
        } else {
            let shifted: DMatrix<Complex64> =
                a.map(|x| Complex64::new(x, 0.0)) - DMatrix::<Complex64>::identity(n, n) * c.lambda;
            let svd = shifted.svd(false, true);
            let v_t = svd.v_t.expect("v_t");
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&x, &y| svd.singular_values[x].total_cmp(&svd.singular_values[y]));
            for &k in idx.iter().take(c.size) {
                if svd.singular_values[k] > null_tol {
                    return Err(defective(c.lambda));
                }
                let v: Vec<Complex64> = v_t.row(k).iter().map(|z| z.conj()).collect();
                // fix the phase so the largest entry is real and positive
                let big = v.iter().copied().fold(Complex64::new(0.0, 0.0), |m, z| if z.norm() > m.norm() { z } else { m });
                let phase = big.conj() / big.norm();
                let v: Vec<Complex64> = v.iter().map(|z| z * phase).collect();
                blocks.push(JordanBlock {
                    start: columns.len(),
                    dim: 2,
                    eigenvalue: (c.lambda.re, c.lambda.im),
                    complex: true,
                });
                columns.push(nalgebra::DVector::from_iterator(n, v.iter().map(|z| z.re)));
                columns.push(nalgebra::DVector::from_iterator(n, v.iter().map(|z| z.im)));
            }
        }
    }
    if columns.len() != n {
        return Err(Error::Unsupported("eigenvector count does not match the dimension".into()));
    }
    let v = Matrix::from_columns(&columns);
    let p = linalg::inverse(&v).map_err(|_| {
        Error::Unsupported("eigenvector matrix is numerically singular; supply a transform".into())
    })?;
    from_structure(a, p, blocks)
}

fn defective(lambda: Complex64) -> Error {
    Error::Unsupported(format!(
        "A is defective at eigenvalue {:.6}{:+.6}i; supply a real Jordan transform or give A in real Jordan form",
        lambda.re, lambda.im
    ))
}
