//! Coordinates on the space of real symmetric matrices.
//!
//! A symmetric `n x n` matrix is represented by its `n(n+1)/2` coordinates in
//! the orthonormal basis `E_ii`, `(E_ij + E_ji)/sqrt(2)`. With this basis the
//! Frobenius inner product of two symmetric matrices equals the Euclidean inner
//! product of their coordinate vectors. Coordinates are ordered column by
//! column over the upper triangle: `(i, j)` with `i <= j` lives at
//! `j(j+1)/2 + i`.

use nalgebra::{DMatrix, DVector};
use std::f64::consts::SQRT_2;

pub fn sym_dim(n: usize) -> usize {
    n * (n + 1) / 2
}

#[inline]
pub fn sym_index(i: usize, j: usize) -> usize {
    let (i, j) = if i <= j { (i, j) } else { (j, i) };
    j * (j + 1) / 2 + i
}

/// Recover `n` from a coordinate count `n(n+1)/2`.
pub fn sym_order(dim: usize) -> Option<usize> {
    let n = ((((8 * dim + 1) as f64).sqrt() - 1.0) / 2.0).round() as usize;
    (sym_dim(n) == dim).then_some(n)
}

/// `(i, j)` pairs in coordinate order.
pub fn index_pairs(n: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(sym_dim(n));
    for j in 0..n {
        for i in 0..=j {
            out.push((i, j));
        }
    }
    out
}

/// Coordinates of the symmetric part of `m`.
pub fn svec(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows();
    debug_assert_eq!(n, m.ncols());
    let mut v = DVector::zeros(sym_dim(n));
    for j in 0..n {
        for i in 0..=j {
            v[sym_index(i, j)] = if i == j {
                m[(i, i)]
            } else {
                (m[(i, j)] + m[(j, i)]) / SQRT_2
            };
        }
    }
    v
}

/// Inverse of [`svec`]; the result is exactly symmetric.
pub fn smat(v: &[f64], n: usize) -> DMatrix<f64> {
    debug_assert_eq!(v.len(), sym_dim(n));
    let mut m = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in 0..=j {
            let c = v[sym_index(i, j)];
            if i == j {
                m[(i, i)] = c;
            } else {
                let c = c / SQRT_2;
                m[(i, j)] = c;
                m[(j, i)] = c;
            }
        }
    }
    m
}

/// The basis matrix for coordinate `k`.
pub fn basis_matrix(n: usize, k: usize) -> DMatrix<f64> {
    let mut v = vec![0.0; sym_dim(n)];
    v[k] = 1.0;
    smat(&v, n)
}

/// Matrix of the operator `V -> (X V Y + Y V X)/2` in symmetric coordinates,
/// for symmetric `X` and `Y`. Entry `(p, q)` equals `tr(E_p X E_q Y)`; the
/// result is symmetric, and positive definite when `X` and `Y` are.
pub fn sym_kron(x: &DMatrix<f64>, y: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let pairs = index_pairs(n);
    let dim = pairs.len();
    let scale: Vec<f64> = pairs
        .iter()
        .map(|&(a, b)| if a == b { 0.5 } else { 1.0 / SQRT_2 })
        .collect();
    let mut out = DMatrix::zeros(dim, dim);
    for q in 0..dim {
        let (c, d) = pairs[q];
        let sq = scale[q];
        let xc = x.column(c);
        let xd = x.column(d);
        let yc = y.column(c);
        let yd = y.column(d);
        for p in 0..=q {
            let (a, b) = pairs[p];
            let v = xc[b] * yd[a] + xd[b] * yc[a] + xc[a] * yd[b] + xd[a] * yc[b];
            let v = v * scale[p] * sq;
            out[(p, q)] = v;
            out[(q, p)] = v;
        }
    }
    out
}

/// Rows `svec(C B_r C^T)` for each basis element `B_r` of the `q x q`
/// symmetric matrices: the coefficient matrix of `H -> C^T H C` acting on
/// `svec(H)` and producing `svec(C^T H C)`.
pub fn congruence_rows(c: &DMatrix<f64>) -> DMatrix<f64> {
    let big = c.nrows();
    let q = c.ncols();
    let pairs = index_pairs(q);
    let mut out = DMatrix::zeros(pairs.len(), sym_dim(big));
    for (row, &(a, b)) in pairs.iter().enumerate() {
        let ca = c.column(a);
        let cb = c.column(b);
        let m = if a == b {
            ca * ca.transpose()
        } else {
            (ca * cb.transpose() + cb * ca.transpose()) / SQRT_2
        };
        out.row_mut(row).copy_from(&svec(&m).transpose());
    }
    out
}
