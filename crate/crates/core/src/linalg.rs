//! Dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

const BLOCK: usize = 96;

/// Lower-triangular Cholesky factor computed block by block so the bulk of
/// the work goes through matrix-matrix products. Returns `None` when the
/// matrix is not numerically positive definite.
pub struct BlockedCholesky {
    l: DMatrix<f64>,
}

impl BlockedCholesky {
    pub fn new(mut a: DMatrix<f64>) -> Option<Self> {
        let n = a.nrows();
        assert_eq!(n, a.ncols(), "cholesky of a non-square matrix");
        let mut k = 0;
        while k < n {
            let b = BLOCK.min(n - k);
            let diag = a.view((k, k), (b, b)).clone_owned();
            let l11 = diag.cholesky()?.unpack();
            a.view_mut((k, k), (b, b)).copy_from(&l11);
            if k + b < n {
                let rest = n - k - b;
                let mut panel = a.view((k + b, k), (rest, b)).transpose();
                if !l11.solve_lower_triangular_mut(&mut panel) {
                    return None;
                }
                let panel = panel.transpose();
                a.view_mut((k + b, k), (rest, b)).copy_from(&panel);
                a.view_mut((k + b, k + b), (rest, rest))
                    .gemm(-1.0, &panel, &panel.transpose(), 1.0);
            }
            k += b;
        }
        a.fill_upper_triangle(0.0, 1);
        if a.iter().any(|v| !v.is_finite()) {
            return None;
        }
        Some(Self { l: a })
    }

    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn solve_mut(&self, b: &mut DMatrix<f64>) {
        self.l.solve_lower_triangular_mut(b);
        self.l.tr_solve_lower_triangular_mut(b);
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut m = DMatrix::from_column_slice(b.len(), 1, b.as_slice());
        self.solve_mut(&mut m);
        DVector::from_column_slice(m.as_slice())
    }
}

/// Symmetric eigendecomposition with eigenvalues sorted ascending.
pub fn sorted_eigen(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let sym = symmetrize(m);
    let eig = SymmetricEigen::new(sym);
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let vals = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vecs = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vecs.set_column(dst, &eig.eigenvectors.column(src));
    }
    (vals, vecs)
}

pub fn eigenvalues(m: &DMatrix<f64>) -> DVector<f64> {
    let mut v: Vec<f64> = symmetrize(m).symmetric_eigenvalues().iter().copied().collect();
    v.sort_by(f64::total_cmp);
    DVector::from_vec(v)
}

pub fn min_eig(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return f64::INFINITY;
    }
    eigenvalues(m)[0]
}

pub fn extreme_eigs(m: &DMatrix<f64>) -> (f64, f64) {
    let v = eigenvalues(m);
    (v[0], v[v.len() - 1])
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    (m - m.transpose()).amax()
}

/// Largest `alpha` with `s + alpha * ds` positive semidefinite, given `s`
/// positive definite. Returns infinity when every step is admissible.
pub fn max_psd_step(s: &DMatrix<f64>, ds: &DMatrix<f64>) -> f64 {
    let n = s.nrows();
    let Some(chol) = s.clone().cholesky() else {
        return 0.0;
    };
    let l = chol.l();
    let mut t = ds.clone();
    l.solve_lower_triangular_mut(&mut t);
    let mut t = t.transpose();
    l.solve_lower_triangular_mut(&mut t);
    let lam = if n == 1 { t[(0, 0)] } else { min_eig(&t) };
    if lam >= 0.0 {
        f64::INFINITY
    } else {
        -1.0 / lam
    }
}

/// Orthonormal basis of the column space of `m`, using the eigenvectors of
/// `m m^T` whose eigenvalues exceed `rel_tol * max`.
pub fn column_space(m: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let gram = m * m.transpose();
    let (vals, vecs) = sorted_eigen(&gram);
    let top = vals.iter().copied().fold(0.0_f64, f64::max);
    let keep: Vec<usize> = (0..vals.len())
        .rev()
        .filter(|&i| vals[i] > rel_tol * top && top > 0.0)
        .collect();
    let mut out = DMatrix::zeros(m.nrows(), keep.len());
    for (dst, &src) in keep.iter().enumerate() {
        out.set_column(dst, &vecs.column(src));
    }
    out
}

/// Max entry of `Q^T Q - I`.
pub fn orthonormality_defect(q: &DMatrix<f64>) -> f64 {
    (q.transpose() * q - DMatrix::identity(q.ncols(), q.ncols())).amax()
}
