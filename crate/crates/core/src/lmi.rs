//! The operators `L` and `M` that express first- and second-order optimality
//! of a point `x` as linear functions of the kernel `H = A^T A`, the LMI
//! problems built from them, and the factorization of a kernel back into
//! measurement matrices.
//!
//! Everything lives on the `N = n(n+1)/2` dimensional space of symmetric
//! `n x n` matrices (see [`crate::symbasis`]). An SDP variable `H` is stored
//! as its own symmetric coordinates, `N(N+1)/2` numbers.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::linalg;
use crate::sdp::{self, ConeBlock, LinearConstraint, SdpProblem, SdpSolution, SdpStatus, SolveOptions};
use crate::sensing::{rotation_complement, CertifyTolerances, CriticalityCertificate, SensingInstance, Verdict};
use crate::symbasis::{basis_matrix, congruence_rows, index_pairs, smat, svec, sym_dim};

/// Upper bound placed on `H` in the pure feasibility problem, whose feasible
/// set is otherwise a cone.
pub const FEASIBILITY_CAP: f64 = 1e4;
/// Upper bound placed on `H` in the restricted-RIP problem when the subspace
/// does not cover the whole space.
pub const DELTA_LB_CAP: f64 = 1e3;

/// `delta = (1 - eta) / (1 + eta)`.
pub fn delta_from_eta(eta: f64) -> f64 {
    (1.0 - eta) / (1.0 + eta)
}

/// A symmetric positive semidefinite `N x N` kernel acting on symmetric
/// coordinates of `n x n` matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelMatrix {
    h: DMatrix<f64>,
    n: usize,
}

impl KernelMatrix {
    pub fn new(h: DMatrix<f64>, n: usize) -> Result<Self> {
        let dim = sym_dim(n);
        if h.shape() != (dim, dim) {
            return Err(shape_err("kernel", format!("{dim}x{dim}"), format!("{:?}", h.shape())));
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("kernel has non-finite entries".into()));
        }
        let asym = linalg::max_asymmetry(&h);
        if asym > 1e-12 * h.amax().max(1.0) {
            return Err(Error::InvalidInput(format!("kernel is not symmetric (defect {asym:.3e})")));
        }
        let h = linalg::symmetrize(&h);
        let (lo, hi) = linalg::extreme_eigs(&h);
        let tol = 1e-10 * hi.abs();
        if lo < -tol {
            return Err(Error::Indefinite { min_eig: lo, tol });
        }
        Ok(Self { h, n })
    }

    /// Kernel from its symmetric coordinates (an SDP variable block).
    pub fn from_coords(coords: &[f64], n: usize) -> Result<Self> {
        let dim = sym_dim(n);
        if coords.len() != sym_dim(dim) {
            return Err(shape_err("kernel coordinates", sym_dim(dim), coords.len()));
        }
        Self::new(smat(coords, dim), n)
    }

    pub fn identity(n: usize) -> Self {
        let dim = sym_dim(n);
        Self {
            h: DMatrix::identity(dim, dim),
            n,
        }
    }

    pub fn from_instance(inst: &SensingInstance) -> Self {
        Self {
            h: inst.gram_form(),
            n: inst.n(),
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn extreme_eigs(&self) -> (f64, f64) {
        linalg::extreme_eigs(&self.h)
    }

    /// `lambda_min / lambda_max`, the reciprocal condition number.
    pub fn eta(&self) -> f64 {
        let (lo, hi) = self.extreme_eigs();
        if hi <= 0.0 {
            0.0
        } else {
            (lo / hi).max(0.0)
        }
    }

    pub fn condition_number(&self) -> f64 {
        let (lo, hi) = self.extreme_eigs();
        if lo <= 0.0 {
            f64::INFINITY
        } else {
            hi / lo
        }
    }
}

/// `e = svec(x x^T - z z^T)`, the symmetric-product matrix `X` with
/// `X vec(u) = svec(x u^T + u x^T)`, and the maps built from them:
///
/// ```text
/// L(H) = 2 X^T H e
/// M(H) = 2 (I_r kron smat(H e)) + X^T H X
/// ```
#[derive(Clone, Debug)]
pub struct LmiOperators {
    n: usize,
    r: usize,
    x: DMatrix<f64>,
    z: DMatrix<f64>,
    e: DVector<f64>,
    xmat: DMatrix<f64>,
    degenerate: bool,
    tangent: DMatrix<f64>,
}

pub fn build_operators(x: &DMatrix<f64>, z: &DMatrix<f64>) -> Result<LmiOperators> {
    if x.shape() != z.shape() {
        return Err(shape_err("candidate point", format!("{:?}", z.shape()), format!("{:?}", x.shape())));
    }
    let (n, r) = x.shape();
    if n == 0 || r == 0 {
        return Err(Error::InvalidInput("empty factor".into()));
    }
    if x.iter().chain(z.iter()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("factors must be finite".into()));
    }
    if x.norm() == 0.0 {
        return Err(Error::Degenerate("candidate point x is zero".into()));
    }
    if z.norm() == 0.0 {
        return Err(Error::Degenerate("ground truth z is zero".into()));
    }
    let e = svec(&(x * x.transpose() - z * z.transpose()));
    let dim = sym_dim(n);
    let mut xmat = DMatrix::zeros(dim, n * r);
    for j in 0..r {
        let xj = x.column(j);
        for i in 0..n {
            let mut b = DMatrix::zeros(n, n);
            for k in 0..n {
                b[(k, i)] += xj[k];
                b[(i, k)] += xj[k];
            }
            xmat.set_column(j * n + i, &svec(&b));
        }
    }
    let scale = x.norm_squared() + z.norm_squared();
    let degenerate = e.norm() <= 1e-14 * scale;
    Ok(LmiOperators {
        n,
        r,
        x: x.clone(),
        z: z.clone(),
        e,
        xmat,
        degenerate,
        tangent: rotation_complement(x),
    })
}

impl LmiOperators {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn e(&self) -> &DVector<f64> {
        &self.e
    }

    pub fn xmat(&self) -> &DMatrix<f64> {
        &self.xmat
    }

    /// True when `x x^T = z z^T`, i.e. `e = 0` and `x` is a global minimizer.
    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    /// Orthonormal basis (`nr x p`) of the directions not generated by
    /// rotations `x -> x Q`. The identity for `r = 1`.
    pub fn tangent_basis(&self) -> &DMatrix<f64> {
        &self.tangent
    }

    fn kernel_dim(&self) -> usize {
        sym_dim(self.n)
    }

    /// Number of SDP coordinates of a kernel.
    pub fn kernel_coords(&self) -> usize {
        sym_dim(self.kernel_dim())
    }

    fn check_kernel(&self, h: &DMatrix<f64>) {
        let dim = self.kernel_dim();
        assert_eq!(h.shape(), (dim, dim), "kernel shape");
    }

    /// `L(H) = 2 X^T H e`, as `vec` of an `n x r` matrix.
    pub fn l_map(&self, h: &DMatrix<f64>) -> DVector<f64> {
        self.check_kernel(h);
        self.xmat.tr_mul(&(h * &self.e)) * 2.0
    }

    /// `L^T(y) = e (X y)^T + (X y) e^T`.
    pub fn l_adjoint(&self, y: &DVector<f64>) -> DMatrix<f64> {
        let xy = &self.xmat * y;
        &self.e * xy.transpose() + xy * self.e.transpose()
    }

    /// `smat(H e)`, symmetric `n x n`.
    pub fn mat_he(&self, h: &DMatrix<f64>) -> DMatrix<f64> {
        smat((h * &self.e).as_slice(), self.n)
    }

    /// `M(H) = 2 (I_r kron smat(H e)) + X^T H X`.
    pub fn m_map(&self, h: &DMatrix<f64>) -> DMatrix<f64> {
        self.check_kernel(h);
        let n = self.n;
        let mut m = self.xmat.tr_mul(&(h * &self.xmat));
        let he = self.mat_he(h);
        for j in 0..self.r {
            m.view_mut((j * n, j * n), (n, n)).zip_apply(&he, |t, v| *t += 2.0 * v);
        }
        linalg::symmetrize(&m)
    }

    /// `P^T M(H) P` with `P` the [`tangent_basis`](Self::tangent_basis).
    pub fn m_projected(&self, h: &DMatrix<f64>) -> DMatrix<f64> {
        linalg::symmetrize(&(self.tangent.transpose() * self.m_map(h) * &self.tangent))
    }

    /// `M^T(V) = s e^T + e s^T + X V X^T` with `s = svec(sum_j V_jj)`.
    pub fn m_adjoint(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.n;
        let nr = n * self.r;
        assert_eq!(v.shape(), (nr, nr), "M adjoint argument shape");
        let mut diag = DMatrix::zeros(n, n);
        for j in 0..self.r {
            diag += v.view((j * n, j * n), (n, n));
        }
        let s = svec(&diag);
        let out = &s * self.e.transpose() + &self.e * s.transpose() + &self.xmat * v * self.xmat.transpose();
        linalg::symmetrize(&out)
    }

    /// Rows `svec(L^T(e_k))`: `L(H)_k = row_k . svec(H)`.
    pub fn l_rows(&self) -> DMatrix<f64> {
        let nr = self.n * self.r;
        let mut rows = DMatrix::zeros(nr, self.kernel_coords());
        for k in 0..nr {
            let mut y = DVector::zeros(nr);
            y[k] = 1.0;
            rows.set_row(k, &svec(&self.l_adjoint(&y)).transpose());
        }
        rows
    }

    /// Coefficient matrix of `H -> svec(P^T M(H) P)` acting on `svec(H)`.
    pub fn m_rows(&self) -> DMatrix<f64> {
        let p = &self.tangent;
        let q = p.ncols();
        let pairs = index_pairs(q);
        let mut rows = DMatrix::zeros(pairs.len(), self.kernel_coords());
        for s in 0..pairs.len() {
            let v = p * basis_matrix(q, s) * p.transpose();
            rows.set_row(s, &svec(&self.m_adjoint(&v)).transpose());
        }
        rows
    }

    /// Orthonormal basis of the row space of [`l_rows`](Self::l_rows).
    fn l_row_space(&self) -> DMatrix<f64> {
        let rows = self.l_rows();
        let gram = &rows * rows.transpose();
        let (vals, vecs) = linalg::sorted_eigen(&gram);
        let top = vals.iter().copied().fold(0.0_f64, f64::max);
        let keep: Vec<usize> = (0..vals.len()).filter(|&i| top > 0.0 && vals[i] > 1e-12 * top).collect();
        let mut q = DMatrix::zeros(rows.ncols(), keep.len());
        for (dst, &i) in keep.iter().enumerate() {
            let col = rows.tr_mul(&vecs.column(i).into_owned()) / vals[i].sqrt();
            q.set_column(dst, &col);
        }
        q
    }

    /// Orthogonal projection of a kernel onto `{H : L(H) = 0}`.
    pub fn polish(&self, h: &DMatrix<f64>) -> DMatrix<f64> {
        let q = self.l_row_space();
        let mut coords = svec(h);
        if q.ncols() > 0 {
            let c = q.tr_mul(&coords);
            coords.gemv(-1.0, &q, &c, 1.0);
        }
        smat(coords.as_slice(), self.kernel_dim())
    }

    fn degenerate_warning(&self) -> Option<String> {
        self.degenerate.then(|| {
            "error vector is zero: x x^T = z z^T, so x is a global minimizer and cannot be spurious".to_string()
        })
    }

    fn equalities(&self, dim: usize) -> Vec<LinearConstraint> {
        let rows = self.l_rows();
        (0..rows.nrows())
            .map(|k| {
                let mut coeffs = DVector::zeros(dim);
                coeffs.rows_mut(0, rows.ncols()).copy_from(&rows.row(k).transpose());
                LinearConstraint { coeffs, rhs: 0.0 }
            })
            .collect()
    }
}

fn half_identity_start(ops: &LmiOperators, dim: usize) -> DVector<f64> {
    let kdim = ops.kernel_dim();
    let mut start = DVector::zeros(dim);
    start
        .rows_mut(0, ops.kernel_coords())
        .copy_from(&svec(&(DMatrix::identity(kdim, kdim) * 0.5)));
    start
}

fn m_block(ops: &LmiOperators, mu: f64) -> ConeBlock {
    let p = ops.tangent.ncols();
    ConeBlock::new("M(H) - mu I", p)
        .with_constant(DMatrix::identity(p, p) * (-mu))
        .dense_term(0, ops.m_rows())
}

fn check_mu(mu: f64) -> Result<()> {
    if !(mu >= 0.0) || !mu.is_finite() {
        return Err(Error::InvalidInput(format!("mu must be finite and nonnegative, got {mu}")));
    }
    Ok(())
}

/// Find `H` with `L(H) = 0`, `M(H) >= mu I`, `H >= 0`. The feasible set is a
/// cone, so `H <= FEASIBILITY_CAP * I` is added to keep it bounded.
pub fn assemble_feasibility(ops: &LmiOperators, mu: f64) -> Result<SdpProblem> {
    check_mu(mu)?;
    let kdim = ops.kernel_dim();
    let dim = ops.kernel_coords();
    let mut p = SdpProblem::new(dim);
    p.equalities = ops.equalities(dim);
    p.blocks.push(ConeBlock::new("H", kdim).identity_term(0, 1.0));
    p.blocks.push(m_block(ops, mu));
    p.blocks.push(
        ConeBlock::new("cap I - H", kdim)
            .with_constant(DMatrix::identity(kdim, kdim) * FEASIBILITY_CAP)
            .identity_term(0, -1.0),
    );
    p.start = half_identity_start(ops, dim);
    p.warnings.extend(ops.degenerate_warning());
    Ok(p)
}

fn opt_problem(ops: &LmiOperators, mu: Option<f64>) -> SdpProblem {
    let kdim = ops.kernel_dim();
    let nh = ops.kernel_coords();
    let dim = nh + 1;
    let mut p = SdpProblem::new(dim);
    p.equalities = ops.equalities(dim);
    p.blocks.push(
        ConeBlock::new("H - eta I", kdim)
            .identity_term(0, 1.0)
            .scalar_term(nh, &(-DMatrix::identity(kdim, kdim))),
    );
    p.blocks.push(
        ConeBlock::new("I - H", kdim)
            .with_constant(DMatrix::identity(kdim, kdim))
            .identity_term(0, -1.0),
    );
    // H >= eta I together with eta >= 0 gives H >= 0.
    p.blocks.push(ConeBlock::new("eta", 1).scalar_term(nh, &DMatrix::from_element(1, 1, 1.0)));
    if let Some(mu) = mu {
        p.blocks.push(m_block(ops, mu));
    }
    p.objective[nh] = 1.0;
    p.start = half_identity_start(ops, dim);
    p.start[nh] = 0.25;
    p.warnings.extend(ops.degenerate_warning());
    p
}

/// Maximize `eta` subject to `eta I <= H <= I`, `L(H) = 0`, `M(H) >= mu I`.
/// The last variable is `eta`.
pub fn assemble_opt(ops: &LmiOperators, mu: f64) -> Result<SdpProblem> {
    check_mu(mu)?;
    Ok(opt_problem(ops, Some(mu)))
}

/// [`assemble_opt`] without the second-order constraint: the best-conditioned
/// kernel making `x` a first-order critical point.
pub fn assemble_opt_first_order(ops: &LmiOperators) -> SdpProblem {
    opt_problem(ops, None)
}

/// Orthonormal basis of `range([x, z])`.
pub fn orthonormal_subspace(x: &DMatrix<f64>, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.nrows() != z.nrows() {
        return Err(shape_err("subspace factors", x.nrows(), z.nrows()));
    }
    let mut stacked = DMatrix::zeros(x.nrows(), x.ncols() + z.ncols());
    stacked.columns_mut(0, x.ncols()).copy_from(x);
    stacked.columns_mut(x.ncols(), z.ncols()).copy_from(z);
    let q = linalg::column_space(&stacked, 1e-12);
    if q.ncols() < stacked.ncols() {
        return Err(Error::Degenerate(format!(
            "[x, z] has rank {} < {} after orthonormalization",
            q.ncols(),
            stacked.ncols()
        )));
    }
    Ok(q)
}

/// Minimize `delta` subject to `L(H) = 0`, `M(H) >= 0`, `H >= 0` and
/// `(1 - delta) I <= W^T H W <= (1 + delta) I`, where `W` maps symmetric
/// `k x k` matrices `Y` to `svec(U Y U^T)` (so `W^T W = I`). The last
/// variable is `delta`; the objective is `-delta`.
pub fn assemble_delta_lb(ops: &LmiOperators, u: &DMatrix<f64>) -> Result<SdpProblem> {
    let n = ops.n();
    if u.nrows() != n || u.ncols() == 0 || u.ncols() > n {
        return Err(shape_err("subspace basis", format!("{n}xk with 1<=k<={n}"), format!("{:?}", u.shape())));
    }
    let defect = linalg::orthonormality_defect(u);
    if defect > 1e-10 {
        return Err(Error::NotOrthonormal(defect));
    }
    let kdim = ops.kernel_dim();
    let nh = ops.kernel_coords();
    let dim = nh + 1;
    let w = congruence_rows(u).transpose();
    let ksize = w.ncols();
    let band = congruence_rows(&w);
    let ident = DMatrix::identity(ksize, ksize);

    let mut p = SdpProblem::new(dim);
    p.equalities = ops.equalities(dim);
    p.blocks.push(
        ConeBlock::new("W^T H W - (1 - delta) I", ksize)
            .with_constant(-&ident)
            .dense_term(0, band.clone())
            .scalar_term(nh, &ident),
    );
    p.blocks.push(
        ConeBlock::new("(1 + delta) I - W^T H W", ksize)
            .with_constant(ident.clone())
            .dense_term(0, -band)
            .scalar_term(nh, &ident),
    );
    p.blocks.push(ConeBlock::new("H", kdim).identity_term(0, 1.0));
    p.blocks.push(m_block(ops, 0.0));
    if ksize < kdim {
        p.blocks.push(
            ConeBlock::new("cap I - H", kdim)
                .with_constant(DMatrix::identity(kdim, kdim) * DELTA_LB_CAP)
                .identity_term(0, -1.0),
        );
    }
    p.objective[nh] = -1.0;
    p.start = half_identity_start(ops, dim);
    p.start[nh] = 1.0;
    p.warnings.extend(ops.degenerate_warning());
    Ok(p)
}

/// Restricted-RIP lower bound by solving [`assemble_delta_lb`] directly.
pub fn delta_lb(ops: &LmiOperators, u: &DMatrix<f64>, opts: &SolveOptions) -> Result<f64> {
    let problem = assemble_delta_lb(ops, u)?;
    let sol = sdp::solve(&problem, opts)?;
    accept_solution(&sol, opts.tol)?;
    Ok(-sol.objective)
}

/// Restricted-RIP lower bound by bisection on `delta` over `[0, 1]`, one
/// feasibility problem per step.
pub fn delta_lb_bisection(ops: &LmiOperators, u: &DMatrix<f64>, iterations: usize, tol: f64) -> Result<f64> {
    let base = assemble_delta_lb(ops, u)?;
    let nh = ops.kernel_coords();
    let feasible_at = |delta: f64| -> Result<bool> {
        let mut p = base.clone();
        let mut coeffs = DVector::zeros(p.dim);
        coeffs[nh] = 1.0;
        p.equalities.push(LinearConstraint { coeffs, rhs: delta });
        p.objective.fill(0.0);
        p.start[nh] = delta;
        Ok(sdp::feasibility(&p, 0.0, tol)?.is_feasible())
    };
    let (mut lo, mut hi) = (0.0, 1.0);
    if feasible_at(lo)? {
        return Ok(lo);
    }
    for _ in 0..iterations {
        let mid = 0.5 * (lo + hi);
        if feasible_at(mid)? {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Accept an SDP result whose residuals are small even if the iteration cap
/// was hit before the gap closed.
pub(crate) fn accept_solution(sol: &SdpSolution, tol: f64) -> Result<()> {
    match sol.status {
        SdpStatus::Optimal => Ok(()),
        SdpStatus::Infeasible => Err(Error::Solver(format!(
            "problem reported infeasible (margin {:?})",
            sol.infeasibility_margin
        ))),
        SdpStatus::MaxIterations => {
            let loose = 1e3 * tol;
            if sol.equality_residual <= loose && sol.min_cone_eig >= -loose && sol.relative_gap <= loose {
                log::warn!(
                    "accepting SDP iterate after {} iterations (gap {:.2e})",
                    sol.iterations,
                    sol.relative_gap
                );
                Ok(())
            } else {
                Err(Error::Solver(format!(
                    "no convergence in {} iterations: gap {:.2e}, equality residual {:.2e}, min cone eigenvalue {:.2e}",
                    sol.iterations, sol.relative_gap, sol.equality_residual, sol.min_cone_eig
                )))
            }
        }
    }
}

/// Factor a kernel into measurements: with `H = sum_i lambda_i v_i v_i^T`,
/// each retained eigenpair gives `A_i = smat(sqrt(lambda_i) v_i)`.
/// Eigenvalues below `rank_tol * lambda_max` are dropped.
pub fn factor_kernel(kernel: &KernelMatrix, z: &DMatrix<f64>, rank_tol: f64) -> Result<SensingInstance> {
    if z.nrows() != kernel.n() {
        return Err(shape_err("ground truth", kernel.n(), z.nrows()));
    }
    let (vals, vecs) = linalg::sorted_eigen(kernel.matrix());
    let top = vals.iter().copied().fold(0.0_f64, f64::max);
    let low = vals.iter().copied().fold(f64::INFINITY, f64::min);
    if top <= 0.0 {
        return Err(Error::Degenerate("kernel has no positive eigenvalue".into()));
    }
    if low < -1e-10 * top {
        return Err(Error::Indefinite {
            min_eig: low,
            tol: 1e-10 * top,
        });
    }
    let mats = (0..vals.len())
        .rev()
        .filter(|&i| vals[i] > rank_tol * top)
        .map(|i| smat((vecs.column(i) * vals[i].sqrt()).as_slice(), kernel.n()))
        .collect();
    SensingInstance::new(mats, z.clone())
}

#[derive(Clone, Debug)]
pub struct ForgeOptions {
    /// Margin in `M(H) >= mu I`; the Hessian margin is `2 mu`.
    pub mu: f64,
    pub solve: SolveOptions,
    pub rank_tol: f64,
}

impl ForgeOptions {
    /// `mu = 1e-3 ||z||^2`.
    pub fn for_ground_truth(z: &DMatrix<f64>) -> Self {
        Self {
            mu: 1e-3 * z.norm_squared(),
            solve: SolveOptions::default(),
            rank_tol: 1e-10,
        }
    }
}

/// A forged instance: the kernel (scaled so its smallest eigenvalue is 1),
/// its conditioning, the factored measurements and the certificate of the
/// spurious point `x`. `mu` is the margin at that scale.
#[derive(Clone, Debug)]
pub struct ForgeResult {
    pub kernel: KernelMatrix,
    pub eta: f64,
    pub delta_n: f64,
    pub instance: SensingInstance,
    pub x: DMatrix<f64>,
    pub mu: f64,
    pub certificate: CriticalityCertificate,
}

#[derive(Serialize, Deserialize)]
struct ForgeJson {
    instance: SensingInstance,
    /// Column-major `n x r`.
    x: Vec<f64>,
    mu: f64,
    eta: f64,
    delta_n: f64,
    certificate: CriticalityCertificate,
}

impl ForgeResult {
    pub fn to_json(&self) -> Result<String> {
        let j = ForgeJson {
            instance: self.instance.clone(),
            x: self.x.as_slice().to_vec(),
            mu: self.mu,
            eta: self.eta,
            delta_n: self.delta_n,
            certificate: self.certificate.clone(),
        };
        Ok(serde_json::to_string_pretty(&j)?)
    }

    /// Parse and re-check: the kernel is rebuilt from the measurements and
    /// must reproduce `eta`, and the stored certificate must still hold.
    pub fn from_json(s: &str) -> Result<Self> {
        let j: ForgeJson = serde_json::from_str(s)?;
        let inst = j.instance;
        if j.x.len() != inst.n() * inst.r() {
            return Err(shape_err("forged point", inst.n() * inst.r(), j.x.len()));
        }
        let x = DMatrix::from_column_slice(inst.n(), inst.r(), &j.x);
        let kernel = KernelMatrix::new(inst.gram_form(), inst.n())?;
        if (kernel.eta() - j.eta).abs() > 1e-8 {
            return Err(Error::InvalidInstance(format!(
                "stored eta {} does not match kernel ({})",
                j.eta,
                kernel.eta()
            )));
        }
        if (delta_from_eta(j.eta) - j.delta_n).abs() > 1e-14 {
            return Err(Error::InvalidInstance("delta_n is inconsistent with eta".into()));
        }
        let cert = inst.certify(&x, j.mu, &CertifyTolerances::default_for(&inst))?;
        if cert.verdict != j.certificate.verdict {
            return Err(Error::Certification(format!(
                "stored verdict {:?} but re-certification gives {:?}",
                j.certificate.verdict, cert.verdict
            )));
        }
        Ok(Self {
            kernel,
            eta: j.eta,
            delta_n: j.delta_n,
            instance: inst,
            x,
            mu: j.mu,
            certificate: j.certificate,
        })
    }
}

/// Solve the `eta`-maximization for `(x, z)`, project the kernel exactly onto
/// `L(H) = 0`, factor it, and certify `x` (spurious) and `z` (global).
pub fn forge(x: &DMatrix<f64>, z: &DMatrix<f64>, opts: &ForgeOptions) -> Result<ForgeResult> {
    let ops = build_operators(x, z)?;
    if ops.is_degenerate() {
        return Err(Error::Degenerate("x x^T = z z^T; nothing to forge".into()));
    }
    let problem = assemble_opt(&ops, opts.mu)?;
    let sol = sdp::solve(&problem, &opts.solve)?;
    accept_solution(&sol, opts.solve.tol)?;
    let nh = ops.kernel_coords();
    let raw = smat(&sol.x.as_slice()[..nh], ops.kernel_dim());
    let polished = ops.polish(&raw);
    // Normalize so that ||A(X)||^2 >= ||X||^2 with equality attained; the
    // margin scales with the kernel.
    let scale = 1.0 / KernelMatrix::new(polished.clone(), ops.n())?.extreme_eigs().0;
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::Solver("forged kernel is singular".into()));
    }
    let kernel = KernelMatrix::new(polished * scale, ops.n())?;
    let mu = opts.mu * scale;
    let instance = factor_kernel(&kernel, z, opts.rank_tol)?;
    let eta = KernelMatrix::from_instance(&instance).eta();
    let delta_n = delta_from_eta(eta);
    let tol = CertifyTolerances::default_for(&instance);
    let certificate = instance.certify(x, mu, &tol)?;
    let wanted = if mu > 0.0 {
        certificate.verdict == Verdict::StrictLocalMin
    } else {
        matches!(certificate.verdict, Verdict::StrictLocalMin | Verdict::SecondOrderCritical)
    };
    if !wanted {
        return Err(Error::Certification(format!(
            "forged point certified as {:?} (gradient {:.2e}, Hessian min eigenvalue {:.2e})",
            certificate.verdict, certificate.gradient_norm, certificate.hessian_min_eig
        )));
    }
    let at_z = instance.certify(z, 0.0, &tol)?;
    if at_z.verdict != Verdict::GlobalMin {
        return Err(Error::Certification(format!("ground truth certified as {:?}", at_z.verdict)));
    }
    log::info!(
        "forged n={} r={}: eta={eta:.6}, delta={delta_n:.6}, sdp eta={:.6}, {} iterations",
        ops.n(),
        ops.r(),
        sol.objective,
        sol.iterations
    );
    Ok(ForgeResult {
        kernel,
        eta,
        delta_n,
        instance,
        x: x.clone(),
        mu,
        certificate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::example1_instance;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
    }

    fn random_psd(rng: &mut ChaCha8Rng, dim: usize) -> DMatrix<f64> {
        let g = gaussian(rng, dim, dim);
        &g * g.transpose()
    }

    fn col(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(v.len(), 1, v)
    }

    fn example1_xz() -> (DMatrix<f64>, DMatrix<f64>) {
        (col(&[0.0, 1.0 / 2f64.sqrt()]), col(&[1.0, 0.0]))
    }

    #[test]
    fn xmat_expands_symmetric_product() {
        let ops = build_operators(&col(&[1.0, 0.0]), &col(&[0.0, 1.0])).unwrap();
        let u = DVector::from_vec(vec![0.7, -1.3]);
        let got = smat((ops.xmat() * &u).as_slice(), 2);
        let expected = DMatrix::from_row_slice(2, 2, &[2.0 * 0.7, -1.3, -1.3, 0.0]);
        assert!((got - expected).amax() < 1e-15);
    }

    #[test]
    fn xmat_matches_definition_for_rank_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = gaussian(&mut rng, 3, 2);
        let ops = build_operators(&x, &gaussian(&mut rng, 3, 2)).unwrap();
        let u = gaussian(&mut rng, 3, 2);
        let direct = svec(&(&x * u.transpose() + &u * x.transpose()));
        let via = ops.xmat() * DVector::from_column_slice(u.as_slice());
        assert!((direct - via).amax() < 1e-13);
    }

    #[test]
    fn zero_error_at_ground_truth() {
        let z = col(&[0.3, -1.2, 0.5]);
        let ops = build_operators(&z, &z).unwrap();
        assert_eq!(ops.e().amax(), 0.0);
        assert!(ops.is_degenerate());
        let p = assemble_feasibility(&ops, 0.1).unwrap();
        assert_eq!(p.warnings.len(), 1);
    }

    #[test]
    fn zero_inputs_are_rejected() {
        let z = col(&[1.0, 0.0]);
        assert!(matches!(build_operators(&col(&[0.0, 0.0]), &z), Err(Error::Degenerate(_))));
        assert!(matches!(build_operators(&z, &col(&[0.0, 0.0])), Err(Error::Degenerate(_))));
        assert!(build_operators(&z, &col(&[1.0, 0.0, 0.0])).is_err());
    }

    #[test]
    fn l_of_identity_is_canonical_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = gaussian(&mut rng, 3, 2);
        let z = gaussian(&mut rng, 3, 2);
        let ops = build_operators(&x, &z).unwrap();
        let dim = sym_dim(3);
        let l = ops.l_map(&DMatrix::identity(dim, dim));
        assert!((&l - ops.xmat().tr_mul(ops.e()) * 2.0).amax() < 1e-13);
        // g(x) = ||x x^T - z z^T||_F^2 has gradient 4 (x x^T - z z^T) x.
        let grad_g = (&x * x.transpose() - &z * z.transpose()) * &x * 4.0;
        let half = ops.xmat().tr_mul(ops.e());
        assert!((half - DVector::from_column_slice(grad_g.as_slice()) / 2.0).amax() < 1e-12);
    }

    #[test]
    fn adjoint_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for r in [1, 2] {
            let ops = build_operators(&gaussian(&mut rng, 3, r), &gaussian(&mut rng, 3, r)).unwrap();
            let dim = sym_dim(3);
            for _ in 0..10 {
                let g = gaussian(&mut rng, dim, dim);
                let h = (&g + g.transpose()) * 0.5;
                let y = DVector::from_iterator(3 * r, (0..3 * r).map(|_| rng.sample(StandardNormal)));
                let lhs = ops.l_map(&h).dot(&y);
                let rhs = h.dot(&ops.l_adjoint(&y));
                assert!((lhs - rhs).abs() < 1e-12 * (1.0 + lhs.abs()));
                let v = gaussian(&mut rng, 3 * r, 3 * r);
                let v = (&v + v.transpose()) * 0.5;
                let lhs = ops.m_map(&h).dot(&v);
                let rhs = h.dot(&ops.m_adjoint(&v));
                assert!((lhs - rhs).abs() < 1e-12 * (1.0 + lhs.abs()));
            }
        }
    }

    #[test]
    fn coefficient_rows_match_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let ops = build_operators(&gaussian(&mut rng, 3, 2), &gaussian(&mut rng, 3, 2)).unwrap();
        let h = random_psd(&mut rng, sym_dim(3));
        let coords = svec(&h);
        assert!((ops.l_rows() * &coords - ops.l_map(&h)).amax() < 1e-11);
        let proj = ops.m_projected(&h);
        assert_eq!(proj.nrows(), 5);
        assert!((ops.m_rows() * &coords - svec(&proj)).amax() < 1e-11);
    }

    #[test]
    fn gradient_and_hessian_agree_with_kernel_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for r in [1, 2] {
            let mats = (0..9)
                .map(|_| {
                    let g = gaussian(&mut rng, 4, 4);
                    (&g + g.transpose()) * 0.5
                })
                .collect();
            let inst = SensingInstance::new(mats, gaussian(&mut rng, 4, r)).unwrap();
            let x = gaussian(&mut rng, 4, r);
            let ops = build_operators(&x, inst.z()).unwrap();
            let h = inst.gram_form();
            let grad = inst.gradient(&x).unwrap();
            let l = ops.l_map(&h);
            assert!((DVector::from_column_slice(grad.as_slice()) - &l).amax() <= 1e-12 * l.amax());
            let hess = inst.hessian(&x).unwrap();
            let m2 = ops.m_map(&h) * 2.0;
            assert!((&hess - &m2).amax() <= 1e-12 * m2.amax());
            let e = ops.e();
            let quad = (e.transpose() * &h * e)[0];
            let f = inst.objective_value(&x).unwrap();
            assert!((quad - f).abs() <= 1e-12 * f);
        }
    }

    /// The same maps in the n^2-dimensional space of all matrices, with the
    /// kernel extended by the identity on skew-symmetric directions.
    #[test]
    fn skew_extension_preserves_maps_and_conditioning() {
        let (x, z) = (col(&[0.4, 0.9]), col(&[1.0, -0.2]));
        let ops = build_operators(&x, &z).unwrap();
        let n = 2;
        let dim = sym_dim(n);
        // Q: vec (column-major n^2) <- symmetric coordinates, orthonormal columns.
        let mut q = DMatrix::zeros(n * n, dim);
        for k in 0..dim {
            let b = basis_matrix(n, k);
            q.set_column(k, &DVector::from_column_slice(b.as_slice()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let h = random_psd(&mut rng, dim);
        let (lo, hi) = linalg::extreme_eigs(&h);
        // Spectrum inside [eta, 1] containing 1 so the extension keeps cond.
        let h = (h - DMatrix::identity(dim, dim) * lo) * (0.6 / (hi - lo)) + DMatrix::identity(dim, dim) * 0.4;
        let top = linalg::extreme_eigs(&h).1;
        let h = h / top;
        let full = &q * &h * q.transpose() + (DMatrix::identity(n * n, n * n) - &q * q.transpose());

        let e_full = DVector::from_column_slice((&x * x.transpose() - &z * z.transpose()).as_slice());
        let mut x_full = DMatrix::zeros(n * n, n);
        for i in 0..n {
            let mut u = DMatrix::zeros(n, 1);
            u[i] = 1.0;
            let s = &x * u.transpose() + &u * x.transpose();
            x_full.set_column(i, &DVector::from_column_slice(s.as_slice()));
        }
        let l_full = x_full.tr_mul(&(&full * &e_full)) * 2.0;
        assert!((l_full - ops.l_map(&h)).amax() < 1e-12);
        let he = &full * &e_full;
        let mat = DMatrix::from_column_slice(n, n, he.as_slice());
        let m_full = mat.transpose() * 2.0 + x_full.tr_mul(&(&full * &x_full));
        assert!((m_full - ops.m_map(&h)).amax() < 1e-12);
        let cond_full = {
            let (a, b) = linalg::extreme_eigs(&full);
            b / a
        };
        let cond = KernelMatrix::new(h, n).unwrap().condition_number();
        assert!((cond_full - cond).abs() < 1e-10 * cond);
    }

    #[test]
    fn example1_kernel_is_feasible_point() {
        let inst = example1_instance();
        let (x, z) = example1_xz();
        let ops = build_operators(&x, &z).unwrap();
        let h = inst.gram_form();
        assert!(ops.l_map(&h).amax() < 1e-12);
        assert!(linalg::min_eig(&ops.m_map(&h)) > -1e-12);
        let p = assemble_feasibility(&ops, 0.0).unwrap();
        let y = svec(&h);
        assert!(p.equality_residual(&y) < 1e-12);
        assert!(p.min_cone_eig(&y) > -1e-12);
    }

    #[test]
    fn example1_feasibility_and_optimum() {
        let (x, z) = example1_xz();
        let ops = build_operators(&x, &z).unwrap();
        let p = assemble_feasibility(&ops, 0.0).unwrap();
        assert!(sdp::feasibility(&p, 0.0, 1e-8).unwrap().is_feasible());
        let sol = sdp::solve(&assemble_opt(&ops, 1e-6).unwrap(), &SolveOptions::default()).unwrap();
        assert_eq!(sol.status, SdpStatus::Optimal);
        assert!(sol.objective >= 1.0 / 3.0 - 1e-6);
        assert!(delta_from_eta(sol.objective) <= 0.5 + 1e-4);
    }

    #[test]
    fn ground_truth_feasibility_with_positive_mu() {
        let z = col(&[1.0, 0.5, -0.3]);
        let ops = build_operators(&z, &z).unwrap();
        let p = assemble_feasibility(&ops, 0.1).unwrap();
        assert!(!p.warnings.is_empty());
        assert!(sdp::feasibility(&p, 0.0, 1e-8).unwrap().is_feasible());
    }

    #[test]
    fn factor_identity_kernel_is_isometry() {
        let inst = factor_kernel(&KernelMatrix::identity(3), &col(&[1.0, 2.0, 3.0]), 1e-10).unwrap();
        assert_eq!(inst.m(), 6);
        assert!(inst.rip_full().delta_full.abs() < 1e-12);
    }

    #[test]
    fn factor_example1_kernel_round_trips() {
        let inst = example1_instance();
        let kernel = KernelMatrix::from_instance(&inst);
        let back = factor_kernel(&kernel, inst.z(), 1e-10).unwrap();
        let diff = (back.gram_form() - inst.gram_form()).norm() / inst.gram_form().norm();
        assert!(diff < 1e-8);
        assert!((back.rip_full().delta_full - 0.5).abs() < 1e-10);
    }

    #[test]
    fn factor_random_kernel_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let n = 3;
        let h = random_psd(&mut rng, sym_dim(n));
        let kernel = KernelMatrix::new(h.clone(), n).unwrap();
        let inst = factor_kernel(&kernel, &col(&[1.0, 0.0, 0.0]), 1e-10).unwrap();
        let (lo, hi) = linalg::extreme_eigs(&h);
        let rip = inst.rip_full();
        assert!((rip.lambda_min - lo).abs() < 1e-8 * hi);
        assert!((rip.lambda_max - hi).abs() < 1e-8 * hi);
        for a in inst.measurements() {
            assert_eq!(a, &a.transpose());
        }
    }

    #[test]
    fn indefinite_kernel_is_rejected() {
        let mut h = DMatrix::identity(3, 3);
        h[(1, 1)] = -0.5;
        assert!(matches!(KernelMatrix::new(h, 2), Err(Error::Indefinite { .. })));
        assert!(KernelMatrix::new(DMatrix::identity(4, 4), 2).is_err());
    }

    #[test]
    fn polish_projects_onto_null_space() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let ops = build_operators(&gaussian(&mut rng, 3, 2), &gaussian(&mut rng, 3, 2)).unwrap();
        let h = random_psd(&mut rng, sym_dim(3));
        let p = ops.polish(&h);
        assert!(ops.l_map(&p).amax() < 1e-12 * h.amax());
        let pp = ops.polish(&p);
        assert!((pp - &p).amax() < 1e-12 * h.amax());
    }

    #[test]
    fn delta_lb_with_full_subspace_matches_delta_ub() {
        let (x, z) = example1_xz();
        let ops = build_operators(&x, &z).unwrap();
        let opts = SolveOptions::default();
        let ub = sdp::solve(&assemble_opt(&ops, 0.0).unwrap(), &opts).unwrap();
        let delta_ub = delta_from_eta(ub.objective);
        let u = DMatrix::identity(2, 2);
        let lb = delta_lb(&ops, &u, &opts).unwrap();
        assert!((lb - delta_ub).abs() < 1e-6, "{lb} vs {delta_ub}");
        let u = orthonormal_subspace(&x, &z).unwrap();
        let lb2 = delta_lb(&ops, &u, &opts).unwrap();
        assert!(lb2 >= 0.5 - 1e-3);
    }

    #[test]
    fn delta_lb_bisection_agrees_with_direct_solve() {
        let (x, z) = example1_xz();
        let ops = build_operators(&x, &z).unwrap();
        let u = orthonormal_subspace(&x, &z).unwrap();
        let bis = delta_lb_bisection(&ops, &u, 40, 1e-9).unwrap();
        assert!((0.49..=0.51).contains(&bis), "{bis}");
        let direct = delta_lb(&ops, &u, &SolveOptions::default()).unwrap();
        assert!((bis - direct).abs() < 1e-4, "{bis} vs {direct}");
    }

    #[test]
    fn delta_lb_below_delta_ub_on_random_geometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let (x, z) = (gaussian(&mut rng, 3, 1), gaussian(&mut rng, 3, 1));
        let ops = build_operators(&x, &z).unwrap();
        let opts = SolveOptions::default();
        let ub = delta_from_eta(sdp::solve(&assemble_opt(&ops, 0.0).unwrap(), &opts).unwrap().objective);
        let u = orthonormal_subspace(&x, &z).unwrap();
        let lb = delta_lb(&ops, &u, &opts).unwrap();
        assert!(lb <= ub + 1e-6, "{lb} vs {ub}");
    }

    #[test]
    fn rank_deficient_subspace_is_rejected() {
        let x = col(&[1.0, 2.0]);
        assert!(orthonormal_subspace(&x, &(&x * 3.0)).is_err());
        let ops = build_operators(&x, &col(&[0.0, 1.0])).unwrap();
        assert!(matches!(
            assemble_delta_lb(&ops, &col(&[1.0, 1.0])),
            Err(Error::NotOrthonormal(_))
        ));
    }

    #[test]
    fn forge_small_instance_and_round_trip_json() {
        let (x, z) = example1_xz();
        let res = forge(&x, &z, &ForgeOptions::for_ground_truth(&z)).unwrap();
        assert_eq!(res.certificate.verdict, Verdict::StrictLocalMin);
        assert!(res.delta_n <= 0.5 + 1e-3);
        assert!((res.instance.rip_full().delta_full - res.delta_n).abs() < 1e-6);
        assert_eq!(res.delta_n, delta_from_eta(res.eta));
        let back = ForgeResult::from_json(&res.to_json().unwrap()).unwrap();
        assert_eq!(back.instance, res.instance);
        assert_eq!(back.certificate, res.certificate);
    }

    #[test]
    fn forge_rank_two_certifies() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let z = gaussian(&mut rng, 4, 2);
        let x = gaussian(&mut rng, 4, 2) * 1.5;
        let res = forge(&x, &z, &ForgeOptions::for_ground_truth(&z)).unwrap();
        assert_eq!(res.certificate.verdict, Verdict::StrictLocalMin);
        assert!(res.certificate.hessian_min_eig >= 2.0 * res.mu - 1e-6);
        assert!(res.delta_n < 1.0);
        let grad = res.instance.gradient(&x).unwrap().norm();
        assert!(grad <= 1e-8 * (1.0 + res.instance.b().norm()));
    }
}
