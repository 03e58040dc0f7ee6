//! Small dense semidefinite programs in linear-matrix-inequality form:
//!
//! ```text
//! maximize    c^T y
//! subject to  a_j^T y = b_j                    (equalities)
//!             C_k + F_k(y)  is PSD             (cone blocks)
//! ```
//!
//! Each block's linear part `F_k` is a sum of terms acting on a contiguous
//! range of variables, either as "the variables are the symmetric coordinates
//! of the block" (identity terms) or as a dense coefficient matrix.
//!
//! The solver is an infeasible-start primal-dual path-following method with
//! the HKM search direction and Mehrotra's predictor-corrector. Slack
//! matrices are iterated separately, so the starting point only needs to be
//! deterministic, not feasible. Equalities are orthonormalized once and the
//! start is projected onto them, so iterates stay on the affine set.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::linalg::{self, BlockedCholesky};
use crate::symbasis::{smat, svec, sym_dim, sym_kron};

#[derive(Clone, Debug)]
pub enum TermCoeffs {
    /// Variables are the symmetric coordinates of the block, times a scale.
    Identity(f64),
    /// Column `j` holds the symmetric coordinates of the coefficient matrix
    /// of variable `offset + j`.
    Dense(DMatrix<f64>),
}

#[derive(Clone, Debug)]
pub struct BlockTerm {
    pub offset: usize,
    pub coeffs: TermCoeffs,
}

impl BlockTerm {
    fn width(&self, svec_len: usize) -> usize {
        match &self.coeffs {
            TermCoeffs::Identity(_) => svec_len,
            TermCoeffs::Dense(m) => m.ncols(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ConeBlock {
    pub label: String,
    pub size: usize,
    pub constant: DMatrix<f64>,
    pub terms: Vec<BlockTerm>,
}

impl ConeBlock {
    pub fn new(label: impl Into<String>, size: usize) -> Self {
        Self {
            label: label.into(),
            size,
            constant: DMatrix::zeros(size, size),
            terms: Vec::new(),
        }
    }

    pub fn with_constant(mut self, constant: DMatrix<f64>) -> Self {
        self.constant = constant;
        self
    }

    pub fn identity_term(mut self, offset: usize, scale: f64) -> Self {
        self.terms.push(BlockTerm {
            offset,
            coeffs: TermCoeffs::Identity(scale),
        });
        self
    }

    pub fn dense_term(mut self, offset: usize, coeffs: DMatrix<f64>) -> Self {
        self.terms.push(BlockTerm {
            offset,
            coeffs: TermCoeffs::Dense(coeffs),
        });
        self
    }

    /// Adds `y[var] * coeff` to the block.
    pub fn scalar_term(self, var: usize, coeff: &DMatrix<f64>) -> Self {
        let col = svec(coeff);
        let n = col.len();
        self.dense_term(var, DMatrix::from_column_slice(n, 1, col.as_slice()))
    }

    fn svec_len(&self) -> usize {
        sym_dim(self.size)
    }

    /// Symmetric coordinates of the linear part at `y`.
    fn linear_svec(&self, y: &DVector<f64>) -> DVector<f64> {
        let len = self.svec_len();
        let mut out = DVector::zeros(len);
        for t in &self.terms {
            match &t.coeffs {
                TermCoeffs::Identity(s) => out.axpy(*s, &y.rows(t.offset, len), 1.0),
                TermCoeffs::Dense(m) => out.gemv(1.0, m, &y.rows(t.offset, m.ncols()), 1.0),
            }
        }
        out
    }

    fn linear(&self, y: &DVector<f64>) -> DMatrix<f64> {
        smat(self.linear_svec(y).as_slice(), self.size)
    }

    /// `C + F(y)`.
    pub fn eval(&self, y: &DVector<f64>) -> DMatrix<f64> {
        &self.constant + self.linear(y)
    }

    /// `out += F^T(Z)`.
    fn adjoint_add(&self, z: &DMatrix<f64>, out: &mut DVector<f64>) {
        let zv = svec(z);
        for t in &self.terms {
            match &t.coeffs {
                TermCoeffs::Identity(s) => {
                    let len = zv.len();
                    out.rows_mut(t.offset, len).axpy(*s, &zv, 1.0);
                }
                TermCoeffs::Dense(m) => {
                    out.rows_mut(t.offset, m.ncols()).gemv_tr(1.0, m, &zv, 1.0);
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct LinearConstraint {
    pub coeffs: DVector<f64>,
    pub rhs: f64,
}

/// Affine equalities plus PSD blocks over a vector variable, with a linear
/// objective to maximize (zero for pure feasibility).
#[derive(Clone, Debug)]
pub struct SdpProblem {
    pub dim: usize,
    pub equalities: Vec<LinearConstraint>,
    pub blocks: Vec<ConeBlock>,
    pub objective: DVector<f64>,
    /// Deterministic starting point for the solver.
    pub start: DVector<f64>,
    /// Diagnostics attached at assembly time.
    pub warnings: Vec<String>,
}

impl SdpProblem {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            equalities: Vec::new(),
            blocks: Vec::new(),
            objective: DVector::zeros(dim),
            start: DVector::zeros(dim),
            warnings: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.objective.len() != self.dim {
            return Err(shape_err("objective", self.dim, self.objective.len()));
        }
        if self.start.len() != self.dim {
            return Err(shape_err("starting point", self.dim, self.start.len()));
        }
        for eq in &self.equalities {
            if eq.coeffs.len() != self.dim {
                return Err(shape_err("equality constraint", self.dim, eq.coeffs.len()));
            }
        }
        if self.blocks.is_empty() {
            return Err(Error::InvalidInput("an SDP needs at least one cone block".into()));
        }
        for b in &self.blocks {
            if b.size == 0 {
                return Err(Error::InvalidInput(format!("block {} has size 0", b.label)));
            }
            if b.constant.shape() != (b.size, b.size) {
                return Err(shape_err("block constant", b.size, format!("{:?}", b.constant.shape())));
            }
            let len = b.svec_len();
            for t in &b.terms {
                if let TermCoeffs::Dense(m) = &t.coeffs {
                    if m.nrows() != len {
                        return Err(shape_err("dense block term", len, m.nrows()));
                    }
                }
                if t.offset + t.width(len) > self.dim {
                    return Err(Error::InvalidInput(format!(
                        "term of block {} addresses variables past {}",
                        b.label, self.dim
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn objective_at(&self, y: &DVector<f64>) -> f64 {
        self.objective.dot(y)
    }

    /// Largest absolute equality violation at `y`.
    pub fn equality_residual(&self, y: &DVector<f64>) -> f64 {
        self.equalities
            .iter()
            .map(|e| (e.coeffs.dot(y) - e.rhs).abs())
            .fold(0.0, f64::max)
    }

    /// Most negative eigenvalue over all blocks at `y`.
    pub fn min_cone_eig(&self, y: &DVector<f64>) -> f64 {
        self.blocks
            .iter()
            .map(|b| linalg::min_eig(&b.eval(y)))
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SdpStatus {
    Optimal,
    Infeasible,
    MaxIterations,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub primal_objective: f64,
    pub dual_objective: f64,
    pub relative_gap: f64,
    pub primal_infeasibility: f64,
    pub dual_infeasibility: f64,
    pub step_primal: f64,
    pub step_dual: f64,
}

#[derive(Clone, Debug)]
pub struct SdpSolution {
    pub x: DVector<f64>,
    pub objective: f64,
    /// Upper bound on the optimum from the dual iterate.
    pub dual_bound: f64,
    pub equality_residual: f64,
    pub min_cone_eig: f64,
    pub relative_gap: f64,
    pub status: SdpStatus,
    pub iterations: usize,
    /// Infeasibility certificate value (negative) when `status` is infeasible.
    pub infeasibility_margin: Option<f64>,
    pub trace: Vec<IterationRecord>,
}

impl SdpSolution {
    pub fn write_trace_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for rec in &self.trace {
            out.serialize(rec)?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SolveOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Record per-iteration statistics in [`SdpSolution::trace`].
    pub trace: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 200,
            trace: false,
        }
    }
}

/// Orthonormal rows spanning the equality constraints; dependent rows are
/// dropped after checking that their right-hand sides agree.
fn orthonormal_equalities(p: &SdpProblem) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let k = p.equalities.len();
    if k == 0 {
        return Ok((DMatrix::zeros(0, p.dim), DVector::zeros(0)));
    }
    let mut a = DMatrix::zeros(k, p.dim);
    let mut b = DVector::zeros(k);
    for (i, e) in p.equalities.iter().enumerate() {
        a.set_row(i, &e.coeffs.transpose());
        b[i] = e.rhs;
    }
    let gram = &a * a.transpose();
    let (vals, vecs) = linalg::sorted_eigen(&gram);
    let top = vals[k - 1];
    if top <= 0.0 {
        if b.amax() > 0.0 {
            return Err(Error::InvalidInput("zero equality row with nonzero right-hand side".into()));
        }
        return Ok((DMatrix::zeros(0, p.dim), DVector::zeros(0)));
    }
    let keep: Vec<usize> = (0..k).filter(|&i| vals[i] > 1e-12 * top).collect();
    let mut rows = DMatrix::zeros(keep.len(), p.dim);
    let mut rhs = DVector::zeros(keep.len());
    for (dst, &i) in keep.iter().enumerate() {
        let v = vecs.column(i);
        let s = 1.0 / vals[i].sqrt();
        rows.set_row(dst, &((v.transpose() * &a) * s));
        rhs[dst] = v.dot(&b) * s;
    }
    // Dependent rows must be consistent: b must lie in the range of A.
    let y = rows.transpose() * &rhs;
    let mismatch = (&a * &y - &b).amax();
    if mismatch > 1e-9 * (1.0 + b.amax()) {
        return Err(Error::InvalidInput(format!(
            "equality constraints are inconsistent (residual {mismatch:.3e})"
        )));
    }
    Ok((rows, rhs))
}

#[derive(Clone)]
struct BlockState {
    s: DMatrix<f64>,
    x: DMatrix<f64>,
}

struct Direction {
    dy: DVector<f64>,
    dnu: DVector<f64>,
    ds: Vec<DMatrix<f64>>,
    dx: Vec<DMatrix<f64>>,
}

fn sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    linalg::symmetrize(m)
}

fn inner(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.dot(b)
}

/// Adds `scale * m` into `target[(row, col)..]`.
fn add_into(target: &mut DMatrix<f64>, row: usize, col: usize, m: &DMatrix<f64>, scale: f64) {
    target
        .view_mut((row, col), m.shape())
        .zip_apply(m, |t, v| *t += scale * v);
}

/// Schur complement `sum_k F_k^T K_k F_k` of the HKM normal equations.
fn schur_matrix(problem: &SdpProblem, kmats: &[DMatrix<f64>]) -> DMatrix<f64> {
    let d = problem.dim;
    let mut m = DMatrix::zeros(d, d);
    for (blk, k) in problem.blocks.iter().zip(kmats) {
        let len = blk.svec_len();
        // K * B for dense terms; identity terms use K directly.
        let kb: Vec<Option<DMatrix<f64>>> = blk
            .terms
            .iter()
            .map(|t| match &t.coeffs {
                TermCoeffs::Dense(b) => Some(k * b),
                TermCoeffs::Identity(_) => None,
            })
            .collect();
        for (ia, ta) in blk.terms.iter().enumerate() {
            for (ib, tb) in blk.terms.iter().enumerate().skip(ia) {
                let (oa, ob) = (ta.offset, tb.offset);
                let contrib = match (&ta.coeffs, &tb.coeffs) {
                    (TermCoeffs::Identity(sa), TermCoeffs::Identity(sb)) => {
                        add_into(&mut m, oa, ob, k, sa * sb);
                        if ia != ib {
                            add_into(&mut m, ob, oa, k, sa * sb);
                        }
                        continue;
                    }
                    (TermCoeffs::Identity(sa), TermCoeffs::Dense(_)) => {
                        let mut c = kb[ib].clone().unwrap();
                        c *= *sa;
                        c
                    }
                    (TermCoeffs::Dense(ba), TermCoeffs::Identity(sb)) => {
                        let mut c = (k * ba).transpose();
                        c *= *sb;
                        c
                    }
                    (TermCoeffs::Dense(ba), TermCoeffs::Dense(_)) => {
                        ba.transpose() * kb[ib].as_ref().unwrap()
                    }
                };
                debug_assert_eq!(contrib.nrows(), ta.width(len));
                add_into(&mut m, oa, ob, &contrib, 1.0);
                if ia != ib {
                    add_into(&mut m, ob, oa, &contrib.transpose(), 1.0);
                }
            }
        }
    }
    m
}

struct Newton<'a> {
    problem: &'a SdpProblem,
    aeq: &'a DMatrix<f64>,
    chol: BlockedCholesky,
    /// `M^{-1} A^T`
    minv_at: DMatrix<f64>,
    /// Cholesky of `A M^{-1} A^T`
    small: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
    sinv: Vec<DMatrix<f64>>,
}

impl Newton<'_> {
    /// Solve for the direction with complementarity target
    /// `X S -> r_target` per block.
    fn direction(
        &self,
        state: &[BlockState],
        rs: &[DMatrix<f64>],
        rd: &DVector<f64>,
        rp: &DVector<f64>,
        targets: &[DMatrix<f64>],
    ) -> Direction {
        let d = self.problem.dim;
        let mut h = -rd.clone();
        let mut q = Vec::with_capacity(state.len());
        for (k, blk) in self.problem.blocks.iter().enumerate() {
            let x = &state[k].x;
            let si = &self.sinv[k];
            let qk = sym(&(&targets[k] * si)) - x - sym(&(x * &rs[k] * si));
            blk.adjoint_add(&qk, &mut h);
            q.push(qk);
        }
        let minv_h = self.chol.solve_vec(&h);
        let dnu = match &self.small {
            Some(small) => {
                let rhs = rp - self.aeq * &minv_h;
                small.solve(&rhs)
            }
            None => DVector::zeros(0),
        };
        let dy = if dnu.is_empty() {
            minv_h
        } else {
            minv_h + &self.minv_at * &dnu
        };
        debug_assert_eq!(dy.len(), d);
        let mut ds = Vec::with_capacity(state.len());
        let mut dx = Vec::with_capacity(state.len());
        for (k, blk) in self.problem.blocks.iter().enumerate() {
            let fdy = blk.linear(&dy);
            let x = &state[k].x;
            dx.push(&q[k] - sym(&(x * &fdy * &self.sinv[k])));
            ds.push(fdy + &rs[k]);
        }
        Direction { dy, dnu, ds, dx }
    }
}

fn step_length(mats: &[DMatrix<f64>], dirs: &[DMatrix<f64>]) -> f64 {
    mats.iter()
        .zip(dirs)
        .map(|(m, dm)| linalg::max_psd_step(m, dm))
        .fold(f64::INFINITY, f64::min)
}

pub fn solve(problem: &SdpProblem, opts: &SolveOptions) -> Result<SdpSolution> {
    problem.validate()?;
    let (aeq, beq) = orthonormal_equalities(problem)?;
    let c = -&problem.objective;
    let n_total: usize = problem.blocks.iter().map(|b| b.size).sum();

    let mut y = problem.start.clone();
    if aeq.nrows() > 0 {
        y += aeq.transpose() * (&beq - &aeq * &y);
    }
    let mut nu = DVector::zeros(aeq.nrows());
    let mut state: Vec<BlockState> = problem
        .blocks
        .iter()
        .map(|b| {
            let t = b.eval(&y);
            let (lo, hi) = linalg::extreme_eigs(&t);
            let target = (0.1 * lo.abs().max(hi.abs())).max(1.0);
            let s = if lo >= target {
                t
            } else {
                t + DMatrix::identity(b.size, b.size) * (target - lo)
            };
            BlockState {
                s,
                x: DMatrix::identity(b.size, b.size),
            }
        })
        .collect();

    let f0_norm = problem
        .blocks
        .iter()
        .map(|b| b.constant.norm_squared())
        .sum::<f64>()
        .sqrt();
    let b_norm = beq.norm();
    let c_norm = c.norm();
    let mut trace = Vec::new();
    let mut status = SdpStatus::MaxIterations;
    let mut infeasibility_margin = None;
    let mut iterations = 0;
    let mut stalls = 0;
    let mut best: Option<(f64, DVector<f64>)> = None;

    for iter in 0..opts.max_iter {
        iterations = iter;
        let rp = &beq - &aeq * &y;
        let rs: Vec<DMatrix<f64>> = problem
            .blocks
            .iter()
            .zip(&state)
            .map(|(b, st)| b.eval(&y) - &st.s)
            .collect();
        let mut rd = c.clone();
        if aeq.nrows() > 0 {
            rd -= aeq.transpose() * &nu;
        }
        for (b, st) in problem.blocks.iter().zip(&state) {
            let mut adj = DVector::zeros(problem.dim);
            b.adjoint_add(&st.x, &mut adj);
            rd -= adj;
        }
        let comp: f64 = state.iter().map(|st| inner(&st.x, &st.s)).sum();
        let mu = comp / n_total as f64;
        let pobj = problem.objective.dot(&y);
        let x_f0: f64 = problem
            .blocks
            .iter()
            .zip(&state)
            .map(|(b, st)| inner(&st.x, &b.constant))
            .sum();
        let dobj = x_f0 - beq.dot(&nu);
        let rel_gap = comp.max((pobj - dobj).abs()) / (1.0 + pobj.abs() + dobj.abs());
        let rs_norm = rs.iter().map(|m| m.norm_squared()).sum::<f64>().sqrt();
        let pinf = (rp.norm() / (1.0 + b_norm)).max(rs_norm / (1.0 + f0_norm));
        let dinf = rd.norm() / (1.0 + c_norm);

        let merit = rel_gap.max(pinf).max(dinf);
        if best.as_ref().is_none_or(|(m, _)| merit < *m) {
            best = Some((merit, y.clone()));
        }

        if rel_gap <= opts.tol && pinf <= opts.tol && dinf <= opts.tol {
            status = SdpStatus::Optimal;
            break;
        }

        // Farkas ray: X with F^T(X) + A^T nu ~ 0 and <X, C> - b^T nu < 0.
        let tr_x: f64 = state.iter().map(|st| st.x.trace()).sum();
        if tr_x > 1e8 {
            let cert = (x_f0 - beq.dot(&nu)) / tr_x;
            let ray_residual = (&c - &rd).norm() / tr_x;
            if cert < -1e-8 && ray_residual < 1e-6 {
                status = SdpStatus::Infeasible;
                infeasibility_margin = Some(cert);
                break;
            }
        }

        let mut sinv = Vec::with_capacity(state.len());
        let mut kmats = Vec::with_capacity(state.len());
        for st in &state {
            let Some(ch) = st.s.clone().cholesky() else {
                return Err(Error::Solver("slack lost positive definiteness".into()));
            };
            let si = sym(&ch.inverse());
            kmats.push(sym_kron(&st.x, &si));
            sinv.push(si);
        }
        let mut schur = schur_matrix(problem, &kmats);
        drop(kmats);
        let mut chol = BlockedCholesky::new(schur.clone());
        // Regularization only perturbs the direction; residuals are recomputed
        // from scratch every iteration.
        let diag_max = schur.diagonal().amax().max(1.0);
        let mut reg = 1e-14 * diag_max;
        while chol.is_none() && reg <= 1e-6 * diag_max {
            for i in 0..problem.dim {
                schur[(i, i)] += reg;
            }
            chol = BlockedCholesky::new(schur.clone());
            reg *= 100.0;
        }
        drop(schur);
        let Some(chol) = chol else {
            log::warn!("schur complement is singular at iteration {iter}");
            break;
        };
        let (minv_at, small) = if aeq.nrows() > 0 {
            let mut mat = aeq.transpose();
            chol.solve_mut(&mut mat);
            let small = (&aeq * &mat).cholesky();
            if small.is_none() {
                log::warn!("reduced equality system is singular at iteration {iter}");
                break;
            }
            (mat, small)
        } else {
            (DMatrix::zeros(problem.dim, 0), None)
        };
        let newton = Newton {
            problem,
            aeq: &aeq,
            chol,
            minv_at,
            small,
            sinv,
        };

        // Predictor.
        let zero_targets: Vec<DMatrix<f64>> = problem
            .blocks
            .iter()
            .map(|b| DMatrix::zeros(b.size, b.size))
            .collect();
        let aff = newton.direction(&state, &rs, &rd, &rp, &zero_targets);
        let ss: Vec<_> = state.iter().map(|s| s.s.clone()).collect();
        let xs: Vec<_> = state.iter().map(|s| s.x.clone()).collect();
        let ap = step_length(&ss, &aff.ds).min(1.0);
        let ad = step_length(&xs, &aff.dx).min(1.0);
        let comp_aff: f64 = state
            .iter()
            .enumerate()
            .map(|(k, st)| inner(&(&st.x + &aff.dx[k] * ad), &(&st.s + &aff.ds[k] * ap)))
            .sum();
        let mu_aff = comp_aff / n_total as f64;
        let sigma = (mu_aff / mu).clamp(0.0, 1.0).powi(3);

        // Corrector.
        let targets: Vec<DMatrix<f64>> = problem
            .blocks
            .iter()
            .enumerate()
            .map(|(k, b)| DMatrix::identity(b.size, b.size) * (sigma * mu) - &aff.dx[k] * &aff.ds[k])
            .collect();
        let dir = newton.direction(&state, &rs, &rd, &rp, &targets);
        let frac = if pinf < 1e-3 && rel_gap < 1e-3 { 0.99 } else { 0.95 };
        let mut ap = (frac * step_length(&ss, &dir.ds)).min(1.0);
        let mut ad = (frac * step_length(&xs, &dir.dx)).min(1.0);

        // Near the boundary the eigenvalue step bound can overshoot by
        // roundoff; shrink until both iterates still factor.
        let mut next = state.clone();
        for _ in 0..40 {
            for (k, (nx, st)) in next.iter_mut().zip(&state).enumerate() {
                nx.s = sym(&(&st.s + &dir.ds[k] * ap));
                nx.x = sym(&(&st.x + &dir.dx[k] * ad));
            }
            if next.iter().all(|st| st.s.clone().cholesky().is_some() && st.x.clone().cholesky().is_some()) {
                break;
            }
            ap *= 0.5;
            ad *= 0.5;
        }
        state = next;
        y.axpy(ap, &dir.dy, 1.0);
        if !dir.dnu.is_empty() {
            nu.axpy(ad, &dir.dnu, 1.0);
        }

        if opts.trace {
            trace.push(IterationRecord {
                iteration: iter,
                primal_objective: pobj,
                dual_objective: dobj,
                relative_gap: rel_gap,
                primal_infeasibility: pinf,
                dual_infeasibility: dinf,
                step_primal: ap,
                step_dual: ad,
            });
        }

        if ap < 1e-8 && ad < 1e-8 {
            stalls += 1;
            if stalls >= 3 {
                log::warn!("step lengths collapsed at iteration {iter}");
                break;
            }
        } else {
            stalls = 0;
        }
    }

    if status == SdpStatus::MaxIterations {
        if let Some((_, yb)) = best {
            y = yb;
        }
    }
    let (dual_bound, relative_gap) = {
        let comp: f64 = state.iter().map(|st| inner(&st.x, &st.s)).sum();
        let x_f0: f64 = problem
            .blocks
            .iter()
            .zip(&state)
            .map(|(b, st)| inner(&st.x, &b.constant))
            .sum();
        let dobj = x_f0 - beq.dot(&nu);
        let pobj = problem.objective.dot(&y);
        (dobj, comp.max((pobj - dobj).abs()) / (1.0 + pobj.abs() + dobj.abs()))
    };
    Ok(SdpSolution {
        objective: problem.objective.dot(&y),
        dual_bound,
        equality_residual: problem.equality_residual(&y),
        min_cone_eig: problem.min_cone_eig(&y),
        relative_gap,
        status,
        iterations,
        infeasibility_margin,
        trace,
        x: y,
    })
}

#[derive(Clone, Debug)]
pub enum Feasibility {
    Feasible { witness: DVector<f64>, margin: f64 },
    Infeasible { best_margin: f64 },
}

impl Feasibility {
    pub fn is_feasible(&self) -> bool {
        matches!(self, Feasibility::Feasible { .. })
    }
}

/// Decide whether every block can be made `>= margin * I` subject to the
/// equalities. Solves `max t` with `t I` subtracted from every block (and
/// `t` capped), ignoring the original objective.
pub fn feasibility(problem: &SdpProblem, margin: f64, tol: f64) -> Result<Feasibility> {
    problem.validate()?;
    let d = problem.dim;
    let mut aug = SdpProblem::new(d + 1);
    aug.equalities = problem
        .equalities
        .iter()
        .map(|e| {
            let mut coeffs = DVector::zeros(d + 1);
            coeffs.rows_mut(0, d).copy_from(&e.coeffs);
            LinearConstraint { coeffs, rhs: e.rhs }
        })
        .collect();
    for b in &problem.blocks {
        let blk = ConeBlock {
            label: b.label.clone(),
            size: b.size,
            constant: b.constant.clone(),
            terms: b.terms.clone(),
        };
        aug.blocks
            .push(blk.scalar_term(d, &(-DMatrix::identity(b.size, b.size))));
    }
    let cap = margin.abs() + 1.0;
    aug.blocks.push(
        ConeBlock::new("margin cap", 1)
            .with_constant(DMatrix::from_element(1, 1, cap))
            .scalar_term(d, &DMatrix::from_element(1, 1, -1.0)),
    );
    aug.objective[d] = 1.0;
    aug.start.rows_mut(0, d).copy_from(&problem.start);
    aug.start[d] = (problem.min_cone_eig(&problem.start) - 1.0).min(cap - 1.0);
    let sol = solve(
        &aug,
        &SolveOptions {
            tol,
            ..SolveOptions::default()
        },
    )?;
    let t = sol.x[d];
    let witness = sol.x.rows(0, d).into_owned();
    let achieved = problem.min_cone_eig(&witness);
    let eq_ok = problem.equality_residual(&witness) <= 1e3 * tol;
    if sol.status != SdpStatus::Infeasible && t >= margin - tol && achieved >= margin - 10.0 * tol && eq_ok {
        Ok(Feasibility::Feasible {
            witness,
            margin: achieved,
        })
    } else {
        Ok(Feasibility::Infeasible { best_margin: t })
    }
}
