//! Matrix-sensing instances and the nonconvex least-squares objective
//! `f(x) = sum_i (<A_i, x x^T> - b_i)^2` over `x` in `R^{n x r}`.

use std::ops::Deref;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::linalg;
use crate::symbasis::{congruence_rows, svec, sym_dim};

/// Measurements `A_1..A_m`, ground-truth factor `z` and data `b_i = <A_i, z z^T>`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "InstanceJson", into = "InstanceJson")]
pub struct SensingInstance {
    n: usize,
    r: usize,
    measurements: Vec<DMatrix<f64>>,
    z: DMatrix<f64>,
    b: DVector<f64>,
}

/// A candidate factor `x` with finite entries.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidatePoint(DMatrix<f64>);

impl CandidatePoint {
    pub fn new(x: DMatrix<f64>) -> Result<Self> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("candidate point has non-finite entries".into()));
        }
        Ok(Self(x))
    }

    pub fn from_column(values: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_column_slice(values.len(), 1, values))
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }
}

impl Deref for CandidatePoint {
    type Target = DMatrix<f64>;
    fn deref(&self) -> &DMatrix<f64> {
        &self.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RipReport {
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub gamma: f64,
    pub delta_full: f64,
    pub rank_deficient: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    StrictLocalMin,
    SecondOrderCritical,
    FirstOrderOnly,
    NotCritical,
    GlobalMin,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticalityCertificate {
    pub objective_value: f64,
    pub gradient_norm: f64,
    /// Smallest Hessian eigenvalue. For `r >= 2` it is taken over the
    /// complement of the rotation directions `x S` (`S` skew), along which
    /// `f` is constant.
    pub hessian_min_eig: f64,
    pub mu: f64,
    pub verdict: Verdict,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CertifyTolerances {
    pub gradient: f64,
    pub objective: f64,
    pub eigenvalue: f64,
}

impl CertifyTolerances {
    pub fn default_for(inst: &SensingInstance) -> Self {
        let bn = inst.b.norm();
        Self {
            gradient: 1e-9 * (1.0 + bn),
            objective: 1e-9 * bn * bn,
            eigenvalue: 1e-10,
        }
    }
}

/// `sum_j x_j^T A x_j` for a symmetric `A` stored column-major. `ax` receives
/// `A x` column-major. Every residual in the crate goes through this routine,
/// so `x = z` reproduces `b` bit for bit.
#[inline]
pub(crate) fn measure_into(a: &[f64], x: &[f64], n: usize, r: usize, ax: &mut [f64]) -> f64 {
    let mut total = 0.0;
    for j in 0..r {
        let xj = &x[j * n..(j + 1) * n];
        for p in 0..n {
            // A is symmetric, so column p doubles as row p.
            let col = &a[p * n..(p + 1) * n];
            let s: f64 = col.iter().zip(xj).map(|(u, v)| u * v).sum();
            ax[j * n + p] = s;
            total += xj[p] * s;
        }
    }
    total
}

impl SensingInstance {
    /// Build an instance from symmetric measurements and a ground-truth
    /// factor; `b` is computed from them.
    pub fn new(measurements: Vec<DMatrix<f64>>, z: DMatrix<f64>) -> Result<Self> {
        let n = z.nrows();
        let r = z.ncols();
        Self::check_shapes(n, r, &measurements, &z)?;
        let mut ax = vec![0.0; n * r];
        let b = DVector::from_iterator(
            measurements.len(),
            measurements
                .iter()
                .map(|a| measure_into(a.as_slice(), z.as_slice(), n, r, &mut ax)),
        );
        Ok(Self { n, r, measurements, z, b })
    }

    /// Build from all parts, re-validating every invariant.
    pub fn from_parts(
        n: usize,
        r: usize,
        measurements: Vec<DMatrix<f64>>,
        z: DMatrix<f64>,
        b: DVector<f64>,
    ) -> Result<Self> {
        Self::check_shapes(n, r, &measurements, &z)?;
        if b.len() != measurements.len() {
            return Err(shape_err("data vector", measurements.len(), b.len()));
        }
        let zn2 = z.norm_squared();
        let mut ax = vec![0.0; n * r];
        for (i, a) in measurements.iter().enumerate() {
            let expected = measure_into(a.as_slice(), z.as_slice(), n, r, &mut ax);
            let allowed = 1e-12 * a.norm() * zn2;
            if (b[i] - expected).abs() > allowed.max(f64::MIN_POSITIVE) {
                return Err(Error::InvalidInstance(format!(
                    "b[{i}] = {} disagrees with <A_{i}, z z^T> = {expected}",
                    b[i]
                )));
            }
        }
        Ok(Self { n, r, measurements, z, b })
    }

    fn check_shapes(n: usize, r: usize, measurements: &[DMatrix<f64>], z: &DMatrix<f64>) -> Result<()> {
        if n == 0 || r == 0 {
            return Err(Error::InvalidInstance("n and r must be at least 1".into()));
        }
        if measurements.is_empty() {
            return Err(Error::InvalidInstance("at least one measurement is required".into()));
        }
        if z.shape() != (n, r) {
            return Err(shape_err("ground-truth factor", format!("{n}x{r}"), format!("{:?}", z.shape())));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInstance("ground-truth factor has non-finite entries".into()));
        }
        for (i, a) in measurements.iter().enumerate() {
            if a.shape() != (n, n) {
                return Err(shape_err("measurement matrix", format!("{n}x{n}"), format!("{:?}", a.shape())));
            }
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInstance(format!("A_{i} has non-finite entries")));
            }
            for p in 0..n {
                for q in 0..p {
                    if a[(p, q)] != a[(q, p)] {
                        return Err(Error::InvalidInstance(format!("A_{i} is not symmetric at ({p},{q})")));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn m(&self) -> usize {
        self.measurements.len()
    }

    pub fn measurements(&self) -> &[DMatrix<f64>] {
        &self.measurements
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    /// `z z^T`.
    pub fn ground_truth(&self) -> DMatrix<f64> {
        &self.z * self.z.transpose()
    }

    /// Every measurement scaled by `c` (data rescaled to match).
    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(self.measurements.iter().map(|a| a * c).collect(), self.z.clone())
    }

    fn check_point(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.shape() != (self.n, self.r) {
            return Err(shape_err(
                "candidate point",
                format!("{}x{}", self.n, self.r),
                format!("{}x{}", x.nrows(), x.ncols()),
            ));
        }
        Ok(())
    }

    /// Per-measurement residuals `<A_i, x x^T> - b_i` and products `A_i x`.
    fn residuals(&self, x: &DMatrix<f64>) -> (Vec<f64>, Vec<DMatrix<f64>>) {
        let (n, r) = (self.n, self.r);
        let mut res = Vec::with_capacity(self.m());
        let mut prods = Vec::with_capacity(self.m());
        for (a, &bi) in self.measurements.iter().zip(self.b.iter()) {
            let mut ax = DMatrix::zeros(n, r);
            let q = measure_into(a.as_slice(), x.as_slice(), n, r, ax.as_mut_slice());
            res.push(q - bi);
            prods.push(ax);
        }
        (res, prods)
    }

    pub fn objective_value(&self, x: &DMatrix<f64>) -> Result<f64> {
        self.check_point(x)?;
        let (res, _) = self.residuals(x);
        Ok(res.iter().map(|v| v * v).sum())
    }

    /// `grad f(x) = sum_i 2 r_i (A_i + A_i^T) x`.
    pub fn gradient(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_point(x)?;
        let (res, prods) = self.residuals(x);
        let mut g = DMatrix::zeros(self.n, self.r);
        for (ri, ax) in res.iter().zip(&prods) {
            g += ax * (4.0 * ri);
        }
        Ok(g)
    }

    /// The true second derivative of `f`, an `nr x nr` matrix acting on
    /// column-major `vec(u)`:
    /// `sum_i 8 vec(A_i x) vec(A_i x)^T + 4 r_i (I_r kron A_i)`.
    ///
    /// This is twice the quadratic form written `<A(e), A(uu^T)>`-style in the
    /// optimality conditions; PSD-ness is unaffected.
    pub fn hessian(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.check_point(x)?;
        let (n, r) = (self.n, self.r);
        let (res, prods) = self.residuals(x);
        let nr = n * r;
        let mut h = DMatrix::zeros(nr, nr);
        for ((ri, ax), a) in res.iter().zip(&prods).zip(&self.measurements) {
            let g = DVector::from_column_slice(ax.as_slice());
            h.ger(8.0, &g, &g, 1.0);
            for j in 0..r {
                h.view_mut((j * n, j * n), (n, n))
                    .zip_apply(a, |t, v| *t += 4.0 * ri * v);
            }
        }
        Ok(h)
    }

    /// Gram matrix of the measurement map on symmetric coordinates:
    /// `sum_i svec(A_i) svec(A_i)^T`, so that `||A(X)||^2 = svec(X)^T G svec(X)`.
    pub fn gram_form(&self) -> DMatrix<f64> {
        let dim = sym_dim(self.n);
        let mut g = DMatrix::zeros(dim, dim);
        for a in &self.measurements {
            let v = svec(a);
            g.ger(1.0, &v, &v, 1.0);
        }
        linalg::symmetrize(&g)
    }

    /// Full-rank RIP constant from the extreme eigenvalues of the Gram form
    /// on the symmetric subspace.
    pub fn rip_full(&self) -> RipReport {
        let (lo, hi) = linalg::extreme_eigs(&self.gram_form());
        rip_from_extremes(lo, hi)
    }

    /// Smallest `delta` with `(1-delta)||UYU^T||^2 <= gamma ||A(UYU^T)||^2 <=
    /// (1+delta)||UYU^T||^2` over symmetric `Y`, for `U` with orthonormal
    /// columns. Lower-bounds the true RIP constant of rank `k = U.ncols()`.
    pub fn rip_restricted_lower_bound(&self, u: &DMatrix<f64>) -> Result<f64> {
        if u.nrows() != self.n || u.ncols() == 0 || u.ncols() > self.n {
            return Err(shape_err("subspace basis", format!("{}xk, 1<=k<=n", self.n), format!("{:?}", u.shape())));
        }
        let defect = linalg::orthonormality_defect(u);
        if defect > 1e-10 {
            return Err(Error::NotOrthonormal(defect));
        }
        // Columns of W are svec(U B_q U^T); with orthonormal U, W^T W = I.
        let w = congruence_rows(u).transpose();
        let restricted = w.transpose() * self.gram_form() * &w;
        let (lo, hi) = linalg::extreme_eigs(&restricted);
        Ok(rip_from_extremes(lo, hi).delta_full)
    }

    pub fn certify(
        &self,
        x: &DMatrix<f64>,
        mu: f64,
        tol: &CertifyTolerances,
    ) -> Result<CriticalityCertificate> {
        if !(mu >= 0.0) {
            return Err(Error::InvalidInput(format!("mu must be nonnegative, got {mu}")));
        }
        let objective_value = self.objective_value(x)?;
        let gradient_norm = self.gradient(x)?.norm();
        let hess = self.hessian(x)?;
        let basis = rotation_complement(x);
        let hessian_min_eig = linalg::min_eig(&(basis.transpose() * hess * &basis));
        let critical = gradient_norm <= tol.gradient;
        let verdict = if objective_value <= tol.objective {
            Verdict::GlobalMin
        } else if !critical {
            Verdict::NotCritical
        } else if mu > 0.0 && hessian_min_eig >= mu {
            Verdict::StrictLocalMin
        } else if hessian_min_eig >= -tol.eigenvalue {
            Verdict::SecondOrderCritical
        } else {
            Verdict::FirstOrderOnly
        };
        Ok(CriticalityCertificate {
            objective_value,
            gradient_norm,
            hessian_min_eig,
            mu,
            verdict,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

pub(crate) fn rip_from_extremes(lo: f64, hi: f64) -> RipReport {
    let rank_deficient = !(lo > 1e-12 * hi.abs()) || hi <= 0.0;
    let gamma = 2.0 / (lo + hi);
    let delta_full = if rank_deficient { 1.0 } else { (hi - lo) / (hi + lo) };
    RipReport {
        lambda_min: lo,
        lambda_max: hi,
        gamma,
        delta_full,
        rank_deficient,
    }
}

/// Orthonormal basis (columns, length `nr`) of the complement of the rotation
/// directions `{vec(x S) : S skew}`. For `r = 1` this is the identity.
pub fn rotation_complement(x: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, r) = x.shape();
    let nr = n * r;
    if r < 2 {
        return DMatrix::identity(nr, nr);
    }
    let mut dirs = DMatrix::zeros(nr, r * (r - 1) / 2);
    let mut k = 0;
    for a in 0..r {
        for b in (a + 1)..r {
            let mut s = DMatrix::zeros(r, r);
            s[(a, b)] = 1.0;
            s[(b, a)] = -1.0;
            let u = x * s;
            dirs.set_column(k, &DVector::from_column_slice(u.as_slice()));
            k += 1;
        }
    }
    let q = linalg::column_space(&dirs, 1e-12);
    if q.ncols() == 0 {
        return DMatrix::identity(nr, nr);
    }
    let proj = DMatrix::identity(nr, nr) - &q * q.transpose();
    linalg::column_space(&proj, 1e-8)
}

#[derive(Serialize, Deserialize)]
struct InstanceJson {
    n: usize,
    r: usize,
    /// Each matrix flattened row-major.
    matrices: Vec<Vec<f64>>,
    /// Column-major `n x r`.
    z: Vec<f64>,
    b: Vec<f64>,
}

impl TryFrom<InstanceJson> for SensingInstance {
    type Error = Error;

    fn try_from(j: InstanceJson) -> Result<Self> {
        let n = j.n;
        let mut mats = Vec::with_capacity(j.matrices.len());
        for (i, flat) in j.matrices.into_iter().enumerate() {
            if flat.len() != n * n {
                return Err(Error::InvalidInstance(format!(
                    "matrix {i} has {} entries, expected {}",
                    flat.len(),
                    n * n
                )));
            }
            mats.push(DMatrix::from_row_slice(n, n, &flat));
        }
        if j.z.len() != n * j.r {
            return Err(Error::InvalidInstance(format!("z has {} entries, expected {}", j.z.len(), n * j.r)));
        }
        let z = DMatrix::from_column_slice(n, j.r, &j.z);
        Self::from_parts(n, j.r, mats, z, DVector::from_vec(j.b))
    }
}

impl From<SensingInstance> for InstanceJson {
    fn from(s: SensingInstance) -> Self {
        InstanceJson {
            n: s.n,
            r: s.r,
            matrices: s
                .measurements
                .iter()
                .map(|a| a.transpose().as_slice().to_vec())
                .collect(),
            z: s.z.as_slice().to_vec(),
            b: s.b.as_slice().to_vec(),
        }
    }
}
