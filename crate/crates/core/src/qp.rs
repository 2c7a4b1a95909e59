//! Dense convex QP solver based on ADMM operator splitting.
//!
//! Solves `min ½xᵀHx + fᵀx` subject to `Aeq x = beq`, `bin_lo ≤ Ain x ≤ bin_hi`
//! and `lb ≤ x ≤ ub`. All constraints are stacked into one block
//! `l ≤ C x ≤ u`; the linear system of the x-update is factored once per
//! constraint pattern and reused across solves.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QpSettings {
    pub rho: f64,
    /// Penalty multiplier for equality rows (`l = u`).
    pub eq_rho_scale: f64,
    pub sigma: f64,
    /// over-relaxation
    pub alpha: f64,
    pub tol_primal: f64,
    pub tol_dual: f64,
    pub max_iter: usize,
    /// primal infeasibility certificate tolerance
    pub tol_infeasible: f64,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            rho: 1.0,
            eq_rho_scale: 1e3,
            sigma: 1e-6,
            alpha: 1.6,
            tol_primal: 1e-6,
            tol_dual: 1e-6,
            max_iter: 20_000,
            tol_infeasible: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub f: DVector<f64>,
    pub aeq: DMatrix<f64>,
    pub beq: DVector<f64>,
    pub lb: DVector<f64>,
    pub ub: DVector<f64>,
    pub ain: Option<DMatrix<f64>>,
    pub bin_lo: DVector<f64>,
    pub bin_hi: DVector<f64>,
}

impl QpProblem {
    /// Box-constrained problem with no general constraints.
    pub fn boxed(h: DMatrix<f64>, f: DVector<f64>, lb: DVector<f64>, ub: DVector<f64>) -> Result<Self> {
        let n = f.len();
        Self::new(h, f, DMatrix::zeros(0, n), DVector::zeros(0), lb, ub, None, DVector::zeros(0), DVector::zeros(0))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn new(
        h: DMatrix<f64>,
        f: DVector<f64>,
        aeq: DMatrix<f64>,
        beq: DVector<f64>,
        lb: DVector<f64>,
        ub: DVector<f64>,
        ain: Option<DMatrix<f64>>,
        bin_lo: DVector<f64>,
        bin_hi: DVector<f64>,
    ) -> Result<Self> {
        let n = f.len();
        let dim = |what, expected: usize, got: usize| {
            if expected == got {
                Ok(())
            } else {
                Err(Error::DimensionMismatch { what, expected, got })
            }
        };
        dim("H rows", n, h.nrows())?;
        dim("H cols", n, h.ncols())?;
        dim("Aeq cols", n, aeq.ncols())?;
        dim("beq", aeq.nrows(), beq.len())?;
        dim("lb", n, lb.len())?;
        dim("ub", n, ub.len())?;
        let m_in = match &ain {
            Some(a) => {
                dim("Ain cols", n, a.ncols())?;
                a.nrows()
            }
            None => 0,
        };
        dim("bin_lo", m_in, bin_lo.len())?;
        dim("bin_hi", m_in, bin_hi.len())?;
        let h = (&h + h.transpose()) * 0.5;
        Ok(Self { h, f, aeq, beq, lb, ub, ain, bin_lo, bin_hi })
    }

    pub fn n(&self) -> usize {
        self.f.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.h * x)) + self.f.dot(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Solved,
    MaxIter,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x_opt: DVector<f64>,
    pub objective: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub iterations: usize,
    pub status: QpStatus,
    /// Multipliers of the stacked constraint block `[Aeq; Ain; I]`.
    pub y: DVector<f64>,
    /// Projected constraint values of the stacked block.
    pub z: DVector<f64>,
}

impl QpSolution {
    /// Multipliers split as (equality, general inequality, bound).
    pub fn multipliers(&self, m_eq: usize, m_in: usize) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let y = &self.y;
        (
            y.rows(0, m_eq).into_owned(),
            y.rows(m_eq, m_in).into_owned(),
            y.rows(m_eq + m_in, y.len() - m_eq - m_in).into_owned(),
        )
    }
}

/// Compressed sparse rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    nrows: usize,
    ncols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl Csr {
    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let mut indptr = Vec::with_capacity(m.nrows() + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                let v = m[(i, j)];
                if v != 0.0 {
                    indices.push(j);
                    values.push(v);
                }
            }
            indptr.push(indices.len());
        }
        Self {
            nrows: m.nrows(),
            ncols: m.ncols(),
            indptr,
            indices,
            values,
        }
    }

    fn mul_into(&self, x: &[f64], out: &mut [f64]) {
        for i in 0..self.nrows {
            let mut acc = 0.0;
            for k in self.indptr[i]..self.indptr[i + 1] {
                acc += self.values[k] * x[self.indices[k]];
            }
            out[i] = acc;
        }
    }

    /// `out += selfᵀ y`
    fn mul_t_add(&self, y: &[f64], out: &mut [f64]) {
        for i in 0..self.nrows {
            let yi = y[i];
            if yi == 0.0 {
                continue;
            }
            for k in self.indptr[i]..self.indptr[i + 1] {
                out[self.indices[k]] += self.values[k] * yi;
            }
        }
    }
}

/// Stacked constraint operator `C = [G; I]` where `G = [Aeq; Ain]`.
#[derive(Debug, Clone)]
struct Constraints {
    general: Csr,
    n: usize,
}

impl Constraints {
    fn rows(&self) -> usize {
        self.general.nrows + self.n
    }

    fn mul(&self, x: &[f64], out: &mut [f64]) {
        let mg = self.general.nrows;
        self.general.mul_into(x, &mut out[..mg]);
        out[mg..].copy_from_slice(x);
    }

    fn mul_t(&self, y: &[f64], out: &mut [f64]) {
        let mg = self.general.nrows;
        out.copy_from_slice(&y[mg..]);
        self.general.mul_t_add(&y[..mg], out);
    }
}

/// Initial iterate for a solve.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmStart {
    pub x: DVector<f64>,
    pub z: DVector<f64>,
    pub y: DVector<f64>,
}

/// Solver state for a fixed `H`, constraint matrix and equality-row pattern.
/// Not reentrant; one instance per concurrent caller.
#[derive(Debug, Clone)]
pub struct QpWorkspace {
    settings: QpSettings,
    h: Csr,
    cons: Constraints,
    rho: Vec<f64>,
    eq_pattern: Vec<bool>,
    factor: Cholesky<f64, Dyn>,
    h_dense: DMatrix<f64>,
    g_dense: DMatrix<f64>,
}

impl QpWorkspace {
    /// Factor the x-update system for `H` and general rows `G` (equality rows
    /// first, then inequality rows).
    pub fn new(h: &DMatrix<f64>, general: &DMatrix<f64>, eq_pattern: Vec<bool>, settings: QpSettings) -> Result<Self> {
        let n = h.nrows();
        if eq_pattern.len() != general.nrows() + n {
            return Err(Error::DimensionMismatch {
                what: "equality pattern",
                expected: general.nrows() + n,
                got: eq_pattern.len(),
            });
        }
        if !(settings.rho > 0.0 && settings.sigma > 0.0 && settings.alpha > 0.0 && settings.alpha < 2.0) {
            return Err(Error::InvalidParameter("rho, sigma > 0 and alpha in (0, 2) required".into()));
        }
        let h_sym = (h + h.transpose()) * 0.5;
        let mut ws = Self {
            settings,
            h: Csr::from_dense(&h_sym),
            cons: Constraints {
                general: Csr::from_dense(general),
                n,
            },
            rho: Vec::new(),
            eq_pattern: Vec::new(),
            factor: Cholesky::new(DMatrix::identity(1, 1)).expect("identity"),
            h_dense: h_sym,
            g_dense: general.clone(),
        };
        ws.refactor(eq_pattern)?;
        Ok(ws)
    }

    pub fn from_problem(problem: &QpProblem, settings: QpSettings) -> Result<Self> {
        let (g, l, u) = stack_general(problem);
        let pattern = equality_pattern(&l, &u, &problem.lb, &problem.ub);
        Self::new(&problem.h, &g, pattern, settings)
    }

    pub fn settings(&self) -> &QpSettings {
        &self.settings
    }

    pub fn n(&self) -> usize {
        self.cons.n
    }

    pub fn m(&self) -> usize {
        self.cons.rows()
    }

    fn refactor(&mut self, eq_pattern: Vec<bool>) -> Result<()> {
        let s = &self.settings;
        self.rho = eq_pattern
            .iter()
            .map(|&eq| if eq { s.rho * s.eq_rho_scale } else { s.rho })
            .collect();
        let n = self.cons.n;
        let mg = self.g_dense.nrows();
        let mut kkt = self.h_dense.clone();
        for i in 0..n {
            kkt[(i, i)] += s.sigma + self.rho[mg + i];
        }
        if mg > 0 {
            let scaled = DMatrix::from_fn(mg, n, |i, j| self.g_dense[(i, j)] * self.rho[i]);
            kkt += self.g_dense.transpose() * scaled;
        }
        self.factor = Cholesky::new(kkt).ok_or(Error::NotPositiveDefinite("H + σI + CᵀρC"))?;
        self.eq_pattern = eq_pattern;
        Ok(())
    }

    /// Ensure the factorization matches the equality pattern of the given bounds.
    pub fn update_pattern(&mut self, l: &DVector<f64>, u: &DVector<f64>) -> Result<()> {
        let pattern: Vec<bool> = l.iter().zip(u.iter()).map(|(a, b)| a == b).collect();
        if pattern != self.eq_pattern {
            self.refactor(pattern)?;
        }
        Ok(())
    }

    /// Solve with stacked bounds `l ≤ C x ≤ u` where the last `n` rows are
    /// the variable bounds.
    pub fn solve(
        &mut self,
        f: &DVector<f64>,
        l: &DVector<f64>,
        u: &DVector<f64>,
        warm: Option<&WarmStart>,
    ) -> Result<QpSolution> {
        let n = self.cons.n;
        let m = self.cons.rows();
        if f.len() != n || l.len() != m || u.len() != m {
            return Err(Error::DimensionMismatch {
                what: "stacked bounds",
                expected: m,
                got: l.len(),
            });
        }
        self.update_pattern(l, u)?;
        let s = self.settings;

        let mut x = DVector::<f64>::zeros(n);
        let mut z = DVector::<f64>::zeros(m);
        let mut y = DVector::<f64>::zeros(m);
        if let Some(w) = warm {
            if w.x.len() == n && w.z.len() == m && w.y.len() == m {
                x.copy_from(&w.x);
                z.copy_from(&w.z);
                y.copy_from(&w.y);
            }
        }
        if let Some(i) = (0..m).find(|&i| l[i] > u[i]) {
            log::debug!("qp: crossed bounds on row {i}");
            return Ok(self.finish(f, l, u, x, z, y, 0, QpStatus::Infeasible));
        }
        for i in 0..m {
            z[i] = z[i].clamp(l[i], u[i]);
        }

        let mut rhs = DVector::<f64>::zeros(n);
        let mut xt = DVector::<f64>::zeros(n);
        let mut zt = vec![0.0; m];
        let mut tmp_m = vec![0.0; m];
        let mut tmp_n = vec![0.0; n];
        let mut dy = vec![0.0; m];
        let mut status = QpStatus::MaxIter;
        let mut iterations = 0;

        for k in 1..=s.max_iter {
            iterations = k;
            // x-update
            for i in 0..m {
                tmp_m[i] = self.rho[i] * z[i] - y[i];
            }
            self.cons.mul_t(&tmp_m, &mut tmp_n);
            for i in 0..n {
                rhs[i] = s.sigma * x[i] - f[i] + tmp_n[i];
            }
            xt.copy_from(&rhs);
            self.factor.solve_mut(&mut xt);
            self.cons.mul(xt.as_slice(), &mut zt);
            // relaxed x, z and dual updates
            for i in 0..n {
                x[i] = s.alpha * xt[i] + (1.0 - s.alpha) * x[i];
            }
            for i in 0..m {
                let zr = s.alpha * zt[i] + (1.0 - s.alpha) * z[i];
                let znew = (zr + y[i] / self.rho[i]).clamp(l[i], u[i]);
                dy[i] = self.rho[i] * (zr - znew);
                y[i] += dy[i];
                z[i] = znew;
            }

            let (rp, rd) = self.residuals(f, &x, &z, &y, &mut tmp_m, &mut tmp_n);
            if rp < s.tol_primal && rd < s.tol_dual {
                status = QpStatus::Solved;
                break;
            }
            if k % 10 == 0 && self.infeasibility_certificate(&dy, l, u, &mut tmp_n) {
                status = QpStatus::Infeasible;
                break;
            }
        }
        Ok(self.finish(f, l, u, x, z, y, iterations, status))
    }

    fn residuals(
        &self,
        f: &DVector<f64>,
        x: &DVector<f64>,
        z: &DVector<f64>,
        y: &DVector<f64>,
        tmp_m: &mut [f64],
        tmp_n: &mut [f64],
    ) -> (f64, f64) {
        self.cons.mul(x.as_slice(), tmp_m);
        let rp = tmp_m
            .iter()
            .zip(z.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        self.cons.mul_t(y.as_slice(), tmp_n);
        let mut hx = vec![0.0; x.len()];
        self.h.mul_into(x.as_slice(), &mut hx);
        let rd = (0..x.len())
            .map(|i| (hx[i] + f[i] + tmp_n[i]).abs())
            .fold(0.0, f64::max);
        (rp, rd)
    }

    fn infeasibility_certificate(&self, dy: &[f64], l: &DVector<f64>, u: &DVector<f64>, tmp_n: &mut [f64]) -> bool {
        let norm = dy.iter().map(|v| v.abs()).fold(0.0, f64::max);
        if norm < 1e-12 {
            return false;
        }
        self.cons.mul_t(dy, tmp_n);
        let at = tmp_n.iter().map(|v| v.abs()).fold(0.0, f64::max);
        if at > self.settings.tol_infeasible * norm {
            return false;
        }
        let mut support = 0.0;
        for i in 0..dy.len() {
            if dy[i] > 0.0 {
                if u[i].is_infinite() {
                    return false;
                }
                support += u[i] * dy[i];
            } else if dy[i] < 0.0 {
                if l[i].is_infinite() {
                    return false;
                }
                support += l[i] * dy[i];
            }
        }
        support < -self.settings.tol_infeasible * norm
    }

    #[allow(clippy::too_many_arguments)]
    fn finish(
        &self,
        f: &DVector<f64>,
        l: &DVector<f64>,
        u: &DVector<f64>,
        mut x: DVector<f64>,
        z: DVector<f64>,
        y: DVector<f64>,
        iterations: usize,
        status: QpStatus,
    ) -> QpSolution {
        let mut tmp_m = vec![0.0; self.m()];
        let mut tmp_n = vec![0.0; self.n()];
        let (rp, rd) = self.residuals(f, &x, &z, &y, &mut tmp_m, &mut tmp_n);
        if status != QpStatus::Infeasible {
            let mg = self.cons.general.nrows;
            for i in 0..self.n() {
                x[i] = x[i].clamp(l[mg + i], u[mg + i]);
            }
        }
        let mut hx = vec![0.0; x.len()];
        self.h.mul_into(x.as_slice(), &mut hx);
        let objective = 0.5 * x.iter().zip(&hx).map(|(a, b)| a * b).sum::<f64>() + f.dot(&x);
        QpSolution {
            x_opt: x,
            objective,
            primal_residual: rp,
            dual_residual: rd,
            iterations,
            status,
            y,
            z,
        }
    }
}

fn stack_general(p: &QpProblem) -> (DMatrix<f64>, DVector<f64>, DVector<f64>) {
    let n = p.n();
    let m_in = p.ain.as_ref().map_or(0, |a| a.nrows());
    let mg = p.aeq.nrows() + m_in;
    let mut g = DMatrix::zeros(mg, n);
    g.rows_mut(0, p.aeq.nrows()).copy_from(&p.aeq);
    if let Some(a) = &p.ain {
        g.rows_mut(p.aeq.nrows(), m_in).copy_from(a);
    }
    let mut l = DVector::zeros(mg);
    let mut u = DVector::zeros(mg);
    l.rows_mut(0, p.aeq.nrows()).copy_from(&p.beq);
    u.rows_mut(0, p.aeq.nrows()).copy_from(&p.beq);
    l.rows_mut(p.aeq.nrows(), m_in).copy_from(&p.bin_lo);
    u.rows_mut(p.aeq.nrows(), m_in).copy_from(&p.bin_hi);
    (g, l, u)
}

fn equality_pattern(l: &DVector<f64>, u: &DVector<f64>, lb: &DVector<f64>, ub: &DVector<f64>) -> Vec<bool> {
    l.iter()
        .zip(u.iter())
        .chain(lb.iter().zip(ub.iter()))
        .map(|(a, b)| a == b)
        .collect()
}

/// Stack general rows and variable bounds into `(l, u)`.
pub fn stacked_bounds(p: &QpProblem) -> (DVector<f64>, DVector<f64>) {
    let (_, lg, ug) = stack_general(p);
    let m = lg.len() + p.n();
    let l = DVector::from_iterator(m, lg.iter().chain(p.lb.iter()).copied());
    let u = DVector::from_iterator(m, ug.iter().chain(p.ub.iter()).copied());
    (l, u)
}

pub fn solve_qp_with(problem: &QpProblem, settings: QpSettings, warm: Option<&WarmStart>) -> Result<QpSolution> {
    if !(settings.tol_primal > 0.0 && settings.tol_dual > 0.0) {
        return Err(Error::InvalidParameter("tolerances must be positive".into()));
    }
    let mut ws = QpWorkspace::from_problem(problem, settings)?;
    let (l, u) = stacked_bounds(problem);
    ws.solve(&problem.f, &l, &u, warm)
}

pub fn solve_qp(problem: &QpProblem, tol_primal: f64, tol_dual: f64, max_iter: usize) -> Result<QpSolution> {
    let settings = QpSettings {
        tol_primal,
        tol_dual,
        max_iter,
        ..QpSettings::default()
    };
    solve_qp_with(problem, settings, None)
}

impl QpSolution {
    pub fn warm_start(&self) -> WarmStart {
        WarmStart {
            x: self.x_opt.clone(),
            z: self.z.clone(),
            y: self.y.clone(),
        }
    }
}
