//! Infinite-horizon discrete-time LQR via fixed-point Riccati iteration.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linmodel::{serde_matrix, CostWeights, LtiModel};

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LqrSolution {
    #[serde(rename = "P", with = "serde_matrix")]
    pub p: DMatrix<f64>,
    /// `u = K x`, so the closed loop is `A + B K`.
    #[serde(rename = "K", with = "serde_matrix")]
    pub k: DMatrix<f64>,
    pub spectral_radius: f64,
    pub iterations: usize,
    /// `‖P − F(P)‖∞` of the returned `P` under one more iteration.
    pub residual: f64,
}

impl LqrSolution {
    pub fn closed_loop(&self, model: &LtiModel) -> DMatrix<f64> {
        &model.a + &model.b * &self.k
    }
}

fn inf_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Solve `(R + BᵀPB) X = rhs`, regularizing once if the system is numerically singular.
fn solve_gain_system(s: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(ch) = s.clone().cholesky() {
        return Ok(ch.solve(rhs));
    }
    let n = s.nrows();
    let reg = s + DMatrix::identity(n, n) * (1e-12 * (1.0 + s.abs().max()));
    reg.cholesky()
        .map(|ch| ch.solve(rhs))
        .ok_or_else(|| Error::Numeric("R + BᵀPB is not invertible".into()))
}

/// One Riccati map application `F(P) = AᵀPA − AᵀPB(R + BᵀPB)⁻¹BᵀPA + Q`,
/// symmetrized.
pub fn riccati_map(model: &LtiModel, weights: &CostWeights, p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (a, b) = (&model.a, &model.b);
    let pa = p * a;
    let bt_pa = b.transpose() * &pa;
    let s = &weights.r + b.transpose() * p * b;
    let x = solve_gain_system(&s, &bt_pa)?;
    let next = a.transpose() * &pa - bt_pa.transpose() * x + &weights.q;
    Ok((&next + next.transpose()) * 0.5)
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues()
        .iter()
        .map(|c| c.norm())
        .fold(0.0, f64::max)
}

pub fn solve_dare(model: &LtiModel, weights: &CostWeights, tol: f64, max_iter: usize) -> Result<LqrSolution> {
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter("tol must be positive".into()));
    }
    if weights.q.nrows() != model.nx || weights.r.nrows() != model.nu {
        return Err(Error::DimensionMismatch {
            what: "weights",
            expected: model.nx,
            got: weights.q.nrows(),
        });
    }
    let mut p = weights.q.clone();
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < max_iter {
        let next = riccati_map(model, weights, &p)?;
        residual = inf_norm(&(&next - &p));
        p = next;
        iterations += 1;
        if !residual.is_finite() {
            break;
        }
        if residual < tol {
            break;
        }
    }
    if !(residual < tol) {
        return Err(Error::NonConvergence { iterations, residual });
    }
    let check = inf_norm(&(riccati_map(model, weights, &p)? - &p));
    let s = &weights.r + model.b.transpose() * &p * &model.b;
    let k = -solve_gain_system(&s, &(model.b.transpose() * &p * &model.a))?;
    let ak = &model.a + &model.b * &k;
    let rho = spectral_radius(&ak);
    if !(rho < 1.0) {
        return Err(Error::Unstable(rho));
    }
    Ok(LqrSolution {
        p,
        k,
        spectral_radius: rho,
        iterations,
        residual: check,
    })
}
