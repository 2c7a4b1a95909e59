//! Assembles the tube MPC expert for the quadrotor environment.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linmodel::{linearize_quadrotor_hover, BoxSet, CostWeights, NU, NX};
use crate::qp::QpSettings;
use crate::quadsim::Environment;
use crate::riccati::{solve_dare, LqrSolution, DEFAULT_MAX_ITER, DEFAULT_TOL};
use crate::rtmpc::{InputTightening, MpcSetup, TubeMpc};
use crate::tube::{estimate_tube, TubeApprox, TubeOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpertConfig {
    /// Diagonal of Q (8 entries).
    pub q_diag: Vec<f64>,
    /// Diagonal of R (3 entries).
    pub r_diag: Vec<f64>,
    /// Disturbance bound as a fraction of the vehicle weight.
    pub w_fraction: f64,
    pub tube: TubeOptions,
    pub tightening: InputTightening,
    pub qp: QpSettings,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        ExpertConfig {
            q_diag: vec![10.0; NX],
            r_diag: vec![1.0, 10.0, 10.0],
            w_fraction: 0.3,
            tube: TubeOptions::default(),
            tightening: InputTightening::Sampled,
            qp: QpSettings::default(),
        }
    }
}

impl ExpertConfig {
    pub fn weights(&self) -> Result<CostWeights> {
        if self.q_diag.len() != NX || self.r_diag.len() != NU {
            return Err(Error::InvalidParameter(format!(
                "expected {NX} Q and {NU} R diagonal entries, got {} and {}",
                self.q_diag.len(),
                self.r_diag.len()
            )));
        }
        CostWeights::from_diagonals(&self.q_diag, &self.r_diag)
    }
}

/// The expert controller together with the quantities it was built from.
#[derive(Debug, Clone)]
pub struct Expert {
    pub lqr: LqrSolution,
    /// Q, R and the DARE terminal weight P.
    pub weights: CostWeights,
    pub w_box: BoxSet,
    pub mpc: TubeMpc,
}

impl Expert {
    pub fn tube(&self) -> &TubeApprox {
        self.mpc.tube()
    }

    /// A controller instance with fresh warm-start state.
    pub fn fresh(&self) -> TubeMpc {
        let mut m = self.mpc.clone();
        m.reset();
        m
    }
}

pub fn build_expert(env: &Environment, cfg: &ExpertConfig) -> Result<Expert> {
    if !(cfg.w_fraction >= 0.0 && cfg.w_fraction.is_finite()) {
        return Err(Error::InvalidParameter(format!("w_fraction {}", cfg.w_fraction)));
    }
    let model = linearize_quadrotor_hover(&env.params, env.dt)?;
    let base = cfg.weights()?;
    let lqr = solve_dare(&model, &base, DEFAULT_TOL, DEFAULT_MAX_ITER)?;
    let weights = base.with_terminal(lqr.p.clone())?;
    let w_box = env.params.disturbance_box(cfg.w_fraction, env.dt);
    let a_k = lqr.closed_loop(&model);
    let tube = estimate_tube(&a_k, Some(&lqr.k), &w_box, &cfg.tube)?;
    let setup = MpcSetup {
        model,
        weights: weights.clone(),
        state_box: env.params.state_box(),
        input_box: env.params.input_box(),
        trim: DVector::from_column_slice(&env.params.hover_input()),
        horizon: env.horizon,
        qp: cfg.qp,
    };
    let mpc = TubeMpc::robust(setup, lqr.k.clone(), tube, cfg.tightening)?;
    Ok(Expert { lqr, weights, w_box, mpc })
}
