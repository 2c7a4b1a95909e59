//! Trajectory-tracking MPC and its robust tube variant with ancillary feedback.
//!
//! The QP is built in stacked form: the decision vector interleaves
//! `x̌_0, ǔ_0, x̌_1, ǔ_1, …, x̌_N` with the dynamics as equality rows. Inputs
//! inside the QP are deviations from the trim input.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linmodel::{tighten_input_box, tighten_input_box_by, tighten_state_box, BoxSet, CostWeights, LtiModel};
use crate::qp::{QpSettings, QpSolution, QpStatus, QpWorkspace, WarmStart};
use crate::tube::TubeApprox;

/// `N + 1` reference points. Each point holds the leading state components
/// (position and velocity for the quadrotor); the rest are implicitly zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceWindow {
    points: Vec<[f64; 6]>,
}

impl ReferenceWindow {
    pub fn new(points: Vec<[f64; 6]>) -> Self {
        Self { points }
    }

    /// Window for models with fewer than six state components; extra
    /// entries are ignored by the controller.
    pub fn from_slices(points: &[&[f64]]) -> Self {
        Self {
            points: points
                .iter()
                .map(|p| std::array::from_fn(|i| p.get(i).copied().unwrap_or(0.0)))
                .collect(),
        }
    }

    /// Constant window.
    pub fn constant(point: [f64; 6], horizon: usize) -> Self {
        Self {
            points: vec![point; horizon + 1],
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn horizon(&self) -> usize {
        self.points.len().saturating_sub(1)
    }

    pub fn point(&self, k: usize) -> [f64; 6] {
        self.points[k]
    }

    pub fn points(&self) -> &[[f64; 6]] {
        &self.points
    }

    /// Full-state target for point `k`.
    pub fn target(&self, k: usize, nx: usize) -> DVector<f64> {
        let p = &self.points[k];
        DVector::from_fn(nx, |i, _| if i < 6 { p[i] } else { 0.0 })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RtmpcSolution {
    pub x_check0: Vec<f64>,
    /// Feedforward action (absolute units).
    pub u_check0: Vec<f64>,
    /// `u_check0 + K (x_t − x_check0)` before saturation.
    pub u_ancillary: Vec<f64>,
    /// Executed action, saturated to U.
    pub u_exec: Vec<f64>,
    pub saturated: bool,
    pub predicted_states: Vec<Vec<f64>>,
    pub qp_status: QpStatus,
    pub qp_iterations: usize,
    pub qp_primal_residual: f64,
    pub qp_dual_residual: f64,
    #[serde(skip)]
    pub solve_time: Duration,
}

/// Static controller description.
#[derive(Debug, Clone)]
pub struct MpcSetup {
    pub model: LtiModel,
    pub weights: CostWeights,
    pub state_box: BoxSet,
    /// Absolute input bounds.
    pub input_box: BoxSet,
    /// Trim input the QP deviations are taken about.
    pub trim: DVector<f64>,
    pub horizon: usize,
    pub qp: QpSettings,
}

impl MpcSetup {
    fn check(&self) -> Result<()> {
        let (nx, nu) = (self.model.nx, self.model.nu);
        if self.horizon == 0 {
            return Err(Error::InvalidParameter("horizon must be at least 1".into()));
        }
        let dims = [
            ("state box", nx, self.state_box.dim()),
            ("input box", nu, self.input_box.dim()),
            ("trim", nu, self.trim.len()),
            ("Q", nx, self.weights.q.nrows()),
            ("R", nu, self.weights.r.nrows()),
        ];
        for (what, expected, got) in dims {
            if expected != got {
                return Err(Error::DimensionMismatch { what, expected, got });
            }
        }
        Ok(())
    }
}

/// How the input set is tightened by the tube.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InputTightening {
    /// Use the tube's sampled envelope of `K e` when available.
    #[default]
    Sampled,
    /// Interval bound `Σ|K||z|` over the whole box.
    Interval,
}

/// Nominal or robust-tube MPC controller with warm-started QP state.
#[derive(Debug, Clone)]
pub struct TubeMpc {
    setup: MpcSetup,
    gain: DMatrix<f64>,
    tube: TubeApprox,
    tight_state: BoxSet,
    tight_input: BoxSet,
    ws: QpWorkspace,
    f_template: Vec<DMatrix<f64>>,
    last: Option<QpSolution>,
    pub warm_start: bool,
}

impl TubeMpc {
    /// Nominal MPC: `x̌_0 = x_t`, no tightening, no ancillary feedback.
    pub fn nominal(setup: MpcSetup) -> Result<Self> {
        let nx = setup.model.nx;
        let nu = setup.model.nu;
        Self::build(setup, DMatrix::zeros(nu, nx), TubeApprox::zero(nx), InputTightening::Interval)
    }

    /// Robust tube MPC with ancillary gain `K`.
    pub fn robust(setup: MpcSetup, gain: DMatrix<f64>, tube: TubeApprox, tightening: InputTightening) -> Result<Self> {
        Self::build(setup, gain, tube, tightening)
    }

    fn build(setup: MpcSetup, gain: DMatrix<f64>, tube: TubeApprox, tightening: InputTightening) -> Result<Self> {
        setup.check()?;
        let (nx, nu, n_h) = (setup.model.nx, setup.model.nu, setup.horizon);
        if gain.nrows() != nu || gain.ncols() != nx {
            return Err(Error::DimensionMismatch {
                what: "ancillary gain",
                expected: nu * nx,
                got: gain.nrows() * gain.ncols(),
            });
        }
        let tight_state = tighten_state_box(&setup.state_box, &tube.z_box)?;
        let tight_input = match (&tube.correction_box, tightening) {
            (Some(c), InputTightening::Sampled) => tighten_input_box_by(&setup.input_box, c)?,
            _ => tighten_input_box(&setup.input_box, &gain, &tube.z_box)?,
        };

        let stage = nx + nu;
        let n = n_h * stage + nx;
        let mut h = DMatrix::<f64>::zeros(n, n);
        for k in 0..n_h {
            let xi = k * stage;
            h.view_mut((xi, xi), (nx, nx)).copy_from(&(&setup.weights.q * 2.0));
            h.view_mut((xi + nx, xi + nx), (nu, nu)).copy_from(&(&setup.weights.r * 2.0));
        }
        let xn = n_h * stage;
        h.view_mut((xn, xn), (nx, nx)).copy_from(&(&setup.weights.p * 2.0));

        let mut g = DMatrix::<f64>::zeros(n_h * nx, n);
        for k in 0..n_h {
            let row = k * nx;
            let xi = k * stage;
            g.view_mut((row, xi), (nx, nx)).copy_from(&(-&setup.model.a));
            g.view_mut((row, xi + nx), (nx, nu)).copy_from(&(-&setup.model.b));
            g.view_mut((row, xi + stage), (nx, nx)).fill_with_identity();
        }
        // placeholder pattern; refactored on the first solve
        let pattern = vec![true; n_h * nx].into_iter().chain(std::iter::repeat_n(false, n)).collect();
        let ws = QpWorkspace::new(&h, &g, pattern, setup.qp)?;
        let f_template = (0..=n_h)
            .map(|k| if k < n_h { &setup.weights.q * -2.0 } else { &setup.weights.p * -2.0 })
            .collect();
        Ok(Self {
            setup,
            gain,
            tube,
            tight_state,
            tight_input,
            ws,
            f_template,
            last: None,
            warm_start: true,
        })
    }

    pub fn setup(&self) -> &MpcSetup {
        &self.setup
    }

    pub fn gain(&self) -> &DMatrix<f64> {
        &self.gain
    }

    pub fn tube(&self) -> &TubeApprox {
        &self.tube
    }

    pub fn tightened_state_box(&self) -> &BoxSet {
        &self.tight_state
    }

    pub fn tightened_input_box(&self) -> &BoxSet {
        &self.tight_input
    }

    /// Forget the warm start (call between episodes).
    pub fn reset(&mut self) {
        self.last = None;
    }

    fn dims(&self) -> (usize, usize, usize, usize) {
        let (nx, nu, n_h) = (self.setup.model.nx, self.setup.model.nu, self.setup.horizon);
        (nx, nu, n_h, nx + nu)
    }

    /// Stacked bounds for a given `x̌_0` box.
    fn bounds(&self, x0_box: &BoxSet) -> (DVector<f64>, DVector<f64>) {
        let (nx, nu, n_h, stage) = self.dims();
        let mg = n_h * nx;
        let n = n_h * stage + nx;
        let mut l = DVector::zeros(mg + n);
        let mut u = DVector::zeros(mg + n);
        for k in 0..=n_h {
            let xi = mg + k * stage;
            let xb = if k == 0 { x0_box } else { &self.tight_state };
            for i in 0..nx {
                l[xi + i] = xb.lower()[i];
                u[xi + i] = xb.upper()[i];
            }
            if k < n_h {
                for j in 0..nu {
                    l[xi + nx + j] = self.tight_input.lower()[j] - self.setup.trim[j];
                    u[xi + nx + j] = self.tight_input.upper()[j] - self.setup.trim[j];
                }
            }
        }
        (l, u)
    }

    fn linear_term(&self, window: &ReferenceWindow) -> Result<DVector<f64>> {
        let (nx, _, n_h, stage) = self.dims();
        if window.len() != n_h + 1 {
            return Err(Error::DimensionMismatch {
                what: "reference window",
                expected: n_h + 1,
                got: window.len(),
            });
        }
        let n = n_h * stage + nx;
        let mut f = DVector::zeros(n);
        for k in 0..=n_h {
            let r = window.target(k, nx);
            let fk = &self.f_template[k] * r;
            f.rows_mut(k * stage, nx).copy_from(&fk);
        }
        Ok(f)
    }

    /// Previous solution shifted one stage forward.
    fn shifted_warm_start(&self) -> Option<WarmStart> {
        let last = self.last.as_ref()?;
        let (nx, _, n_h, stage) = self.dims();
        let mg = n_h * nx;
        let n = n_h * stage + nx;
        // stage i takes stage i + 1; the final stage keeps its value
        let shift = |v: &DVector<f64>, off: usize, len: usize, block: usize| {
            let mut out = v.clone();
            for i in 0..len.saturating_sub(block) {
                out[off + i] = v[off + i + block];
            }
            out
        };
        let x = shift(&last.x_opt, 0, n, stage);
        let z = shift(&shift(&last.z, 0, mg, nx), mg, n, stage);
        let y = shift(&shift(&last.y, 0, mg, nx), mg, n, stage);
        Some(WarmStart { x, z, y })
    }

    fn solve(&mut self, x0_box: &BoxSet, window: &ReferenceWindow) -> Result<(QpSolution, Duration)> {
        let start = Instant::now();
        let f = self.linear_term(window)?;
        let (l, u) = self.bounds(x0_box);
        let warm = if self.warm_start { self.shifted_warm_start() } else { None };
        let sol = self.ws.solve(&f, &l, &u, warm.as_ref())?;
        let elapsed = start.elapsed();
        match sol.status {
            QpStatus::Infeasible => {
                self.last = None;
                Err(Error::ExpertInfeasible("QP infeasible".into()))
            }
            QpStatus::MaxIter => {
                log::warn!(
                    "MPC QP hit max_iter (primal {:e}, dual {:e})",
                    sol.primal_residual,
                    sol.dual_residual
                );
                self.last = Some(sol.clone());
                Ok((sol, elapsed))
            }
            QpStatus::Solved => {
                self.last = Some(sol.clone());
                Ok((sol, elapsed))
            }
        }
    }

    fn check_state(&self, x_t: &[f64]) -> Result<()> {
        let nx = self.setup.model.nx;
        if x_t.len() != nx {
            return Err(Error::DimensionMismatch {
                what: "state",
                expected: nx,
                got: x_t.len(),
            });
        }
        if x_t.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(())
    }

    /// Nominal MPC step with `x̌_0 = x_t`; returns the absolute first action.
    pub fn mpc_step(&mut self, x_t: &[f64], window: &ReferenceWindow) -> Result<DVector<f64>> {
        self.check_state(x_t)?;
        if let Some(axis) = self.setup.state_box.first_violation(x_t) {
            return Err(Error::ExpertInfeasible(format!("state outside X on axis {axis}")));
        }
        let x0 = BoxSet::new(x_t.to_vec(), x_t.to_vec())?;
        let (sol, _) = self.solve(&x0, window)?;
        let (nx, nu, _, _) = self.dims();
        Ok(DVector::from_fn(nu, |j, _| sol.x_opt[nx + j] + self.setup.trim[j]))
    }

    /// Robust tube MPC step followed by the ancillary controller.
    pub fn rtmpc_step(&mut self, x_t: &[f64], window: &ReferenceWindow) -> Result<RtmpcSolution> {
        self.check_state(x_t)?;
        let (nx, nu, n_h, stage) = self.dims();
        let z = &self.tube.z_box;
        // x_t ∈ x̌_0 + Z  ⇔  x̌_0 ∈ [x_t − z_hi, x_t − z_lo]
        let lo: Vec<f64> = (0..nx).map(|i| x_t[i] - z.upper()[i]).collect();
        let hi: Vec<f64> = (0..nx).map(|i| x_t[i] - z.lower()[i]).collect();
        let x0_box = BoxSet::new(lo, hi)?
            .intersect(&self.tight_state)
            .ok_or_else(|| Error::ExpertInfeasible("x_t − Ẑ does not meet X ⊖ Ẑ".into()))?;
        let (sol, solve_time) = self.solve(&x0_box, window)?;
        let x_check0: Vec<f64> = (0..nx).map(|i| sol.x_opt[i]).collect();
        let u_check0: Vec<f64> = (0..nu).map(|j| sol.x_opt[nx + j] + self.setup.trim[j]).collect();
        let err = DVector::from_fn(nx, |i, _| x_t[i] - x_check0[i]);
        let corr = &self.gain * err;
        let u_ancillary: Vec<f64> = (0..nu).map(|j| u_check0[j] + corr[j]).collect();
        let mut u_exec = u_ancillary.clone();
        let saturated = self.setup.input_box.clamp(&mut u_exec);
        if saturated {
            log::debug!("ancillary action saturated: {u_ancillary:?}");
        }
        let predicted_states = (0..=n_h)
            .map(|k| sol.x_opt.rows(k * stage, nx).iter().copied().collect())
            .collect();
        Ok(RtmpcSolution {
            x_check0,
            u_check0,
            u_ancillary,
            u_exec,
            saturated,
            predicted_states,
            qp_status: sol.status,
            qp_iterations: sol.iterations,
            qp_primal_residual: sol.primal_residual,
            qp_dual_residual: sol.dual_residual,
            solve_time,
        })
    }
}

/// One-shot nominal MPC (no warm start).
pub fn mpc_step(setup: &MpcSetup, x_t: &[f64], window: &ReferenceWindow) -> Result<DVector<f64>> {
    TubeMpc::nominal(setup.clone())?.mpc_step(x_t, window)
}

/// One-shot robust tube MPC (no warm start).
pub fn rtmpc_step(
    setup: &MpcSetup,
    tube: &TubeApprox,
    gain: &DMatrix<f64>,
    x_t: &[f64],
    window: &ReferenceWindow,
) -> Result<RtmpcSolution> {
    TubeMpc::robust(setup.clone(), gain.clone(), tube.clone(), InputTightening::Sampled)?.rtmpc_step(x_t, window)
}
