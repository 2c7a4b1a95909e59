//! Nonlinear quadrotor point-mass simulator with first-order tilt dynamics,
//! reference generators and episode rollouts.

use std::io::Write;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linmodel::{
    BoxSet, CostWeights, NU, NX, PITCH, PITCH_CMD, ROLL, ROLL_CMD, THRUST, VX, VY, VZ,
};
use crate::rtmpc::ReferenceWindow;

pub type State = [f64; NX];
pub type Action = [f64; NU];

/// Physical parameters and operating limits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuadParams {
    /// kg
    pub mass: f64,
    /// m/s²
    pub gravity: f64,
    /// first-order tilt lag, s
    pub tilt_tau: f64,
    /// linear drag per axis, 1/s
    pub drag: f64,
    /// rad, applies to both tilt state and tilt command
    pub tilt_limit: f64,
    /// mass-normalized thrust bounds, m/s²
    pub thrust_min: f64,
    pub thrust_max: f64,
    /// absolute position bounds, m
    pub flight_space: BoxSet,
    /// per-axis velocity bound, m/s
    pub velocity_limit: f64,
}

impl Default for QuadParams {
    fn default() -> Self {
        let g = 9.81;
        Self {
            mass: 1.0,
            gravity: g,
            tilt_tau: 0.15,
            drag: 0.1,
            tilt_limit: 0.5,
            thrust_min: 0.3 * g,
            thrust_max: 1.7 * g,
            flight_space: BoxSet::new(vec![-5.0, -5.0, 0.2], vec![5.0, 5.0, 4.0])
                .expect("static box"),
            velocity_limit: 4.0,
        }
    }
}

impl QuadParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("mass", self.mass),
            ("gravity", self.gravity),
            ("tilt_tau", self.tilt_tau),
            ("tilt_limit", self.tilt_limit),
            ("thrust_max", self.thrust_max),
            ("velocity_limit", self.velocity_limit),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.drag >= 0.0) {
            return Err(Error::InvalidParameter(format!("drag must be non-negative, got {}", self.drag)));
        }
        if !(self.thrust_min >= 0.0 && self.thrust_min < self.thrust_max) {
            return Err(Error::InvalidParameter("thrust_min must lie in [0, thrust_max)".into()));
        }
        if self.flight_space.dim() != 3 {
            return Err(Error::DimensionMismatch {
                what: "flight space",
                expected: 3,
                got: self.flight_space.dim(),
            });
        }
        Ok(())
    }

    pub fn weight(&self) -> f64 {
        self.mass * self.gravity
    }

    pub fn hover_input(&self) -> Action {
        [self.weight(), 0.0, 0.0]
    }

    /// State constraint set X.
    pub fn state_box(&self) -> BoxSet {
        let fs = &self.flight_space;
        let v = self.velocity_limit;
        let t = self.tilt_limit;
        let mut lo = fs.lower().to_vec();
        let mut hi = fs.upper().to_vec();
        lo.extend([-v, -v, -v, -t, -t]);
        hi.extend([v, v, v, t, t]);
        BoxSet::new(lo, hi).expect("validated limits")
    }

    /// Input constraint set U in absolute units (thrust in N).
    pub fn input_box(&self) -> BoxSet {
        let t = self.tilt_limit;
        BoxSet::new(
            vec![self.mass * self.thrust_min, -t, -t],
            vec![self.mass * self.thrust_max, t, t],
        )
        .expect("validated limits")
    }

    /// Disturbance set W in state space for a force bound of `fraction` of the
    /// weight, entering the velocity through one Euler step.
    pub fn disturbance_box(&self, fraction: f64, dt: f64) -> BoxSet {
        let dv = fraction * self.gravity * dt;
        let mut half = [0.0; NX];
        half[VX] = dv;
        half[VY] = dv;
        half[VZ] = dv;
        BoxSet::symmetric(&half).expect("non-negative widths")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    #[default]
    Rk4,
    Euler,
}

/// Continuous-time vector field. `w` is an external force in N.
pub fn derivative(x: &State, u: &Action, w: &[f64; 3], params: &QuadParams, drag: f64) -> State {
    let (roll, pitch) = (x[ROLL], x[PITCH]);
    let acc = u[THRUST] / params.mass;
    let dir = [
        roll.cos() * pitch.sin(),
        -roll.sin(),
        roll.cos() * pitch.cos(),
    ];
    let mut dx = [0.0; NX];
    for i in 0..3 {
        dx[i] = x[VX + i];
        dx[VX + i] = acc * dir[i] - drag * x[VX + i] + w[i] / params.mass;
    }
    dx[VZ] -= params.gravity;
    dx[ROLL] = (u[ROLL_CMD] - roll) / params.tilt_tau;
    dx[PITCH] = (u[PITCH_CMD] - pitch) / params.tilt_tau;
    dx
}

/// Saturate an action to the input box.
pub fn saturate(u: &Action, params: &QuadParams) -> Action {
    let mut out = *u;
    params.input_box().clamp(&mut out);
    out
}

fn axpy(x: &State, h: f64, k: &State) -> State {
    std::array::from_fn(|i| x[i] + h * k[i])
}

/// One truth-model step with the action held over `dt`.
pub fn step_with(
    x: &State,
    u: &Action,
    w: &[f64; 3],
    params: &QuadParams,
    drag: f64,
    dt: f64,
    integrator: Integrator,
) -> State {
    let u = saturate(u, params);
    let f = |s: &State| derivative(s, &u, w, params, drag);
    match integrator {
        Integrator::Euler => axpy(x, dt, &f(x)),
        Integrator::Rk4 => {
            let k1 = f(x);
            let k2 = f(&axpy(x, 0.5 * dt, &k1));
            let k3 = f(&axpy(x, 0.5 * dt, &k2));
            let k4 = f(&axpy(x, dt, &k3));
            std::array::from_fn(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        }
    }
}

/// RK4 step with the nominal drag coefficient.
pub fn step(x: &State, u: &Action, w: &[f64; 3], params: &QuadParams, dt: f64) -> State {
    step_with(x, u, w, params, params.drag, dt, Integrator::Rk4)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceKind {
    Lemniscate,
    Circle,
    Step,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReferenceParams {
    pub kind: ReferenceKind,
    /// m
    pub radius: f64,
    /// peak speed, m/s
    pub speed: f64,
    pub center: [f64; 3],
    /// s
    pub duration: f64,
}

impl Default for ReferenceParams {
    fn default() -> Self {
        Self {
            kind: ReferenceKind::Lemniscate,
            radius: 0.8,
            speed: 1.0,
            center: [0.0, 0.0, 2.0],
            duration: 7.0,
        }
    }
}

/// Sampled reference positions and velocities at stride `dt`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub dt: f64,
    pub positions: Vec<[f64; 3]>,
    pub velocities: Vec<[f64; 3]>,
}

impl Reference {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Number of control steps covered by the reference.
    pub fn steps(&self) -> usize {
        self.len().saturating_sub(1)
    }

    /// Point `k` as an 8-dimensional target with zero tilt.
    pub fn target(&self, k: usize) -> State {
        let k = k.min(self.len() - 1);
        let p = self.positions[k];
        let v = self.velocities[k];
        [p[0], p[1], p[2], v[0], v[1], v[2], 0.0, 0.0]
    }

    /// `horizon + 1` targets starting at step `t`, holding the final point
    /// past the end.
    pub fn window(&self, t: usize, horizon: usize) -> ReferenceWindow {
        let points = (0..=horizon)
            .map(|k| {
                let idx = (t + k).min(self.len() - 1);
                let p = self.positions[idx];
                let v = self.velocities[idx];
                [p[0], p[1], p[2], v[0], v[1], v[2]]
            })
            .collect();
        ReferenceWindow::new(points)
    }
}

/// Build a reference trajectory.
pub fn make_reference(rp: &ReferenceParams, params: &QuadParams, dt: f64) -> Result<Reference> {
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter("dt must be positive".into()));
    }
    let steps_f = rp.duration / dt;
    let steps = steps_f.round();
    if !(rp.duration > 0.0) || (steps_f - steps).abs() > 1e-9 {
        return Err(Error::InvalidParameter(format!(
            "duration {} is not an integral multiple of dt {}",
            rp.duration, dt
        )));
    }
    let steps = steps as usize;
    if !params.flight_space.contains(&rp.center) {
        return Err(Error::InvalidParameter("reference center outside flight space".into()));
    }
    if rp.kind != ReferenceKind::Step {
        if !(rp.radius > 0.0 && rp.radius.is_finite()) {
            return Err(Error::InvalidParameter(format!("radius must be positive, got {}", rp.radius)));
        }
        if !(rp.speed > 0.0 && rp.speed <= params.velocity_limit) {
            return Err(Error::InvalidParameter(format!(
                "speed {} outside (0, {}]",
                rp.speed, params.velocity_limit
            )));
        }
    }
    let c = rp.center;
    let (a, s) = (rp.radius, rp.speed);
    let mut positions = Vec::with_capacity(steps + 1);
    let mut velocities = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let t = k as f64 * dt;
        let (p, v) = match rp.kind {
            ReferenceKind::Step => (c, [0.0; 3]),
            ReferenceKind::Circle => {
                let w = s / a;
                let (sn, cs) = (w * t).sin_cos();
                ([c[0] + a * cs, c[1] + a * sn, c[2]], [-a * w * sn, a * w * cs, 0.0])
            }
            ReferenceKind::Lemniscate => {
                // Gerono: (a sin θ, a sin θ cos θ), peak speed √2·a·ω at θ = 0
                let w = s / (std::f64::consts::SQRT_2 * a);
                let th = w * t;
                (
                    [c[0] + a * th.sin(), c[1] + 0.5 * a * (2.0 * th).sin(), c[2]],
                    [a * w * th.cos(), a * w * (2.0 * th).cos(), 0.0],
                )
            }
        };
        positions.push(p);
        velocities.push(v);
    }
    Ok(Reference { dt, positions, velocities })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DisturbanceMode {
    #[default]
    None,
    /// i.i.d. per-step force, uniform in the W box
    UniformRandom,
    /// constant force per episode, horizontal-dominant direction
    AdversarialConstant,
    /// no force; the truth model uses `mismatch_drag` instead of the nominal drag
    DragMismatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DisturbanceSpec {
    pub mode: DisturbanceMode,
    /// Upper bound on the force as a fraction of the weight.
    pub magnitude_fraction: f64,
    /// Lower bound of the adversarial constant magnitude.
    pub min_fraction: f64,
    pub mismatch_drag: f64,
    /// Mixed into the rollout seed for the force direction.
    pub direction_seed: u64,
}

impl Default for DisturbanceSpec {
    fn default() -> Self {
        Self {
            mode: DisturbanceMode::None,
            magnitude_fraction: 0.3,
            min_fraction: 0.25,
            mismatch_drag: 0.3,
            direction_seed: 0,
        }
    }
}

impl DisturbanceSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn uniform(fraction: f64) -> Self {
        Self {
            mode: DisturbanceMode::UniformRandom,
            magnitude_fraction: fraction,
            ..Self::default()
        }
    }

    /// T1: constant wind-like force of 25–30 % of the weight.
    pub fn wind() -> Self {
        Self {
            mode: DisturbanceMode::AdversarialConstant,
            ..Self::default()
        }
    }

    /// T2: drag coefficient mismatch.
    pub fn drag_mismatch(drag: f64) -> Self {
        Self {
            mode: DisturbanceMode::DragMismatch,
            mismatch_drag: drag,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=0.3).contains(&self.magnitude_fraction) {
            return Err(Error::InvalidParameter(format!(
                "disturbance fraction {} outside [0, 0.3]",
                self.magnitude_fraction
            )));
        }
        if self.mode == DisturbanceMode::AdversarialConstant
            && !(0.0..=self.magnitude_fraction).contains(&self.min_fraction)
        {
            return Err(Error::InvalidParameter("min_fraction must lie in [0, magnitude_fraction]".into()));
        }
        if !(self.mismatch_drag >= 0.0) {
            return Err(Error::InvalidParameter("mismatch_drag must be non-negative".into()));
        }
        Ok(())
    }

    /// Per-episode disturbance process.
    pub fn sampler(&self, params: &QuadParams, rng: &mut ChaCha8Rng) -> DisturbanceSampler {
        let bound = self.magnitude_fraction * params.weight();
        let constant = match self.mode {
            DisturbanceMode::AdversarialConstant => {
                let mag = rng.random_range(self.min_fraction..=self.magnitude_fraction) * params.weight();
                let azimuth = rng.random_range(0.0..std::f64::consts::TAU);
                let elevation = rng.random_range(-std::f64::consts::FRAC_PI_4..=std::f64::consts::FRAC_PI_4);
                let (se, ce) = elevation.sin_cos();
                let (sa, ca) = azimuth.sin_cos();
                [mag * ce * ca, mag * ce * sa, mag * se]
            }
            _ => [0.0; 3],
        };
        let drag = match self.mode {
            DisturbanceMode::DragMismatch => self.mismatch_drag,
            _ => params.drag,
        };
        DisturbanceSampler {
            mode: self.mode,
            bound,
            constant,
            drag,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DisturbanceSampler {
    mode: DisturbanceMode,
    bound: f64,
    constant: [f64; 3],
    /// drag coefficient of the truth model in this episode
    pub drag: f64,
}

impl DisturbanceSampler {
    pub fn next(&self, rng: &mut ChaCha8Rng) -> [f64; 3] {
        match self.mode {
            DisturbanceMode::UniformRandom if self.bound > 0.0 => {
                std::array::from_fn(|_| rng.random_range(-self.bound..=self.bound))
            }
            DisturbanceMode::AdversarialConstant => self.constant,
            _ => [0.0; 3],
        }
    }
}

/// Spread of the random initial state around the first reference point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitialSpread {
    pub position: f64,
    pub velocity: f64,
}

impl Default for InitialSpread {
    fn default() -> Self {
        Self {
            position: 0.3,
            velocity: 0.2,
        }
    }
}

impl InitialSpread {
    pub fn sample(&self, reference: &Reference, rng: &mut ChaCha8Rng) -> State {
        let mut x = reference.target(0);
        for i in 0..3 {
            if self.position > 0.0 {
                x[i] += rng.random_range(-self.position..=self.position);
            }
            if self.velocity > 0.0 {
                x[VX + i] += rng.random_range(-self.velocity..=self.velocity);
            }
        }
        x
    }
}

/// Anything mapping (step, state, reference window) to an action.
pub trait Controller {
    fn act(&mut self, t: usize, x: &State, window: &ReferenceWindow) -> Result<Action>;

    /// Clear any per-episode state.
    fn reset(&mut self) {}
}

impl<F> Controller for F
where
    F: FnMut(usize, &State, &ReferenceWindow) -> Result<Action>,
{
    fn act(&mut self, t: usize, x: &State, window: &ReferenceWindow) -> Result<Action> {
        self(t, x, window)
    }
}

/// Simulation environment shared by all rollouts of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub params: QuadParams,
    pub dt: f64,
    /// MPC horizon N; windows carry N + 1 points.
    pub horizon: usize,
    pub init: InitialSpread,
    pub integrator: Integrator,
}

impl Environment {
    pub fn new(params: QuadParams, dt: f64, horizon: usize) -> Result<Self> {
        params.validate()?;
        if !(dt > 0.0) || horizon == 0 {
            return Err(Error::InvalidParameter("dt > 0 and horizon >= 1 required".into()));
        }
        Ok(Self {
            params,
            dt,
            horizon,
            init: InitialSpread::default(),
            integrator: Integrator::Rk4,
        })
    }

    /// Run a full episode. The episode ends early on the first state
    /// constraint violation or controller failure.
    pub fn rollout<C: Controller + ?Sized>(
        &self,
        controller: &mut C,
        reference: &Reference,
        disturbance: &DisturbanceSpec,
        weights: &CostWeights,
        seed: u64,
    ) -> Result<Episode> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = self.init.sample(reference, &mut rng);
        self.rollout_from(controller, reference, disturbance, weights, x0, &mut rng)
    }

    pub fn rollout_from<C: Controller + ?Sized>(
        &self,
        controller: &mut C,
        reference: &Reference,
        disturbance: &DisturbanceSpec,
        weights: &CostWeights,
        x0: State,
        rng: &mut ChaCha8Rng,
    ) -> Result<Episode> {
        disturbance.validate()?;
        let mut dir_rng = ChaCha8Rng::seed_from_u64(rng.random::<u64>() ^ disturbance.direction_seed);
        let sampler = disturbance.sampler(&self.params, &mut dir_rng);
        let xbox = self.params.state_box();
        let hover = self.params.hover_input();
        controller.reset();
        let mut ep = Episode::default();
        let mut x = x0;
        ep.states.push(x);
        if xbox.first_violation(&x).is_some() {
            ep.violation = true;
            ep.failure = Some("initial state outside X".into());
            return Ok(ep);
        }
        for t in 0..reference.steps() {
            let window = reference.window(t, self.horizon);
            let u = match controller.act(t, &x, &window) {
                Ok(u) => u,
                Err(e) => {
                    ep.violation = true;
                    ep.failure = Some(e.to_string());
                    break;
                }
            };
            if u.iter().any(|v| !v.is_finite()) {
                ep.violation = true;
                ep.failure = Some("non-finite action".into());
                break;
            }
            let w = sampler.next(rng);
            let target = reference.target(t);
            ep.stage_costs.push(stage_cost_step(&x, &target, &u, &hover, weights));
            ep.actions.push(u);
            ep.references.push(window.point(0));
            ep.disturbances.push(w);
            x = step_with(&x, &u, &w, &self.params, sampler.drag, self.dt, self.integrator);
            ep.states.push(x);
            if let Some(axis) = xbox.first_violation(&x) {
                ep.violation = true;
                ep.failure = Some(format!(
                    "state constraint violated on {} at step {}",
                    crate::linmodel::STATE_NAMES[axis],
                    t + 1
                ));
                break;
            }
        }
        Ok(ep)
    }
}

/// `eᵀQe + δuᵀRδu` with `δu` the deviation from hover.
pub fn stage_cost_step(
    x: &State,
    target: &State,
    u: &Action,
    hover: &Action,
    weights: &CostWeights,
) -> f64 {
    let e = DVector::from_iterator(NX, x.iter().zip(target).map(|(a, b)| a - b));
    let du = DVector::from_iterator(NU, u.iter().zip(hover).map(|(a, b)| a - b));
    (e.transpose() * &weights.q * &e)[0] + (du.transpose() * &weights.r * &du)[0]
}

/// A closed-loop trajectory. `states` has one more entry than `actions`
/// unless the controller failed before acting.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub states: Vec<State>,
    pub actions: Vec<Action>,
    /// step-0 point (position, velocity) of each step's reference window
    pub references: Vec<[f64; 6]>,
    /// external force per step, N
    pub disturbances: Vec<[f64; 3]>,
    pub stage_costs: Vec<f64>,
    pub violation: bool,
    pub failure: Option<String>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn success(&self) -> bool {
        !self.violation
    }

    pub fn total_cost(&self) -> f64 {
        self.stage_costs.iter().sum()
    }

    /// One row per step: t, state, action, reference, disturbance, stage cost.
    pub fn write_csv<W: Write>(&self, dt: f64, mut out: W) -> std::io::Result<()> {
        let mut header = vec!["t".to_string()];
        header.extend(crate::linmodel::STATE_NAMES.iter().map(|s| s.to_string()));
        header.extend(crate::linmodel::INPUT_NAMES.iter().map(|s| s.to_string()));
        header.extend(["ref_px", "ref_py", "ref_pz", "ref_vx", "ref_vy", "ref_vz"].map(String::from));
        header.extend(["wx", "wy", "wz", "stage_cost"].map(String::from));
        writeln!(out, "{}", header.join(","))?;
        for k in 0..self.len() {
            let mut row = vec![format!("{:.3}", k as f64 * dt)];
            row.extend(self.states[k].iter().map(|v| v.to_string()));
            row.extend(self.actions[k].iter().map(|v| v.to_string()));
            row.extend(self.references[k].iter().map(|v| v.to_string()));
            row.extend(self.disturbances[k].iter().map(|v| v.to_string()));
            row.push(self.stage_costs[k].to_string());
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}
