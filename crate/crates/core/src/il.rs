//! Demonstration collection, dataset aggregation and the BC / DAgger loops
//! with optional domain randomization or tube sampling augmentation.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{label_actions, samples, SamplingMethod};
use crate::error::{Error, Result};
use crate::expert::Expert;
use crate::linmodel::{NU, NX};
use crate::mlp::{train, MlpPolicy, Standardizer, TrainConfig};
use crate::quadsim::{Action, Controller, DisturbanceSpec, Environment, Episode, Reference, State};
use crate::rtmpc::{ReferenceWindow, TubeMpc};
use crate::tube::stream_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Bc,
    Dagger,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    None,
    Dr,
    SaSparse,
    SaDense,
}

impl Augmentation {
    fn sampling(self) -> Option<SamplingMethod> {
        match self {
            Augmentation::SaSparse => Some(SamplingMethod::Sparse),
            Augmentation::SaDense => Some(SamplingMethod::Dense),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Demo,
    TubeSparse,
    TubeDense,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Demo => "demo",
            Provenance::TubeSparse => "tube_sparse",
            Provenance::TubeDense => "tube_dense",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub state: State,
    /// index into `Dataset::windows`
    pub window: usize,
    pub action: Action,
    pub provenance: Provenance,
    pub demo: usize,
    pub step: usize,
}

/// Aggregated training pairs. Tube samples share the reference window of
/// the step they were drawn around.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub entries: Vec<Entry>,
    pub windows: Vec<ReferenceWindow>,
    pub demo_count: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count(&self, provenance: Provenance) -> usize {
        self.entries.iter().filter(|e| e.provenance == provenance).count()
    }

    /// Append another dataset, re-indexing its windows.
    pub fn extend(&mut self, other: Dataset) {
        let offset = self.windows.len();
        self.windows.extend(other.windows);
        self.entries.extend(other.entries.into_iter().map(|mut e| {
            e.window += offset;
            e
        }));
        self.demo_count += other.demo_count;
    }

    pub fn features(&self, entry: &Entry, horizon: usize) -> Vec<f64> {
        features(&entry.state, &self.windows[entry.window], horizon)
    }

    /// Features and labels of all entries with `demo` in `demos`.
    pub fn training_pairs(&self, horizon: usize, demos: Option<usize>) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        self.entries
            .iter()
            .filter(|e| demos.is_none_or(|d| e.demo < d))
            .map(|e| (self.features(e, horizon), e.action.to_vec()))
            .unzip()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let mut header = vec!["demo".to_string(), "step".into(), "provenance".into()];
        header.extend(crate::linmodel::STATE_NAMES.iter().map(|s| s.to_string()));
        header.extend(crate::linmodel::INPUT_NAMES.iter().map(|s| format!("label_{s}")));
        header.extend(["ref_px", "ref_py", "ref_pz", "ref_vx", "ref_vy", "ref_vz"].map(String::from));
        writeln!(out, "{}", header.join(","))?;
        for e in &self.entries {
            let r = self.windows[e.window].point(0);
            let nums: Vec<String> = e.state.iter().chain(e.action.iter()).chain(r.iter()).map(|v| format!("{v}")).collect();
            writeln!(out, "{},{},{},{}", e.demo, e.step, e.provenance.as_str(), nums.join(","))?;
        }
        Ok(())
    }
}

/// Input dimension of a policy over `horizon` reference points.
pub fn feature_dim(horizon: usize) -> usize {
    NX + 6 * horizon
}

/// State followed by the first `horizon` window points.
pub fn features(x: &State, window: &ReferenceWindow, horizon: usize) -> Vec<f64> {
    let mut f = Vec::with_capacity(feature_dim(horizon));
    f.extend_from_slice(x);
    for k in 0..horizon {
        f.extend_from_slice(&window.point(k));
    }
    f
}

/// Runs a trained policy in closed loop.
pub struct PolicyController<'a> {
    pub policy: &'a MlpPolicy,
    pub horizon: usize,
}

impl Controller for PolicyController<'_> {
    fn act(&mut self, _t: usize, x: &State, window: &ReferenceWindow) -> Result<Action> {
        let u = self.policy.forward(&features(x, window, self.horizon))?;
        Ok([u[0], u[1], u[2]])
    }
}

/// Runs the expert alone in closed loop.
pub struct ExpertController {
    pub mpc: TubeMpc,
}

impl Controller for ExpertController {
    fn act(&mut self, _t: usize, x: &State, window: &ReferenceWindow) -> Result<Action> {
        let s = self.mpc.rtmpc_step(x, window)?;
        Ok([s.u_exec[0], s.u_exec[1], s.u_exec[2]])
    }

    fn reset(&mut self) {
        self.mpc.reset();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IlConfig {
    pub method: Method,
    pub augmentation: Augmentation,
    /// Mixing probability per demonstration index (DAgger only); indices past
    /// the end use 0.
    pub beta_schedule: Vec<f64>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for IlConfig {
    fn default() -> Self {
        IlConfig {
            method: Method::Bc,
            augmentation: Augmentation::None,
            beta_schedule: vec![1.0],
            epochs: 50,
            learning_rate: 1e-3,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl IlConfig {
    pub fn new(method: Method, augmentation: Augmentation) -> Self {
        IlConfig { method, augmentation, ..Default::default() }
    }

    pub fn label(&self) -> String {
        let m = match self.method {
            Method::Bc => "bc",
            Method::Dagger => "dagger",
        };
        let a = match self.augmentation {
            Augmentation::None => "none",
            Augmentation::Dr => "dr",
            Augmentation::SaSparse => "sa_sparse",
            Augmentation::SaDense => "sa_dense",
        };
        format!("{m}+{a}")
    }

    pub fn beta(&self, demo: usize) -> f64 {
        match self.method {
            Method::Bc => 1.0,
            Method::Dagger => self.beta_schedule.get(demo).copied().unwrap_or(0.0),
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig { epochs: self.epochs, learning_rate: self.learning_rate, batch_size: self.batch_size, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beta_schedule.iter().any(|b| !(0.0..=1.0).contains(b)) {
            return Err(Error::InvalidParameter("beta must lie in [0, 1]".into()));
        }
        self.train_config(0).validate()
    }
}

/// Environment, reference and disturbance models of one IL task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IlTask {
    pub env: Environment,
    pub reference: Reference,
    /// Collection domain.
    pub source: DisturbanceSpec,
    /// Disturbances injected by domain randomization.
    pub randomization: DisturbanceSpec,
}

#[derive(Debug, Clone)]
pub struct Demonstration {
    pub episode: Episode,
    pub data: Dataset,
    /// steps executed by the learner rather than the expert
    pub policy_steps: usize,
    /// the expert failed and nothing was kept
    pub aborted: bool,
}

struct Collector<'a> {
    mpc: TubeMpc,
    policy: Option<&'a MlpPolicy>,
    beta: f64,
    augmentation: Option<SamplingMethod>,
    horizon: usize,
    demo: usize,
    coin: ChaCha8Rng,
    data: Dataset,
    policy_steps: usize,
    expert_failed: bool,
}

impl Controller for Collector<'_> {
    fn act(&mut self, t: usize, x: &State, window: &ReferenceWindow) -> Result<Action> {
        let sol = match self.mpc.rtmpc_step(x, window) {
            Ok(s) => s,
            Err(e) => {
                self.expert_failed = true;
                return Err(e);
            }
        };
        let w = self.data.windows.len();
        self.data.windows.push(window.clone());
        let label = [sol.u_exec[0], sol.u_exec[1], sol.u_exec[2]];
        self.data.entries.push(Entry { state: *x, window: w, action: label, provenance: Demo, demo: self.demo, step: t });
        if let Some(method) = self.augmentation {
            let tube = self.mpc.tube();
            let pts = samples(method, &sol.x_check0, &tube.z_box)?;
            let pairs = label_actions(pts, &sol.u_check0, self.mpc.gain(), &sol.x_check0, t)?;
            let prov = match method {
                SamplingMethod::Sparse => Provenance::TubeSparse,
                SamplingMethod::Dense => Provenance::TubeDense,
            };
            for p in pairs {
                let state: State = std::array::from_fn(|i| p.state_plus[i]);
                let action: Action = std::array::from_fn(|j| p.action_plus[j]);
                self.data.entries.push(Entry { state, window: w, action, provenance: prov, demo: self.demo, step: t });
            }
        }
        let draw: f64 = self.coin.random();
        match self.policy {
            Some(pi) if draw >= self.beta => {
                self.policy_steps += 1;
                let u = pi.forward(&features(x, window, self.horizon))?;
                Ok([u[0], u[1], u[2]])
            }
            _ => Ok(label),
        }
    }
}

use Provenance::Demo;

/// Rolls out the β-mixture of expert and learner, labelling every visited
/// state with the expert action.
#[allow(clippy::too_many_arguments)]
pub fn collect_demonstration(
    expert: &Expert,
    policy: Option<&MlpPolicy>,
    beta: f64,
    env: &Environment,
    reference: &Reference,
    disturbance: &DisturbanceSpec,
    augmentation: Augmentation,
    demo: usize,
    seed: u64,
) -> Result<Demonstration> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidParameter(format!("beta {beta} outside [0, 1]")));
    }
    if beta < 1.0 && policy.is_none() {
        return Err(Error::InvalidParameter("a policy is required when beta < 1".into()));
    }
    let disturbance = if augmentation == Augmentation::Dr { disturbance.clone() } else { DisturbanceSpec::none() };
    let mut c = Collector {
        mpc: expert.fresh(),
        policy,
        beta,
        augmentation: augmentation.sampling(),
        horizon: env.horizon,
        demo,
        coin: ChaCha8Rng::seed_from_u64(stream_seed(seed, 0xC0)),
        data: Dataset { demo_count: 1, ..Default::default() },
        policy_steps: 0,
        expert_failed: false,
    };
    let episode = env.rollout(&mut c, reference, &disturbance, &expert.weights, seed)?;
    let aborted = c.expert_failed && c.policy_steps == 0;
    let mut data = c.data;
    if aborted {
        log::warn!("demonstration {demo} aborted: {:?}", episode.failure);
        data = Dataset::default();
    }
    Ok(Demonstration { episode, data, policy_steps: c.policy_steps, aborted })
}

#[derive(Debug, Clone)]
pub struct IlRun {
    /// policy trained after each demonstration
    pub policies: Vec<MlpPolicy>,
    pub dataset: Dataset,
    /// dataset size after each demonstration
    pub snapshot_sizes: Vec<usize>,
    pub loss_traces: Vec<Vec<f64>>,
    pub demos: Vec<Episode>,
    pub aborted: Vec<bool>,
}

/// Collect, aggregate and retrain from scratch for `n_demos` demonstrations.
/// Collection happens in the task's source domain; domain randomization
/// swaps in the task's randomization disturbances.
pub fn run_il(cfg: &IlConfig, n_demos: usize, task: &IlTask, expert: &Expert) -> Result<IlRun> {
    run_il_with(cfg, n_demos, task, expert, |_, _| {})
}

/// As [`run_il`], calling `progress(demo_index, policy)` after each retrain.
pub fn run_il_with<F>(cfg: &IlConfig, n_demos: usize, task: &IlTask, expert: &Expert, mut progress: F) -> Result<IlRun>
where
    F: FnMut(usize, &MlpPolicy),
{
    cfg.validate()?;
    if n_demos == 0 {
        return Err(Error::InvalidParameter("n_demos must be at least 1".into()));
    }
    let horizon = task.env.horizon;
    let din = feature_dim(horizon);
    let mut run = IlRun {
        policies: Vec::new(),
        dataset: Dataset::default(),
        snapshot_sizes: Vec::new(),
        loss_traces: Vec::new(),
        demos: Vec::new(),
        aborted: Vec::new(),
    };
    let mut norms: Option<(Standardizer, Standardizer)> = None;
    for i in 0..n_demos {
        let beta = cfg.beta(i);
        let disturbance = match cfg.augmentation {
            Augmentation::Dr => &task.randomization,
            _ => &task.source,
        };
        let demo = collect_demonstration(
            expert,
            run.policies.last(),
            beta,
            &task.env,
            &task.reference,
            disturbance,
            cfg.augmentation,
            i,
            stream_seed(cfg.seed, 2 * i as u64),
        )?;
        run.aborted.push(demo.aborted);
        run.dataset.extend(demo.data);
        run.demos.push(demo.episode);
        run.snapshot_sizes.push(run.dataset.len());
        if run.dataset.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let (inputs, labels) = run.dataset.training_pairs(horizon, None);
        if norms.is_none() {
            let in_norm = Standardizer::fit(inputs.iter().map(|v| v.as_slice()), din)?;
            let out_norm = Standardizer::fit(labels.iter().map(|v| v.as_slice()), NU)?;
            norms = Some((in_norm, out_norm));
        }
        let (in_norm, out_norm) = norms.clone().unwrap();
        let tseed = stream_seed(cfg.seed, 2 * i as u64 + 1);
        let mut policy = MlpPolicy::standard(din, NU, tseed)?.with_normalization(in_norm, out_norm)?;
        let xs: Vec<&[f64]> = inputs.iter().map(|v| v.as_slice()).collect();
        let ys: Vec<&[f64]> = labels.iter().map(|v| v.as_slice()).collect();
        let trace = train(&mut policy, &xs, &ys, &cfg.train_config(stream_seed(tseed, 1)))?;
        progress(i, &policy);
        run.loss_traces.push(trace);
        run.policies.push(policy);
    }
    Ok(run)
}
