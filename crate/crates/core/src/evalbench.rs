//! Metrics and the method comparison sweep.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expert::Expert;
use crate::il::{run_il, ExpertController, IlConfig, IlTask, PolicyController};
use crate::linmodel::{CostWeights, NU, NX};
use crate::mlp::MlpPolicy;
use crate::quadsim::{Action, Controller, DisturbanceSpec, Episode, Reference, State};
use crate::tube::stream_seed;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const RESULT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    TargetT1,
    TargetT2,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::TargetT1 => "target_T1",
            Domain::TargetT2 => "target_T2",
        }
    }
}

/// Disturbance models of the evaluation domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainModels {
    pub source: DisturbanceSpec,
    pub t1: DisturbanceSpec,
    pub t2: DisturbanceSpec,
}

impl Default for DomainModels {
    fn default() -> Self {
        DomainModels { source: DisturbanceSpec::none(), t1: DisturbanceSpec::wind(), t2: DisturbanceSpec::drag_mismatch(0.3) }
    }
}

impl DomainModels {
    pub fn get(&self, d: Domain) -> &DisturbanceSpec {
        match d {
            Domain::Source => &self.source,
            Domain::TargetT1 => &self.t1,
            Domain::TargetT2 => &self.t2,
        }
    }
}

/// `Σ_t e_tᵀ Q e_t + δu_tᵀ R δu_t`, with `e_t` measured against the first
/// point of the step's reference window (zero tilt) and `δu_t = u_t − trim`.
pub fn stage_cost(episode: &Episode, weights: &CostWeights, trim: &Action) -> f64 {
    let mut total = 0.0;
    for t in 0..episode.actions.len() {
        let r = episode.references[t];
        let x = &episode.states[t];
        let e: Vec<f64> = (0..NX).map(|i| x[i] - if i < 6 { r[i] } else { 0.0 }).collect();
        let du: Vec<f64> = (0..NU).map(|j| episode.actions[t][j] - trim[j]).collect();
        for i in 0..NX {
            for k in 0..NX {
                total += e[i] * weights.q[(i, k)] * e[k];
            }
        }
        for i in 0..NU {
            for k in 0..NU {
                total += du[i] * weights.r[(i, k)] * du[k];
            }
        }
    }
    total
}

pub fn success_rate(episodes: &[Episode]) -> f64 {
    if episodes.is_empty() {
        return 0.0;
    }
    episodes.iter().filter(|e| e.success()).count() as f64 / episodes.len() as f64
}

/// Smallest demonstration count (1-based) whose success rate is 1.
pub fn demonstrations_to_full_success(rates: &[f64]) -> Option<usize> {
    rates.iter().position(|&r| r >= 1.0).map(|i| i + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapStats {
    /// mean per-step relative error, percent
    pub percent: f64,
    pub steps: usize,
    /// steps skipped for a near-zero expert action
    pub skipped_small: usize,
    /// steps where the expert could not be evaluated
    pub skipped_infeasible: usize,
}

/// Mean over visited steps of `‖π(x) − π*(x)‖ / ‖π*(x)‖` in percent.
pub fn expert_gap<P, E>(policy: &mut P, expert: &mut E, episodes: &[Episode], reference: &Reference, horizon: usize) -> Result<GapStats>
where
    P: Controller + ?Sized,
    E: Controller + ?Sized,
{
    if episodes.is_empty() {
        return Err(Error::InvalidParameter("expert gap needs at least one episode".into()));
    }
    let mut sum = 0.0;
    let mut stats = GapStats { percent: 0.0, steps: 0, skipped_small: 0, skipped_infeasible: 0 };
    for ep in episodes {
        expert.reset();
        policy.reset();
        for t in 0..ep.actions.len() {
            let x = &ep.states[t];
            let w = reference.window(t, horizon);
            let ue = match expert.act(t, x, &w) {
                Ok(u) => u,
                Err(_) => {
                    stats.skipped_infeasible += 1;
                    continue;
                }
            };
            let up = policy.act(t, x, &w)?;
            let den = norm(&ue);
            if den < 1e-9 {
                stats.skipped_small += 1;
                continue;
            }
            let diff: Vec<f64> = up.iter().zip(&ue).map(|(a, b)| a - b).collect();
            sum += norm(&diff) / den;
            stats.steps += 1;
        }
    }
    stats.percent = if stats.steps > 0 { 100.0 * sum / stats.steps as f64 } else { f64::NAN };
    Ok(stats)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Mean squared action error over the visited states of `episodes`.
pub fn imitation_loss<P, E>(policy: &mut P, expert: &mut E, episodes: &[Episode], reference: &Reference, horizon: usize) -> Result<f64>
where
    P: Controller + ?Sized,
    E: Controller + ?Sized,
{
    let mut sum = 0.0;
    let mut n = 0usize;
    for ep in episodes {
        expert.reset();
        policy.reset();
        for t in 0..ep.actions.len() {
            let x: &State = &ep.states[t];
            let w = reference.window(t, horizon);
            let Ok(ue) = expert.act(t, x, &w) else { continue };
            let up = policy.act(t, x, &w)?;
            sum += up.iter().zip(&ue).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(sum / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftDecomposition {
    pub j_source: f64,
    pub j_target: f64,
    pub gap: f64,
}

impl ShiftDecomposition {
    pub fn from_losses(j_source: f64, j_target: f64) -> Self {
        ShiftDecomposition { j_source, j_target, gap: j_target - j_source }
    }

    /// `|J_T − (gap + J_S)|`
    pub fn identity_error(&self) -> f64 {
        (self.j_target - (self.gap + self.j_source)).abs()
    }
}

/// Target-domain imitation loss minus source-domain imitation loss.
pub fn covariate_shift_gap<P, E>(
    policy: &mut P,
    expert: &mut E,
    source: &[Episode],
    target: &[Episode],
    reference: &Reference,
    horizon: usize,
) -> Result<ShiftDecomposition>
where
    P: Controller + ?Sized,
    E: Controller + ?Sized,
{
    if source.is_empty() || target.is_empty() {
        return Err(Error::InvalidParameter("both episode sets must be nonempty".into()));
    }
    let js = imitation_loss(policy, expert, source, reference, horizon)?;
    let jt = imitation_loss(policy, expert, target, reference, horizon)?;
    Ok(ShiftDecomposition::from_losses(js, jt))
}

/// Roll out `episodes` evaluation episodes of a policy, in parallel.
pub fn evaluate_policy(policy: &MlpPolicy, task: &IlTask, disturbance: &DisturbanceSpec, weights: &CostWeights, episodes: usize, seed: u64) -> Result<Vec<Episode>> {
    (0..episodes)
        .into_par_iter()
        .map(|k| {
            let mut c = PolicyController { policy, horizon: task.env.horizon };
            task.env.rollout(&mut c, &task.reference, disturbance, weights, stream_seed(seed, k as u64))
        })
        .collect()
}

/// Roll out the expert itself.
pub fn evaluate_expert(expert: &Expert, task: &IlTask, disturbance: &DisturbanceSpec, episodes: usize, seed: u64) -> Result<Vec<Episode>> {
    (0..episodes)
        .into_par_iter()
        .map(|k| {
            let mut c = ExpertController { mpc: expert.fresh() };
            task.env.rollout(&mut c, &task.reference, disturbance, &expert.weights, stream_seed(seed, k as u64))
        })
        .collect()
}

/// Success rate and stage cost of one (method, domain) across demonstration
/// counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub method: String,
    pub domain: Domain,
    pub seeds: Vec<u64>,
    /// pooled over seeds, index k is k + 1 demonstrations
    pub success_rate: Vec<f64>,
    pub mean_stage_cost: Vec<f64>,
    /// per seed, per demonstration count
    pub seed_success_rate: Vec<Vec<f64>>,
    /// expert gap of the final policies, pooled over seeds
    pub expert_gap: Option<f64>,
    pub demonstrations_to_full_success: Option<usize>,
    pub seed_demonstrations_to_full_success: Vec<Option<usize>>,
    /// failed (seed, message) runs
    pub failures: Vec<(u64, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonSpec {
    pub methods: Vec<IlConfig>,
    pub domains: Vec<Domain>,
    pub models: DomainModels,
    pub n_demos_max: usize,
    /// one IL run per seed and method
    pub seeds: Vec<u64>,
    pub eval_episodes: usize,
    pub eval_seed: u64,
    /// evaluate the expert gap after every demonstration instead of only the last
    pub gap_every_demo: bool,
}

/// One row per method × demonstration count × domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub method: String,
    pub domain: String,
    pub demos: usize,
    pub success_rate: f64,
    pub mean_stage_cost: f64,
    pub expert_gap: Option<f64>,
    pub episodes: usize,
    pub failed_runs: usize,
    pub seeds: String,
    pub config_hash: String,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub schema_version: u32,
    pub version: String,
    pub config_hash: String,
    pub results: Vec<ExperimentResult>,
    pub rows: Vec<CurveRow>,
}

struct RunEval {
    // [domain][demo] -> (successes, episodes, cost sum)
    points: Vec<Vec<(usize, usize, f64)>>,
    // [domain][demo]
    gaps: Vec<Vec<Option<(f64, usize)>>>,
}

fn eval_run(cfg: &IlConfig, seed: u64, spec: &ComparisonSpec, task: &IlTask, expert: &Expert) -> Result<RunEval> {
    let cfg = IlConfig { seed, ..cfg.clone() };
    let run = run_il(&cfg, spec.n_demos_max, task, expert)?;
    let trim = task.env.params.hover_input();
    let mut points = vec![Vec::new(); spec.domains.len()];
    let mut gaps = vec![Vec::new(); spec.domains.len()];
    for (k, policy) in run.policies.iter().enumerate() {
        for (d, dom) in spec.domains.iter().enumerate() {
            let dist = spec.models.get(*dom);
            let eps = evaluate_policy(policy, task, dist, &expert.weights, spec.eval_episodes, spec.eval_seed)?;
            let ok = eps.iter().filter(|e| e.success()).count();
            let cost: f64 = eps.iter().map(|e| stage_cost(e, &expert.weights, &trim)).sum();
            points[d].push((ok, eps.len(), cost));
            let gap = if spec.gap_every_demo || k + 1 == run.policies.len() {
                let mut p = PolicyController { policy, horizon: task.env.horizon };
                let mut e = ExpertController { mpc: expert.fresh() };
                let g = expert_gap(&mut p, &mut e, &eps, &task.reference, task.env.horizon)?;
                (g.steps > 0).then_some((g.percent * g.steps as f64, g.steps))
            } else {
                None
            };
            gaps[d].push(gap);
        }
    }
    Ok(RunEval { points, gaps })
}

/// Train every method on every seed in the source domain and evaluate each
/// intermediate policy in the requested domains. Failed runs are recorded,
/// never fatal.
pub fn run_comparison(spec: &ComparisonSpec, task: &IlTask, expert: &Expert, config_hash: &str) -> Result<ComparisonTable> {
    if spec.methods.is_empty() {
        return Err(Error::InvalidParameter("no methods given".into()));
    }
    if spec.n_demos_max == 0 {
        return Err(Error::InvalidParameter("n_demos_max must be at least 1".into()));
    }
    if spec.seeds.is_empty() || spec.eval_episodes == 0 || spec.domains.is_empty() {
        return Err(Error::InvalidParameter("need at least one seed, domain and evaluation episode".into()));
    }
    let jobs: Vec<(usize, u64)> = (0..spec.methods.len()).flat_map(|m| spec.seeds.iter().map(move |&s| (m, s))).collect();
    let outcomes: Vec<Result<RunEval>> = jobs
        .par_iter()
        .map(|&(m, s)| {
            let r = eval_run(&spec.methods[m], s, spec, task, expert);
            match &r {
                Ok(_) => log::info!("finished {} seed {s}", spec.methods[m].label()),
                Err(e) => log::warn!("{} seed {s} failed: {e}", spec.methods[m].label()),
            }
            r
        })
        .collect();

    let seed_list = spec.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(" ");
    let mut results = Vec::new();
    let mut rows = Vec::new();
    for (m, cfg) in spec.methods.iter().enumerate() {
        let label = cfg.label();
        let mine: Vec<(u64, &Result<RunEval>)> =
            jobs.iter().zip(&outcomes).filter(|((jm, _), _)| *jm == m).map(|((_, s), r)| (*s, r)).collect();
        for (d, dom) in spec.domains.iter().enumerate() {
            let mut failures = Vec::new();
            let mut seed_rates = Vec::new();
            let mut pooled = vec![(0usize, 0usize, 0.0f64); spec.n_demos_max];
            let mut gap_acc = vec![(0.0f64, 0usize); spec.n_demos_max];
            for (s, r) in &mine {
                match r {
                    Ok(ev) => {
                        let mut rates = Vec::new();
                        for (k, &(ok, n, c)) in ev.points[d].iter().enumerate() {
                            pooled[k].0 += ok;
                            pooled[k].1 += n;
                            pooled[k].2 += c;
                            rates.push(ok as f64 / n as f64);
                            if let Some((g, steps)) = ev.gaps[d][k] {
                                gap_acc[k].0 += g;
                                gap_acc[k].1 += steps;
                            }
                        }
                        seed_rates.push(rates);
                    }
                    Err(e) => failures.push((*s, e.to_string())),
                }
            }
            let success_rate: Vec<f64> = pooled.iter().map(|p| if p.1 > 0 { p.0 as f64 / p.1 as f64 } else { 0.0 }).collect();
            let mean_stage_cost: Vec<f64> = pooled.iter().map(|p| if p.1 > 0 { p.2 / p.1 as f64 } else { f64::NAN }).collect();
            let gaps: Vec<Option<f64>> = gap_acc.iter().map(|g| (g.1 > 0).then(|| g.0 / g.1 as f64)).collect();
            for k in 0..spec.n_demos_max {
                rows.push(CurveRow {
                    method: label.clone(),
                    domain: dom.as_str().to_string(),
                    demos: k + 1,
                    success_rate: success_rate[k],
                    mean_stage_cost: mean_stage_cost[k],
                    expert_gap: gaps[k],
                    episodes: pooled[k].1,
                    failed_runs: failures.len(),
                    seeds: seed_list.clone(),
                    config_hash: config_hash.to_string(),
                    version: VERSION.to_string(),
                });
            }
            let full = if failures.is_empty() { demonstrations_to_full_success(&success_rate) } else { None };
            results.push(ExperimentResult {
                method: label.clone(),
                domain: *dom,
                seeds: spec.seeds.clone(),
                seed_demonstrations_to_full_success: seed_rates.iter().map(|r| demonstrations_to_full_success(r)).collect(),
                seed_success_rate: seed_rates,
                success_rate,
                mean_stage_cost,
                expert_gap: *gaps.last().unwrap(),
                demonstrations_to_full_success: full,
                failures,
            });
        }
    }
    Ok(ComparisonTable {
        schema_version: RESULT_SCHEMA_VERSION,
        version: VERSION.to_string(),
        config_hash: config_hash.to_string(),
        results,
        rows,
    })
}

impl ComparisonTable {
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "method,domain,demos,success_rate,mean_stage_cost,expert_gap,episodes,failed_runs,seeds,config_hash,version")?;
        for r in &self.rows {
            let gap = r.expert_gap.map(|g| format!("{g}")).unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.method, r.domain, r.demos, r.success_rate, r.mean_stage_cost, gap, r.episodes, r.failed_runs, r.seeds, r.config_hash, r.version
            )?;
        }
        Ok(())
    }

    /// Table-style summary: final success rate, expert gap and
    /// demonstration efficiency per method and domain.
    pub fn summary(&self) -> serde_json::Value {
        let rows: Vec<serde_json::Value> = self
            .results
            .iter()
            .map(|r| {
                serde_json::json!({
                    "method": r.method,
                    "domain": r.domain.as_str(),
                    "success_rate": r.success_rate.last(),
                    "expert_gap_percent": r.expert_gap,
                    "demonstrations_to_full_success": r.demonstrations_to_full_success,
                    "seed_demonstrations_to_full_success": r.seed_demonstrations_to_full_success,
                    "mean_stage_cost": r.mean_stage_cost.last(),
                    "failed_runs": r.failures.len(),
                })
            })
            .collect();
        serde_json::json!({
            "schema_version": self.schema_version,
            "version": self.version,
            "config_hash": self.config_hash,
            "seeds": self.results.first().map(|r| r.seeds.clone()),
            "table": rows,
        })
    }
}
