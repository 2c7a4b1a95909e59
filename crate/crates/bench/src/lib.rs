//! Experiment harness around the `tube_il` library: run configuration,
//! output layout and the `tube`, `train`, `eval` and `compare` commands.

pub mod config;

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::Serialize;
use serde_json::json;

use tube_il::evalbench::{self, run_comparison, stage_cost, success_rate, ComparisonSpec, ComparisonTable, Domain};
use tube_il::expert::{build_expert, Expert};
use tube_il::il::{feature_dim, run_il_with, IlTask};
use tube_il::mlp::MlpPolicy;
use tube_il::quadsim::{make_reference, DisturbanceSpec, Environment, Episode};

pub use config::{sha256_hex, ConfigError, RunConfig, TaskName};

/// Directory layout of one run.
#[derive(Debug, Clone)]
pub struct OutputLayout {
    pub root: PathBuf,
}

impl OutputLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        OutputLayout { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn artifacts(&self) -> PathBuf {
        self.root.join("artifacts")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn results(&self) -> PathBuf {
        self.root.join("results")
    }

    pub fn episodes(&self) -> PathBuf {
        self.root.join("episodes")
    }

    pub fn checkpoint(&self, demo: usize) -> PathBuf {
        self.checkpoints().join(format!("policy_demo_{demo:02}.json"))
    }

    fn create(&self) -> anyhow::Result<()> {
        for d in [self.artifacts(), self.checkpoints(), self.results(), self.episodes()] {
            fs::create_dir_all(&d).with_context(|| format!("creating {}", d.display()))?;
        }
        Ok(())
    }
}

/// Everything a command needs, built once from the resolved config.
pub struct Session {
    pub config: RunConfig,
    pub hash: String,
    pub layout: OutputLayout,
    pub task: IlTask,
    pub expert: Expert,
}

impl Session {
    /// Builds the environment and the expert and echoes the config into the
    /// output directory.
    pub fn open(config: RunConfig) -> anyhow::Result<Self> {
        let layout = OutputLayout::new(config.resolved_output());
        layout.create()?;
        fs::write(layout.config(), config.to_toml())?;
        let hash = config.hash();
        let m = &config.model;
        let mut env = Environment::new(m.params.clone(), m.dt, m.horizon)?;
        env.init = m.initial_spread.clone();
        let reference = make_reference(&m.reference, &m.params, m.dt)?;
        let task = IlTask {
            env,
            reference,
            source: config.disturbance.domains.source.clone(),
            randomization: DisturbanceSpec::uniform(config.disturbance.w_fraction),
        };
        let expert = build_expert(&task.env, &config.expert_config())?;
        Ok(Session { config, hash, layout, task, expert })
    }

    pub fn domain_model(&self, d: Domain) -> &DisturbanceSpec {
        self.config.disturbance.domains.get(d)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn cmd_tube(s: &Session) -> anyhow::Result<serde_json::Value> {
    let tube = s.expert.tube();
    let out = json!({
        "config_hash": s.hash,
        "tube": tube,
        "disturbance_box": s.expert.w_box,
        "tightened_state_box": s.expert.mpc.tightened_state_box(),
        "tightened_input_box": s.expert.mpc.tightened_input_box(),
        "gain": s.expert.lqr.k.iter().copied().collect::<Vec<f64>>(),
    });
    write_json(&s.layout.artifacts().join("tube.json"), &out)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckpointRecord {
    pub demo: usize,
    pub file: String,
    pub sha256: String,
    pub dataset_size: usize,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub config_hash: String,
    pub method: String,
    pub seed: u64,
    pub checkpoints: Vec<CheckpointRecord>,
    pub aborted: Vec<bool>,
    pub loss_traces: Vec<Vec<f64>>,
}

/// Runs one IL experiment and writes a checkpoint after every demonstration.
pub fn cmd_train(s: &Session) -> anyhow::Result<TrainReport> {
    let cfg = s.config.il_config();
    let mut written: Vec<(String, String)> = Vec::new();
    let mut io_err = None;
    let run = run_il_with(&cfg, s.config.il.n_demos, &s.task, &s.expert, |i, policy| {
        if io_err.is_some() {
            return;
        }
        let path = s.layout.checkpoint(i + 1);
        let text = policy.to_json();
        match fs::write(&path, &text) {
            Ok(()) => {
                log::info!("demo {}: wrote {}", i + 1, path.display());
                written.push((path.file_name().unwrap().to_string_lossy().into_owned(), sha256_hex(text.as_bytes())));
            }
            Err(e) => io_err = Some(e),
        }
    })?;
    if let Some(e) = io_err {
        return Err(e).context("writing checkpoint");
    }
    let checkpoints = written
        .into_iter()
        .enumerate()
        .map(|(i, (file, sha256))| CheckpointRecord {
            demo: i + 1,
            file,
            sha256,
            dataset_size: run.snapshot_sizes[i],
            final_loss: run.loss_traces[i].last().copied().unwrap_or(f64::NAN),
        })
        .collect();
    let report = TrainReport { config_hash: s.hash.clone(), method: cfg.label(), seed: cfg.seed, checkpoints, aborted: run.aborted.clone(), loss_traces: run.loss_traces.clone() };
    write_json(&s.layout.results().join("train.json"), &report)?;
    let f = fs::File::create(s.layout.results().join("dataset.csv"))?;
    run.dataset.write_csv(BufWriter::new(f))?;
    Ok(report)
}

/// Which controller `eval` runs.
#[derive(Debug, Clone)]
pub enum EvalTarget {
    Checkpoint(PathBuf),
    Expert,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub controller: String,
    pub domain: String,
    pub episodes: usize,
    pub seed: u64,
    pub success_rate: f64,
    pub mean_stage_cost: f64,
    pub failures: Vec<Option<String>>,
}

pub fn load_policy(path: &Path, horizon: usize) -> anyhow::Result<MlpPolicy> {
    let text = fs::read_to_string(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    let policy = MlpPolicy::from_json(&text).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let din = feature_dim(horizon);
    if policy.network.input_dim() != din || policy.network.output_dim() != 3 {
        bail!(tube_il::Error::Schema(format!(
            "checkpoint expects {} inputs and {} outputs, this config needs {din} and 3",
            policy.network.input_dim(),
            policy.network.output_dim()
        )));
    }
    Ok(policy)
}

pub fn cmd_eval(s: &Session, target: &EvalTarget, domain: Domain) -> anyhow::Result<EvalReport> {
    let n = s.config.eval.episodes;
    let seed = s.config.master_seed;
    let model = s.domain_model(domain);
    let (name, eps): (String, Vec<Episode>) = match target {
        EvalTarget::Checkpoint(p) => {
            let policy = load_policy(p, s.task.env.horizon)?;
            let stem = p.file_stem().map(|x| x.to_string_lossy().into_owned()).unwrap_or_else(|| "policy".into());
            (stem, evalbench::evaluate_policy(&policy, &s.task, model, &s.expert.weights, n, seed)?)
        }
        EvalTarget::Expert => ("expert".into(), evalbench::evaluate_expert(&s.expert, &s.task, model, n, seed)?),
    };
    let trim = s.task.env.params.hover_input();
    let mean_stage_cost = eps.iter().map(|e| stage_cost(e, &s.expert.weights, &trim)).sum::<f64>() / eps.len() as f64;
    for (k, e) in eps.iter().enumerate() {
        let path = s.layout.episodes().join(format!("{name}_{}_{k:03}.csv", domain.as_str()));
        e.write_csv(s.task.env.dt, BufWriter::new(fs::File::create(&path)?))?;
    }
    let report = EvalReport {
        config_hash: s.hash.clone(),
        controller: name.clone(),
        domain: domain.as_str().into(),
        episodes: n,
        seed,
        success_rate: success_rate(&eps),
        mean_stage_cost,
        failures: eps.iter().map(|e| e.failure.clone()).collect(),
    };
    write_json(&s.layout.results().join(format!("eval_{name}_{}.json", domain.as_str())), &report)?;
    Ok(report)
}

pub fn comparison_spec(config: &RunConfig) -> anyhow::Result<ComparisonSpec> {
    Ok(ComparisonSpec {
        methods: config.methods()?,
        domains: vec![Domain::Source, config.disturbance.task.domain()],
        models: config.disturbance.domains.clone(),
        n_demos_max: config.eval.n_demos_max,
        seeds: config.eval.seed_values(),
        eval_episodes: config.eval.episodes,
        eval_seed: config.master_seed,
        gap_every_demo: config.eval.gap_every_demo,
    })
}

pub fn cmd_compare(s: &Session) -> anyhow::Result<ComparisonTable> {
    let spec = comparison_spec(&s.config)?;
    let table = run_comparison(&spec, &s.task, &s.expert, &s.hash)?;
    table.write_csv(BufWriter::new(fs::File::create(s.layout.results().join("compare.csv"))?))?;
    write_json(&s.layout.results().join("compare_summary.json"), &table.summary())?;
    write_json(&s.layout.results().join("compare_full.json"), &table)?;
    Ok(table)
}
