//! Run configuration: defaults, TOML file, `--set` overrides and the
//! resolved echo written next to every run.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use tube_il::evalbench::{Domain, DomainModels};
use tube_il::expert::ExpertConfig;
use tube_il::il::{Augmentation, IlConfig, Method};
use tube_il::quadsim::{InitialSpread, QuadParams, ReferenceParams};
use tube_il::tube::TubeOptions;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
pub const OUTPUT_ROOT_ENV: &str = "TUBEIL_OUTPUT_ROOT";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("bad override {0:?}: {1}")]
    Override(String, String),
    #[error("unknown method {0:?} (expected <bc|dagger>+<none|dr|sa_sparse|sa_dense>)")]
    UnknownMethod(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelBlock {
    pub params: QuadParams,
    pub dt: f64,
    /// MPC horizon N
    pub horizon: usize,
    pub reference: ReferenceParams,
    pub initial_spread: InitialSpread,
}

impl Default for ModelBlock {
    fn default() -> Self {
        ModelBlock { params: QuadParams::default(), dt: 0.1, horizon: 20, reference: ReferenceParams::default(), initial_spread: InitialSpread::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostBlock {
    pub q_diag: Vec<f64>,
    pub r_diag: Vec<f64>,
}

impl Default for CostBlock {
    fn default() -> Self {
        let e = ExpertConfig::default();
        CostBlock { q_diag: e.q_diag, r_diag: e.r_diag }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskName {
    T1,
    T2,
}

impl TaskName {
    pub fn domain(self) -> Domain {
        match self {
            TaskName::T1 => Domain::TargetT1,
            TaskName::T2 => Domain::TargetT2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DisturbanceBlock {
    /// W as a fraction of the vehicle weight
    pub w_fraction: f64,
    /// target domain used by `eval` and `compare`
    pub task: TaskName,
    pub domains: DomainModels,
}

impl Default for DisturbanceBlock {
    fn default() -> Self {
        DisturbanceBlock { w_fraction: 0.3, task: TaskName::T1, domains: DomainModels::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IlBlock {
    pub method: Method,
    pub augmentation: Augmentation,
    pub beta_schedule: Vec<f64>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub n_demos: usize,
}

impl Default for IlBlock {
    fn default() -> Self {
        let c = IlConfig::default();
        IlBlock {
            method: Method::Bc,
            augmentation: Augmentation::SaSparse,
            beta_schedule: c.beta_schedule,
            epochs: c.epochs,
            learning_rate: c.learning_rate,
            batch_size: c.batch_size,
            n_demos: 1,
        }
    }
}

impl IlBlock {
    pub fn config(&self, seed: u64) -> IlConfig {
        IlConfig {
            method: self.method,
            augmentation: self.augmentation,
            beta_schedule: self.beta_schedule.clone(),
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalBlock {
    /// number of IL seeds (0, 1, ..) unless `seed_list` is given
    pub seeds: usize,
    pub seed_list: Vec<u64>,
    pub episodes: usize,
    pub n_demos_max: usize,
    pub gap_every_demo: bool,
    /// `<method>+<augmentation>` labels for `compare`
    pub methods: Vec<String>,
}

impl Default for EvalBlock {
    fn default() -> Self {
        EvalBlock {
            seeds: 5,
            seed_list: Vec::new(),
            episodes: 10,
            n_demos_max: 20,
            gap_every_demo: false,
            methods: ["bc+none", "bc+dr", "bc+sa_sparse", "bc+sa_dense", "dagger+none", "dagger+dr", "dagger+sa_sparse", "dagger+sa_dense"]
                .map(String::from)
                .to_vec(),
        }
    }
}

impl EvalBlock {
    pub fn seed_values(&self) -> Vec<u64> {
        if self.seed_list.is_empty() {
            (0..self.seeds as u64).collect()
        } else {
            self.seed_list.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub master_seed: u64,
    pub output_dir: PathBuf,
    pub model: ModelBlock,
    pub cost: CostBlock,
    pub disturbance: DisturbanceBlock,
    pub tube: TubeOptions,
    pub il: IlBlock,
    pub eval: EvalBlock,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            master_seed: 0,
            output_dir: PathBuf::from("runs/default"),
            model: ModelBlock::default(),
            cost: CostBlock::default(),
            disturbance: DisturbanceBlock::default(),
            tube: TubeOptions::default(),
            il: IlBlock::default(),
            eval: EvalBlock::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.to_path_buf(), source })?;
        Self::from_toml(&text)
    }

    fn check(&self) -> Result<(), ConfigError> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(ConfigError::Parse(format!("unsupported schema_version {}", self.schema_version)));
        }
        for m in &self.eval.methods {
            parse_method(m)?;
        }
        self.il.config(self.master_seed).validate().map_err(|e| ConfigError::Parse(format!("il: {e}")))?;
        if self.il.n_demos == 0 || self.eval.n_demos_max == 0 {
            return Err(ConfigError::Parse("demonstration counts must be at least 1".into()));
        }
        if self.eval.episodes == 0 {
            return Err(ConfigError::Parse("eval.episodes must be at least 1".into()));
        }
        Ok(())
    }

    /// Apply `dotted.key=value` overrides; values are parsed as TOML and
    /// fall back to plain strings.
    pub fn with_overrides(self, overrides: &[String]) -> Result<Self, ConfigError> {
        if overrides.is_empty() {
            return Ok(self);
        }
        let mut root = toml::Value::try_from(&self).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            let (key, raw) = o.split_once('=').ok_or_else(|| ConfigError::Override(o.clone(), "expected key=value".into()))?;
            let value = parse_value(raw.trim());
            let mut node = &mut root;
            let parts: Vec<&str> = key.trim().split('.').collect();
            for (i, p) in parts.iter().enumerate() {
                let table = node.as_table_mut().ok_or_else(|| ConfigError::Override(o.clone(), format!("{p} is not inside a table")))?;
                if i + 1 == parts.len() {
                    if !table.contains_key(*p) {
                        return Err(ConfigError::Override(o.clone(), format!("unknown key {p}")));
                    }
                    table.insert((*p).to_string(), value.clone());
                    break;
                }
                node = table.get_mut(*p).ok_or_else(|| ConfigError::Override(o.clone(), format!("unknown key {p}")))?;
            }
        }
        let cfg: RunConfig = root.try_into().map_err(|e: toml::de::Error| ConfigError::Override(overrides.join(" "), e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the resolved config (output directory excluded).
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        sha256_hex(c.to_toml().as_bytes())
    }

    pub fn expert_config(&self) -> ExpertConfig {
        ExpertConfig {
            q_diag: self.cost.q_diag.clone(),
            r_diag: self.cost.r_diag.clone(),
            w_fraction: self.disturbance.w_fraction,
            tube: self.tube,
            ..ExpertConfig::default()
        }
    }

    /// IL configuration with the seed derived from the master seed.
    pub fn il_config(&self) -> IlConfig {
        self.il.config(self.master_seed)
    }

    pub fn methods(&self) -> Result<Vec<IlConfig>, ConfigError> {
        self.eval
            .methods
            .iter()
            .map(|m| {
                let (method, augmentation) = parse_method(m)?;
                Ok(IlConfig { method, augmentation, ..self.il.config(self.master_seed) })
            })
            .collect()
    }

    /// `output_dir`, resolved against the output root variable when relative.
    pub fn resolved_output(&self) -> PathBuf {
        if self.output_dir.is_absolute() {
            return self.output_dir.clone();
        }
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) => PathBuf::from(root).join(&self.output_dir),
            None => self.output_dir.clone(),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

pub fn parse_method(label: &str) -> Result<(Method, Augmentation), ConfigError> {
    let bad = || ConfigError::UnknownMethod(label.to_string());
    let (m, a) = label.split_once('+').ok_or_else(bad)?;
    let method = match m {
        "bc" => Method::Bc,
        "dagger" => Method::Dagger,
        _ => return Err(bad()),
    };
    let augmentation = match a {
        "none" => Augmentation::None,
        "dr" => Augmentation::Dr,
        "sa_sparse" | "sa" => Augmentation::SaSparse,
        "sa_dense" => Augmentation::SaDense,
        _ => return Err(bad()),
    };
    Ok((method, augmentation))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest.iter() {
        write!(s, "{b:02x}").unwrap();
    }
    s
}
