//! Declarative experiment configuration: one TOML file drives the whole
//! gen-data → train → eval pipeline, with dotted-path CLI overrides.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use mimicd::autodiff::AdamWConfig;
use mimicd::diffusion::TrainNoiseDist;
use mimicd::env::{EnvKind, EnvSpec};
use mimicd::execution::{RolloutConfig, ScheduleConfig, GOAL_TOLERANCE_DEFAULT};
use mimicd::training::{Method, NetShape, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn err(msg: impl Into<String>) -> ConfigError {
    ConfigError(msg.into())
}

// --- sections ---------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentSection {
    /// "swap" or "road-crossing".
    pub kind: String,
    #[serde(default)]
    pub start_jitter_radius: Option<f64>,
    #[serde(default)]
    pub dt: Option<f64>,
    #[serde(default)]
    pub max_steps: Option<usize>,
}

impl EnvironmentSection {
    pub fn build(&self) -> Result<EnvSpec, ConfigError> {
        let mut spec = match self.kind.as_str() {
            "swap" => EnvSpec::swap(),
            "road-crossing" => EnvSpec::road_crossing(),
            other => {
                return Err(err(format!(
                    "environment.kind must be \"swap\" or \"road-crossing\", got {other:?}"
                )))
            }
        };
        if let Some(r) = self.start_jitter_radius {
            if !(r >= 0.0 && r.is_finite()) {
                return Err(err("environment.start_jitter_radius must be ≥ 0"));
            }
            spec.start_jitter_radius = r;
        }
        if let Some(dt) = self.dt {
            if !(dt > 0.0 && dt.is_finite()) {
                return Err(err("environment.dt must be positive"));
            }
            spec.dt = dt;
        }
        if let Some(ms) = self.max_steps {
            if ms == 0 {
                return Err(err("environment.max_steps must be positive"));
            }
            spec.max_steps = ms;
        }
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub demos_per_mode: usize,
    /// Prediction horizon T: actions per training window.
    pub t: usize,
    pub stride: usize,
    pub seed: u64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            demos_per_mode: 20,
            t: 16,
            stride: 2,
            seed: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    /// "mimic-d", "vanilla", or "bc"; `train --method` overrides.
    pub method: String,
    pub steps: usize,
    pub bc_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub hidden_width: usize,
    pub n_blocks: usize,
    pub noise_embed_dim: usize,
    pub p_mean: f64,
    pub p_std: f64,
    pub weighted_loss: bool,
    pub checkpoint_every: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let base = TrainConfig::desk_default(Method::MimicD);
        TrainingSection {
            method: "mimic-d".into(),
            steps: base.steps,
            bc_steps: TrainConfig::desk_default(Method::Bc).steps,
            batch_size: base.batch_size,
            lr: base.adamw.lr,
            weight_decay: base.adamw.weight_decay,
            seed: 2000,
            hidden_width: base.net.hidden_width,
            n_blocks: base.net.n_blocks,
            noise_embed_dim: base.net.noise_embed_dim,
            p_mean: TrainNoiseDist::default().p_mean,
            p_std: TrainNoiseDist::default().p_std,
            weighted_loss: false,
            checkpoint_every: 0,
        }
    }
}

pub fn parse_method(name: &str) -> Result<Method, ConfigError> {
    match name {
        "mimic-d" => Ok(Method::MimicD),
        "vanilla" => Ok(Method::VanillaCtde),
        "bc" => Ok(Method::Bc),
        other => Err(err(format!(
            "method must be \"mimic-d\", \"vanilla\", or \"bc\", got {other:?}"
        ))),
    }
}

pub fn method_slug(method: Method) -> &'static str {
    match method {
        Method::MimicD => "mimic-d",
        Method::VanillaCtde => "vanilla",
        Method::Bc => "bc",
    }
}

impl TrainingSection {
    pub fn build(&self, method: Method, h: usize) -> TrainConfig {
        TrainConfig {
            method,
            steps: if method == Method::Bc {
                self.bc_steps
            } else {
                self.steps
            },
            batch_size: self.batch_size,
            adamw: AdamWConfig {
                lr: self.lr,
                weight_decay: self.weight_decay,
                ..AdamWConfig::default()
            },
            seed: self.seed,
            checkpoint_every: self.checkpoint_every,
            net: NetShape {
                hidden_width: self.hidden_width,
                n_blocks: self.n_blocks,
                noise_embed_dim: self.noise_embed_dim,
            },
            noise: TrainNoiseDist {
                p_mean: self.p_mean,
                p_std: self.p_std,
            },
            weighted_loss: self.weighted_loss,
            h,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutSection {
    /// Execute horizon h ≤ dataset.t.
    pub h: usize,
    /// 0 means "use the environment's step budget".
    pub max_steps: usize,
    pub goal_tolerance: f64,
    pub n_episodes: usize,
    pub seed: u64,
    pub k: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
}

impl Default for RolloutSection {
    fn default() -> Self {
        let sched = ScheduleConfig::default();
        RolloutSection {
            h: 4,
            max_steps: 0,
            goal_tolerance: GOAL_TOLERANCE_DEFAULT,
            n_episodes: 100,
            seed: 3000,
            k: sched.k,
            sigma_min: sched.sigma_min,
            sigma_max: sched.sigma_max,
            rho: sched.rho,
        }
    }
}

impl RolloutSection {
    pub fn build(&self, spec: &EnvSpec, t: usize) -> RolloutConfig {
        RolloutConfig {
            t,
            h: self.h,
            max_steps: if self.max_steps == 0 {
                spec.max_steps
            } else {
                self.max_steps
            },
            goal_tolerance: self.goal_tolerance,
            seed: self.seed,
            schedule: ScheduleConfig {
                k: self.k,
                sigma_min: self.sigma_min,
                sigma_max: self.sigma_max,
                rho: self.rho,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSection {
    /// Empty means "environment defaults" (2.7 for Swap; the
    /// 0.75/0.675/0.5625/0.375 sweep for Road Crossing).
    pub agent_thresholds: Vec<f64>,
    /// Absent means "environment default" (3.9 for Swap, none for Road
    /// Crossing).
    pub obstacle_threshold: Option<f64>,
    pub heldout_seed: u64,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        EvaluationSection {
            agent_thresholds: Vec::new(),
            obstacle_threshold: None,
            heldout_seed: 9000,
        }
    }
}

impl EvaluationSection {
    pub fn agent_thresholds(&self, kind: EnvKind) -> Vec<f64> {
        if !self.agent_thresholds.is_empty() {
            return self.agent_thresholds.clone();
        }
        match kind {
            EnvKind::Swap => vec![2.7],
            EnvKind::RoadCrossing => vec![0.75, 0.675, 0.5625, 0.375],
        }
    }

    pub fn obstacle_threshold(&self, kind: EnvKind) -> Option<f64> {
        if self.obstacle_threshold.is_some() {
            return self.obstacle_threshold;
        }
        match kind {
            EnvKind::Swap => Some(3.9),
            EnvKind::RoadCrossing => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub out_dir: PathBuf,
    /// 0 uses the library default worker count.
    #[serde(default)]
    pub workers: usize,
    pub environment: EnvironmentSection,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub rollout: RolloutSection,
    #[serde(default)]
    pub evaluation: EvaluationSection,
}

impl ExperimentConfig {
    /// Cross-field checks beyond what serde can express.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.environment.build()?;
        parse_method(&self.training.method)?;
        if self.dataset.t == 0 || self.dataset.stride == 0 || self.dataset.demos_per_mode == 0 {
            return Err(err(
                "dataset.t, dataset.stride, and dataset.demos_per_mode must be positive",
            ));
        }
        if self.rollout.h == 0 || self.rollout.h > self.dataset.t {
            return Err(err(format!(
                "rollout.h = {} must satisfy 1 ≤ h ≤ dataset.t = {}",
                self.rollout.h, self.dataset.t
            )));
        }
        if self.rollout.n_episodes == 0 {
            return Err(err("rollout.n_episodes must be ≥ 1"));
        }
        for thr in &self.evaluation.agent_thresholds {
            if !(*thr > 0.0 && thr.is_finite()) {
                return Err(err("evaluation.agent_thresholds must be positive"));
            }
        }
        Ok(())
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.out_dir.join("dataset").join("dataset.jsonl")
    }

    pub fn checkpoint_dir(&self, method: Method, seed: u64) -> PathBuf {
        self.out_dir
            .join("checkpoints")
            .join(method_slug(method))
            .join(format!("seed_{seed}"))
    }
}

// --- loading with dotted overrides --------------------------------------------

/// Sets `table.path = value` inside a parsed TOML tree. The value text is
/// itself parsed as TOML (falling back to a plain string), so numbers,
/// booleans, and arrays all work.
fn apply_override(root: &mut toml::Value, spec: &str) -> Result<(), ConfigError> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| err(format!("override {spec:?} is not of the form key.path=value")))?;
    let value = parse_toml_value(raw.trim());
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(err(format!("override path {path:?} has an empty segment")));
    }
    let mut cursor = root;
    for k in &keys[..keys.len() - 1] {
        cursor = cursor
            .as_table_mut()
            .ok_or_else(|| err(format!("override path {path:?}: {k} is not a table")))?
            .entry(k.to_string())
            .or_insert(toml::Value::Table(Default::default()));
    }
    let table = cursor
        .as_table_mut()
        .ok_or_else(|| err(format!("override path {path:?} does not end in a table")))?;
    table.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

fn parse_toml_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

pub fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig, ConfigError> {
    let text = fs::read_to_string(path)
        .map_err(|e| err(format!("cannot read config {}: {e}", path.display())))?;
    let mut value: toml::Value = text
        .parse()
        .map_err(|e| err(format!("config {}: {e}", path.display())))?;
    for ov in overrides {
        apply_override(&mut value, ov)?;
    }
    let config: ExperimentConfig = value
        .try_into()
        .map_err(|e| err(format!("config {}: {e}", path.display())))?;
    config.validate()?;
    Ok(config)
}
