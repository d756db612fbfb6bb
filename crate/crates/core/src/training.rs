//! Centralized trainers: the shared-loss diffusion procedure, the
//! ego-only variant, and behavior cloning, plus checkpointing.
//!
//! Every training step draws each agent's batch and noise from an RNG
//! seeded by (run seed, step, agent), so a run is a pure function of
//! (dataset, config) and resuming from a checkpoint at step s is bitwise
//! identical to never having stopped. Per-agent parameter sets are
//! disjoint, so the single joint update on ∇ of the summed loss is
//! computed as per-agent backward passes — exactly, not approximately.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdamWConfig, Graph, GraphError, ParamStore, ParamStoreError, Tensor};
use crate::denoiser::{
    forward_bc, init_bc, init_policy, BcRegressor, DenoiserConfig, DenoiserError, Policy,
};
use crate::diffusion::{diffusion_loss, DiffusionError, TrainNoiseDist};
use crate::env::{EnvSpec, ObsMode, Observation};
use crate::expert::{Dataset, TrainingWindow};

/// EMA factor for the smoothed loss curve.
pub const LOSS_SMOOTHING: f64 = 0.99;
/// Loss rows are recorded every this many steps (plus the final step).
pub const LOG_EVERY: usize = 100;
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    BadConfig(String),
    #[error("dataset unsuitable: {0}")]
    DatasetMismatch(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("checkpoint meta: {0}")]
    Meta(String),
    #[error("unsupported checkpoint format version {found}")]
    UnsupportedVersion { found: u32 },
    #[error("policy set bound to env digest {expected}, got {found}")]
    BindingMismatch { expected: String, found: String },
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Params(#[from] ParamStoreError),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    MimicD,
    VanillaCtde,
    Bc,
}

impl Method {
    pub fn obs_mode(self) -> ObsMode {
        match self {
            Method::MimicD | Method::Bc => ObsMode::Full,
            Method::VanillaCtde => ObsMode::EgoOnly,
        }
    }
}

/// Network shape knobs (the data-dependent DenoiserConfig fields come
/// from the dataset).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetShape {
    pub hidden_width: usize,
    pub n_blocks: usize,
    pub noise_embed_dim: usize,
}

impl Default for NetShape {
    /// Desk-scale default (single-core budget); the module-level spec
    /// default of 256/4/64 remains available via DenoiserConfig::new.
    fn default() -> Self {
        NetShape {
            hidden_width: 128,
            n_blocks: 3,
            noise_embed_dim: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub steps: usize,
    pub batch_size: usize,
    pub adamw: AdamWConfig,
    pub seed: u64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    pub net: NetShape,
    pub noise: TrainNoiseDist,
    /// λ(σ) loss reweighting; the objective is unweighted by default.
    pub weighted_loss: bool,
    /// Execute-horizon default recorded with the trained set.
    pub h: usize,
}

impl TrainConfig {
    /// Desk-scale defaults for a single CPU core.
    pub fn desk_default(method: Method) -> Self {
        TrainConfig {
            method,
            steps: if method == Method::Bc { 6000 } else { 12_000 },
            batch_size: 64,
            adamw: AdamWConfig::default(),
            seed: 0,
            checkpoint_every: 0,
            net: NetShape::default(),
            noise: TrainNoiseDist::default(),
            weighted_loss: false,
            h: 4,
        }
    }

    fn validate(&self) -> Result<(), TrainError> {
        if self.steps == 0 || self.batch_size == 0 || self.h == 0 {
            return Err(TrainError::BadConfig(
                "steps, batch_size, and h must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One agent's trained policy.
#[derive(Debug)]
pub enum AgentPolicy {
    Diffusion(Policy),
    Bc(BcRegressor),
}

impl AgentPolicy {
    pub fn config(&self) -> &DenoiserConfig {
        match self {
            AgentPolicy::Diffusion(p) => &p.config,
            AgentPolicy::Bc(b) => &b.config,
        }
    }

    pub fn params(&self) -> &ParamStore {
        match self {
            AgentPolicy::Diffusion(p) => &p.params,
            AgentPolicy::Bc(b) => &b.params,
        }
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            AgentPolicy::Diffusion(p) => &mut p.params,
            AgentPolicy::Bc(b) => &mut b.params,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub method: Method,
    pub seed: u64,
    pub steps_done: usize,
    pub smoothed_loss: Option<f64>,
}

/// The N per-agent policies trained together, bound to one environment.
#[derive(Debug)]
pub struct JointPolicySet {
    pub policies: Vec<AgentPolicy>,
    pub env_digest: String,
    pub obs_mode: ObsMode,
    pub t: usize,
    pub h: usize,
    pub meta: TrainMeta,
}

impl JointPolicySet {
    pub fn n_agents(&self) -> usize {
        self.policies.len()
    }

    /// Errors unless this set was trained against `spec`.
    pub fn bind_check(&self, spec: &EnvSpec) -> Result<(), TrainError> {
        let found = spec.digest();
        if self.env_digest != found {
            return Err(TrainError::BindingMismatch {
                expected: self.env_digest.clone(),
                found,
            });
        }
        Ok(())
    }
}

/// One recorded point of the loss curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub per_agent: Vec<f64>,
    pub total: f64,
    pub smoothed_total: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossLog {
    pub rows: Vec<LossRow>,
}

impl LossLog {
    /// CSV with header: step, loss_agent_<i>…, total, smoothed_total.
    pub fn to_csv(&self, n_agents: usize) -> String {
        let mut out = String::from("step");
        for i in 0..n_agents {
            out.push_str(&format!(",loss_agent_{i}"));
        }
        out.push_str(",total,smoothed_total\n");
        for row in &self.rows {
            out.push_str(&format!("{}", row.step));
            for l in &row.per_agent {
                out.push_str(&format!(",{l}"));
            }
            out.push_str(&format!(",{},{}\n", row.total, row.smoothed_total));
        }
        out
    }
}

pub struct TrainOutput {
    pub set: JointPolicySet,
    pub log: LossLog,
}

// --- deterministic per-step streams -----------------------------------------------

const STREAM_BATCH: u64 = 0x42;
const STREAM_INIT: u64 = 0x17;

use crate::splitmix64;

/// RNG for one (step, agent) cell of one run — reconstructible at any
/// step, which is what makes checkpoint resume exact.
fn step_rng(seed: u64, step: usize, agent: usize, stream: u64) -> ChaCha8Rng {
    let mixed = splitmix64(
        seed ^ splitmix64(step as u64 ^ splitmix64((agent as u64) << 32 | stream)),
    );
    ChaCha8Rng::seed_from_u64(mixed)
}

fn init_seed(seed: u64, agent: usize) -> u64 {
    splitmix64(seed ^ splitmix64((agent as u64) << 32 | STREAM_INIT))
}

// --- dataset plumbing ---------------------------------------------------------------

/// Flattens a batch of windows into (observations, clean trajectories).
fn batch_tensors(windows: &[TrainingWindow], idx: &[usize], t: usize) -> (Tensor, Tensor) {
    let obs_dim = windows[0].observation.len();
    let flat = 2 * t;
    let b = idx.len();
    let mut obs = Tensor::zeros(vec![b, obs_dim]);
    let mut clean = Tensor::zeros(vec![b, flat]);
    for (r, &i) in idx.iter().enumerate() {
        let w = &windows[i];
        obs.data_mut()[r * obs_dim..(r + 1) * obs_dim].copy_from_slice(&w.observation);
        for (k, a) in w.actions.iter().enumerate() {
            clean.data_mut()[r * flat + 2 * k] = a.x;
            clean.data_mut()[r * flat + 2 * k + 1] = a.y;
        }
    }
    (obs, clean)
}

fn sample_indices(rng: &mut ChaCha8Rng, n: usize, batch: usize) -> Vec<usize> {
    (0..batch).map(|_| rng.random_range(0..n)).collect()
}

/// Re-projects a Full-observation dataset to EgoOnly windows.
fn project_ego_only(dataset: &Dataset) -> Result<Dataset, TrainError> {
    if dataset.obs_mode == ObsMode::EgoOnly {
        return Ok(dataset.clone());
    }
    let n_others = dataset.env_spec.n_agents - 1;
    let mut out = dataset.clone();
    out.obs_mode = ObsMode::EgoOnly;
    for per_agent in &mut out.windows {
        for w in per_agent {
            let obs = Observation::unflatten(&w.observation, n_others).ok_or_else(|| {
                TrainError::DatasetMismatch("window observation has wrong length".into())
            })?;
            w.observation = obs.to_ego_only().flatten();
        }
    }
    Ok(out)
}

fn check_dataset(dataset: &Dataset, want_mode: ObsMode) -> Result<(), TrainError> {
    if dataset.windows.is_empty() || dataset.windows.iter().any(|w| w.is_empty()) {
        return Err(TrainError::DatasetMismatch(
            "every agent needs at least one training window".into(),
        ));
    }
    if dataset.obs_mode != want_mode {
        return Err(TrainError::DatasetMismatch(format!(
            "dataset observations are {:?}, trainer needs {:?}",
            dataset.obs_mode, want_mode
        )));
    }
    Ok(())
}

// --- trainers ------------------------------------------------------------------------

fn fresh_set(dataset: &Dataset, config: &TrainConfig) -> Result<JointPolicySet, TrainError> {
    let obs_mode = config.method.obs_mode();
    let sigma_data = dataset.action_std();
    let dconf = DenoiserConfig {
        t: dataset.t,
        m: 2,
        obs_dim: dataset.obs_dim(),
        hidden_width: config.net.hidden_width,
        n_blocks: config.net.n_blocks,
        sigma_data,
        noise_embed_dim: config.net.noise_embed_dim,
    };
    let policies = (0..dataset.n_agents())
        .map(|i| -> Result<AgentPolicy, TrainError> {
            let seed = init_seed(config.seed, i);
            Ok(match config.method {
                Method::Bc => AgentPolicy::Bc(init_bc(&dconf, obs_mode, seed)?),
                _ => AgentPolicy::Diffusion(init_policy(&dconf, obs_mode, seed)?),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(JointPolicySet {
        policies,
        env_digest: dataset.env_spec.digest(),
        obs_mode,
        t: dataset.t,
        h: config.h.min(dataset.t),
        meta: TrainMeta {
            method: config.method,
            seed: config.seed,
            steps_done: 0,
            smoothed_loss: None,
        },
    })
}

struct AgentStepResult {
    loss: f64,
    graph: Graph,
    loss_node: crate::autodiff::NodeId,
    bound: crate::autodiff::BoundParams,
}

fn diffusion_agent_step(
    policy: &Policy,
    windows: &[TrainingWindow],
    config: &TrainConfig,
    step: usize,
    agent: usize,
) -> Result<AgentStepResult, TrainError> {
    let mut rng = step_rng(config.seed, step, agent, STREAM_BATCH);
    let idx = sample_indices(&mut rng, windows.len(), config.batch_size);
    let (obs, clean) = batch_tensors(windows, &idx, policy.config.t);
    let out = diffusion_loss(
        policy,
        &obs,
        &clean,
        &config.noise,
        config.weighted_loss,
        &mut rng,
    )?;
    Ok(AgentStepResult {
        loss: out.value,
        graph: out.graph,
        loss_node: out.loss,
        bound: out.bound,
    })
}

fn bc_agent_step(
    bc: &BcRegressor,
    windows: &[TrainingWindow],
    config: &TrainConfig,
    step: usize,
    agent: usize,
) -> Result<AgentStepResult, TrainError> {
    let mut rng = step_rng(config.seed, step, agent, STREAM_BATCH);
    let idx = sample_indices(&mut rng, windows.len(), config.batch_size);
    let (obs, clean) = batch_tensors(windows, &idx, bc.config.t);
    let mut g = Graph::new();
    let bound = bc.params.bind(&mut g);
    let obs_node = g.leaf(obs);
    let pred = forward_bc(&mut g, &bc.params, &bound, &bc.config, obs_node)?;
    let target = g.leaf(clean);
    let resid = g.sub(pred, target)?;
    let loss = g.mean_square(resid)?;
    let value = g.value(loss).item();
    Ok(AgentStepResult {
        loss: value,
        graph: g,
        loss_node: loss,
        bound,
    })
}

/// The shared Algorithm-1 loop: per step, one loss per agent, exactly one
/// joint optimizer update, loss-log bookkeeping, optional checkpoints.
fn run_training(
    dataset: &Dataset,
    config: &TrainConfig,
    mut set: JointPolicySet,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutput, TrainError> {
    let n = set.n_agents();
    let mut log = LossLog::default();
    let mut smoothed = set.meta.smoothed_loss;
    for step in set.meta.steps_done..config.steps {
        let results: Vec<Result<AgentStepResult, TrainError>> = set
            .policies
            .par_iter()
            .enumerate()
            .map(|(agent, policy)| match policy {
                AgentPolicy::Diffusion(p) => {
                    diffusion_agent_step(p, &dataset.windows[agent], config, step, agent)
                }
                AgentPolicy::Bc(b) => {
                    bc_agent_step(b, &dataset.windows[agent], config, step, agent)
                }
            })
            .collect();
        let mut steps_out = Vec::with_capacity(n);
        for r in results {
            steps_out.push(r?);
        }
        let per_agent: Vec<f64> = steps_out.iter().map(|r| r.loss).collect();
        // L_total = Σ_i L^i; θ^i are disjoint, so one joint update is the
        // per-agent AdamW application at a shared step count. Abort before
        // touching any parameter if the loss went non-finite.
        let total: f64 = per_agent.iter().sum();
        if !total.is_finite() {
            return Err(TrainError::NonFiniteLoss { step });
        }
        let mut grads = Vec::with_capacity(n);
        for r in steps_out {
            grads.push((r.graph.backward(r.loss_node)?, r.bound));
        }
        for (policy, (g, bound)) in set.policies.iter_mut().zip(&grads) {
            policy.params_mut().adamw_step(&config.adamw, g, bound)?;
        }
        smoothed = Some(match smoothed {
            None => total,
            Some(s) => LOSS_SMOOTHING * s + (1.0 - LOSS_SMOOTHING) * total,
        });
        if step % LOG_EVERY == 0 || step + 1 == config.steps {
            log.rows.push(LossRow {
                step,
                per_agent,
                total,
                smoothed_total: smoothed.unwrap(),
            });
        }
        set.meta.steps_done = step + 1;
        set.meta.smoothed_loss = smoothed;
        if let Some(dir) = checkpoint_dir {
            let every = config.checkpoint_every;
            if every > 0 && (step + 1) % every == 0 && step + 1 < config.steps {
                checkpoint(&set, &dir.join(format!("step_{:06}", step + 1)))?;
            }
        }
    }
    Ok(TrainOutput { set, log })
}

fn train_with_method(
    dataset: &Dataset,
    config: &TrainConfig,
    resume: Option<JointPolicySet>,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutput, TrainError> {
    config.validate()?;
    let want_mode = config.method.obs_mode();
    let projected;
    let data = if config.method == Method::VanillaCtde {
        projected = project_ego_only(dataset)?;
        &projected
    } else {
        dataset
    };
    check_dataset(data, want_mode)?;
    let set = match resume {
        Some(s) => {
            if s.meta.method != config.method {
                return Err(TrainError::BadConfig(format!(
                    "resume checkpoint was trained with {:?}, config says {:?}",
                    s.meta.method, config.method
                )));
            }
            s.bind_check(&data.env_spec)?;
            s
        }
        None => fresh_set(data, config)?,
    };
    run_training(data, config, set, checkpoint_dir)
}

/// Centralized diffusion training with the shared summed loss.
pub fn train_mimicd(dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutput, TrainError> {
    train_with_method(dataset, config, None, None)
}

/// Diffusion training on ego-only observations.
pub fn train_vanilla(dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutput, TrainError> {
    train_with_method(dataset, config, None, None)
}

/// Behavior-cloning regression training.
pub fn train_bc(dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutput, TrainError> {
    train_with_method(dataset, config, None, None)
}

/// Dispatch on config.method, with optional resume and periodic
/// checkpoints.
pub fn train(
    dataset: &Dataset,
    config: &TrainConfig,
    resume: Option<JointPolicySet>,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutput, TrainError> {
    train_with_method(dataset, config, resume, checkpoint_dir)
}

// --- checkpoints ------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    format_version: u32,
    method: Method,
    seed: u64,
    steps_done: usize,
    smoothed_loss: Option<f64>,
    env_digest: String,
    obs_mode: ObsMode,
    t: usize,
    h: usize,
    configs: Vec<DenoiserConfig>,
}

/// Writes meta.json plus one parameter file per agent (values and
/// optimizer state, bitwise).
pub fn checkpoint(set: &JointPolicySet, dir: &Path) -> Result<(), TrainError> {
    fs::create_dir_all(dir)?;
    let meta = CheckpointMeta {
        format_version: CHECKPOINT_FORMAT_VERSION,
        method: set.meta.method,
        seed: set.meta.seed,
        steps_done: set.meta.steps_done,
        smoothed_loss: set.meta.smoothed_loss,
        env_digest: set.env_digest.clone(),
        obs_mode: set.obs_mode,
        t: set.t,
        h: set.h,
        configs: set.policies.iter().map(|p| p.config().clone()).collect(),
    };
    let json = serde_json::to_string_pretty(&meta).map_err(|e| TrainError::Meta(e.to_string()))?;
    fs::write(dir.join("meta.json"), json)?;
    for (i, policy) in set.policies.iter().enumerate() {
        policy.params().save(&dir.join(format!("agent_{i}.params")))?;
    }
    Ok(())
}

pub fn restore(dir: &Path) -> Result<JointPolicySet, TrainError> {
    let raw = fs::read_to_string(dir.join("meta.json"))?;
    let meta: CheckpointMeta =
        serde_json::from_str(&raw).map_err(|e| TrainError::Meta(e.to_string()))?;
    if meta.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(TrainError::UnsupportedVersion {
            found: meta.format_version,
        });
    }
    let mut policies = Vec::with_capacity(meta.configs.len());
    for (i, config) in meta.configs.iter().enumerate() {
        let params = ParamStore::load(&dir.join(format!("agent_{i}.params")))?;
        let expect = match meta.method {
            Method::Bc => config.param_count_bc(),
            _ => config.param_count_diffusion(),
        };
        if params.num_scalars() != expect {
            return Err(TrainError::Meta(format!(
                "agent {i}: {} parameter scalars on disk, config implies {expect}",
                params.num_scalars()
            )));
        }
        policies.push(match meta.method {
            Method::Bc => AgentPolicy::Bc(BcRegressor {
                config: config.clone(),
                params,
                obs_mode: meta.obs_mode,
            }),
            _ => AgentPolicy::Diffusion(Policy {
                config: config.clone(),
                params,
                obs_mode: meta.obs_mode,
            }),
        });
    }
    Ok(JointPolicySet {
        policies,
        env_digest: meta.env_digest,
        obs_mode: meta.obs_mode,
        t: meta.t,
        h: meta.h,
        meta: TrainMeta {
            method: meta.method,
            seed: meta.seed,
            steps_done: meta.steps_done,
            smoothed_loss: meta.smoothed_loss,
        },
    })
}
