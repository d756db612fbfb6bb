//! Decentralized receding-horizon execution: each agent independently
//! observes, samples its own policy, and executes the first h actions of
//! the sampled plan; the loop replans until every agent reaches its goal
//! or the step budget runs out.
//!
//! An agent's plan at replan event r is a pure function of its own
//! parameters, its own observation, and an RNG stream derived from
//! (episode seed, agent index, r) — the planning interface has no access
//! to other agents' plans or parameters, and the purity is re-checkable
//! from episode logs (see decentralization_probe).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::denoiser::{predict_bc_batch, unflatten_actions, DenoiserError};
use crate::diffusion::{
    karras_schedule, sample, DiffusionError, NoiseSchedule, K_DEFAULT, RHO_DEFAULT,
    SIGMA_MAX_DEFAULT, SIGMA_MIN_DEFAULT,
};
use crate::env::{
    observe, step_single_integrator, EnvError, EnvSpec, JointState, ObsMode, Vec2,
};
use crate::splitmix64;
use crate::training::{AgentPolicy, JointPolicySet, TrainError};

pub const GOAL_TOLERANCE_DEFAULT: f64 = 0.5;
pub const EPISODE_FORMAT_VERSION: u32 = 1;

const STREAM_PLAN: u64 = 0x51;
const STREAM_START: u64 = 0x33;

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("invalid rollout config: {0}")]
    BadConfig(String),
    #[error("plan has {got} actions, expected {want}")]
    BadPlan { got: usize, want: usize },
    #[error("episode file: {0}")]
    Malformed(String),
    #[error("unsupported episode format version {found}")]
    UnsupportedVersion { found: u32 },
    #[error(transparent)]
    Policy(#[from] TrainError),
    #[error(transparent)]
    Sampler(#[from] DiffusionError),
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("episode io: {0}")]
    Io(#[from] std::io::Error),
    #[error("episode parse at line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
}

// --- configuration -----------------------------------------------------------------

/// Sampler schedule knobs, kept in plain-config form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub k: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            k: K_DEFAULT,
            sigma_min: SIGMA_MIN_DEFAULT,
            sigma_max: SIGMA_MAX_DEFAULT,
            rho: RHO_DEFAULT,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule, DiffusionError> {
        karras_schedule(self.k, self.sigma_min, self.sigma_max, self.rho)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    /// Plan horizon (actions per sampled trajectory).
    pub t: usize,
    /// Execute horizon, 1 ≤ h ≤ t.
    pub h: usize,
    pub max_steps: usize,
    pub goal_tolerance: f64,
    pub seed: u64,
    pub schedule: ScheduleConfig,
}

impl RolloutConfig {
    pub fn defaults(spec: &EnvSpec, t: usize, h: usize) -> Self {
        RolloutConfig {
            t,
            h,
            max_steps: spec.max_steps,
            goal_tolerance: GOAL_TOLERANCE_DEFAULT,
            seed: 0,
            schedule: ScheduleConfig::default(),
        }
    }

    fn validate(&self) -> Result<(), ExecError> {
        if self.t == 0 || self.h == 0 || self.max_steps == 0 {
            return Err(ExecError::BadConfig(
                "t, h, and max_steps must be positive".into(),
            ));
        }
        if self.h > self.t {
            return Err(ExecError::BadConfig(format!(
                "execute horizon h = {} exceeds plan horizon t = {}",
                self.h, self.t
            )));
        }
        if !(self.goal_tolerance > 0.0 && self.goal_tolerance.is_finite()) {
            return Err(ExecError::BadConfig(
                "goal_tolerance must be positive and finite".into(),
            ));
        }
        Ok(())
    }
}

// --- episodes ------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Termination {
    AllGoalsReached,
    StepBudget,
    Diverged,
}

/// One replanning event: every agent's freshly sampled T-step plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplanEvent {
    pub step: usize,
    /// plans[agent][k] — the full sampled trajectory, of which the first
    /// h actions get executed.
    pub plans: Vec<Vec<Vec2>>,
}

/// Closed-loop rollout log: the unit of evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub env_digest: String,
    pub seed: u64,
    /// Joint states 0..=executed_steps.
    pub states: Vec<JointState>,
    /// actions[agent][step] — executed actions only.
    pub actions: Vec<Vec<Vec2>>,
    pub replans: Vec<ReplanEvent>,
    pub termination: Termination,
}

impl Episode {
    pub fn executed_steps(&self) -> usize {
        self.states.len() - 1
    }

    pub fn success(&self) -> bool {
        self.termination == Termination::AllGoalsReached
    }

    /// Positions per agent over the episode, paths[agent][step].
    pub fn paths(&self) -> Vec<Vec<Vec2>> {
        let n = self.states[0].agents.len();
        (0..n)
            .map(|i| self.states.iter().map(|s| s.agents[i].position).collect())
            .collect()
    }
}

/// Max |replayed − logged| position coordinate when the logged actions
/// are re-integrated from the logged initial state.
pub fn replay_deviation(episode: &Episode, spec: &EnvSpec) -> Result<f64, ExecError> {
    let mut joint = episode.states[0].clone();
    let mut worst = 0.0f64;
    for step in 0..episode.executed_steps() {
        let agents = joint
            .agents
            .iter()
            .enumerate()
            .map(|(i, s)| step_single_integrator(s, episode.actions[i][step], spec.dt))
            .collect::<Result<Vec<_>, _>>()?;
        joint = JointState {
            agents,
            time_index: joint.time_index + 1,
        };
        for (replayed, logged) in joint.agents.iter().zip(&episode.states[step + 1].agents) {
            worst = worst
                .max((replayed.position.x - logged.position.x).abs())
                .max((replayed.position.y - logged.position.y).abs());
        }
    }
    Ok(worst)
}

// --- planners ------------------------------------------------------------------------

/// One agent's plan source. `plan` must return exactly the configured
/// number of actions and may only look at the ego observation and its
/// own RNG stream — decentralization lives in this signature.
pub trait Planner: Sync {
    fn horizon(&self) -> usize;
    fn obs_mode(&self) -> ObsMode;
    fn plan(
        &self,
        obs: &[f64],
        step: usize,
        schedule: &NoiseSchedule,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Vec2>, ExecError>;
}

impl Planner for AgentPolicy {
    fn horizon(&self) -> usize {
        self.config().t
    }

    fn obs_mode(&self) -> ObsMode {
        match self {
            AgentPolicy::Diffusion(p) => p.obs_mode,
            AgentPolicy::Bc(b) => b.obs_mode,
        }
    }

    fn plan(
        &self,
        obs: &[f64],
        _step: usize,
        schedule: &NoiseSchedule,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Vec2>, ExecError> {
        match self {
            AgentPolicy::Diffusion(p) => Ok(sample(p, obs, schedule, rng)?),
            AgentPolicy::Bc(b) => {
                let obs_t = Tensor::matrix(1, obs.len(), obs.to_vec());
                let out = predict_bc_batch(b, &obs_t)?;
                Ok(unflatten_actions(out.data()))
            }
        }
    }
}

/// Replays a fixed action sequence (zero-padded past its end); the
/// expert-replay harness.
#[derive(Debug, Clone)]
pub struct ScriptedPolicy {
    pub actions: Vec<Vec2>,
    pub t: usize,
}

impl Planner for ScriptedPolicy {
    fn horizon(&self) -> usize {
        self.t
    }

    fn obs_mode(&self) -> ObsMode {
        ObsMode::Full
    }

    fn plan(
        &self,
        _obs: &[f64],
        step: usize,
        _schedule: &NoiseSchedule,
        _rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Vec2>, ExecError> {
        Ok((step..step + self.t)
            .map(|k| self.actions.get(k).copied().unwrap_or(Vec2::ZERO))
            .collect())
    }
}

// --- rollout -------------------------------------------------------------------------

fn plan_rng(seed: u64, agent: usize, event: usize) -> ChaCha8Rng {
    let mixed = splitmix64(
        seed ^ splitmix64((event as u64) ^ splitmix64((agent as u64) << 32 | STREAM_PLAN)),
    );
    ChaCha8Rng::seed_from_u64(mixed)
}

fn start_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(STREAM_START)))
}

fn all_at_goal(joint: &JointState, tolerance: f64) -> bool {
    joint
        .agents
        .iter()
        .all(|a| a.position.dist(a.goal) <= tolerance)
}

/// Receding-horizon loop over explicit planners. Observations refresh
/// only at replan boundaries; within a window execution is open-loop,
/// and all agents advance synchronously.
pub fn rollout_planners(
    planners: &[&dyn Planner],
    spec: &EnvSpec,
    config: &RolloutConfig,
    seed: u64,
) -> Result<Episode, ExecError> {
    config.validate()?;
    if planners.len() != spec.n_agents {
        return Err(ExecError::BadConfig(format!(
            "{} planners for {} agents",
            planners.len(),
            spec.n_agents
        )));
    }
    for p in planners {
        if p.horizon() != config.t {
            return Err(ExecError::BadConfig(format!(
                "planner horizon {} does not match config t = {}",
                p.horizon(),
                config.t
            )));
        }
    }
    let schedule = config.schedule.build()?;
    let n = spec.n_agents;
    let mut joint = spec.sample_initial_state(&mut start_rng(seed));
    let mut states = vec![joint.clone()];
    let mut actions: Vec<Vec<Vec2>> = vec![Vec::new(); n];
    let mut replans: Vec<ReplanEvent> = Vec::new();

    let termination = loop {
        if all_at_goal(&joint, config.goal_tolerance) {
            break Termination::AllGoalsReached;
        }
        let step = states.len() - 1;
        if step >= config.max_steps {
            break Termination::StepBudget;
        }

        // Replan: each agent observes and samples independently.
        let event = replans.len();
        let mut plans = Vec::with_capacity(n);
        let mut diverged = false;
        for (i, planner) in planners.iter().enumerate() {
            let obs = observe(&joint, i, spec, planner.obs_mode())?.flatten();
            let mut rng = plan_rng(seed, i, event);
            match planner.plan(&obs, step, &schedule, &mut rng) {
                Ok(plan) if plan.len() == config.t => plans.push(plan),
                Ok(plan) => {
                    return Err(ExecError::BadPlan {
                        got: plan.len(),
                        want: config.t,
                    })
                }
                Err(ExecError::Sampler(DiffusionError::NonFinite { .. })) => {
                    diverged = true;
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if diverged {
            break Termination::Diverged;
        }
        replans.push(ReplanEvent {
            step,
            plans: plans.clone(),
        });

        // Execute the first h actions (bounded by the step budget),
        // committing a step only if every agent stays finite.
        let window = config.h.min(config.max_steps - step);
        let mut broke = false;
        'window: for k in 0..window {
            let mut next = Vec::with_capacity(n);
            for i in 0..n {
                match step_single_integrator(&joint.agents[i], plans[i][k], spec.dt) {
                    Ok(s) if s.position.is_finite() => next.push(s),
                    _ => {
                        broke = true;
                        break 'window;
                    }
                }
            }
            for i in 0..n {
                actions[i].push(plans[i][k]);
            }
            joint = JointState {
                agents: next,
                time_index: joint.time_index + 1,
            };
            states.push(joint.clone());
        }
        if broke {
            break Termination::Diverged;
        }
    };

    Ok(Episode {
        env_digest: spec.digest(),
        seed,
        states,
        actions,
        replans,
        termination,
    })
}

/// Rollout of a trained policy set, bound-checked against `spec`.
pub fn rollout(
    set: &JointPolicySet,
    spec: &EnvSpec,
    config: &RolloutConfig,
) -> Result<Episode, ExecError> {
    set.bind_check(spec)?;
    if set.t != config.t {
        return Err(ExecError::BadConfig(format!(
            "policy set was trained with T = {}, config says t = {}",
            set.t, config.t
        )));
    }
    let planners: Vec<&dyn Planner> = set.policies.iter().map(|p| p as &dyn Planner).collect();
    rollout_planners(&planners, spec, config, config.seed)
}

/// Independent episodes with seeds base_seed, base_seed+1, …, evaluated
/// in parallel; the result is bitwise identical to a serial loop because
/// each episode is a pure function of its seed.
pub fn batch_rollout(
    set: &JointPolicySet,
    spec: &EnvSpec,
    config: &RolloutConfig,
    n_episodes: usize,
    base_seed: u64,
) -> Result<Vec<Episode>, ExecError> {
    if n_episodes == 0 {
        return Err(ExecError::BadConfig("n_episodes must be ≥ 1".into()));
    }
    set.bind_check(spec)?;
    if set.t != config.t {
        return Err(ExecError::BadConfig(format!(
            "policy set was trained with T = {}, config says t = {}",
            set.t, config.t
        )));
    }
    let planners: Vec<&dyn Planner> = set.policies.iter().map(|p| p as &dyn Planner).collect();
    (0..n_episodes)
        .into_par_iter()
        .map(|e| rollout_planners(&planners, spec, config, base_seed + e as u64))
        .collect()
}

/// Recasts an expert demonstration as an Episode (no replan events — the
/// demo is a script, not a sampled policy), so demonstrations flow through
/// the same evaluation pipeline as rollouts.
pub fn episode_from_demo(
    demo: &crate::expert::Demonstration,
    spec: &EnvSpec,
    seed: u64,
) -> Episode {
    let states = (0..=demo.horizon)
        .map(|t| JointState {
            agents: demo
                .per_agent
                .iter()
                .map(|trace| crate::env::AgentState {
                    position: trace.observations[t].ego_position,
                    goal: trace.observations[t].ego_goal,
                })
                .collect(),
            time_index: t,
        })
        .collect();
    Episode {
        env_digest: spec.digest(),
        seed,
        states,
        actions: demo.per_agent.iter().map(|t| t.actions.clone()).collect(),
        replans: Vec::new(),
        termination: Termination::AllGoalsReached,
    }
}

// --- decentralization probe ---------------------------------------------------------

/// Result of re-deriving logged plans from (own parameters, own
/// observation, own stream) alone. `max_abs_dev` is 0 exactly when every
/// probed plan is a pure function of those three inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub events_probed: usize,
    pub plans_probed: usize,
    pub max_abs_dev: f64,
}

/// Replays ≥ `min_events` replan events from fresh episodes (seeds
/// config.seed, +1, …) and recomputes every agent's plan in isolation.
pub fn decentralization_probe(
    set: &JointPolicySet,
    spec: &EnvSpec,
    config: &RolloutConfig,
    min_events: usize,
) -> Result<ProbeReport, ExecError> {
    let schedule = config.schedule.build()?;
    let mut events = 0usize;
    let mut plans = 0usize;
    let mut max_dev = 0.0f64;
    let mut episode_seed = config.seed;
    while events < min_events {
        let mut cfg = config.clone();
        cfg.seed = episode_seed;
        let episode = rollout(set, spec, &cfg)?;
        for (event_idx, event) in episode.replans.iter().enumerate() {
            let joint = &episode.states[event.step];
            for (i, planner) in set.policies.iter().enumerate() {
                let obs = observe(joint, i, spec, planner.obs_mode())?.flatten();
                let mut rng = plan_rng(episode_seed, i, event_idx);
                let replanned = planner.plan(&obs, event.step, &schedule, &mut rng)?;
                for (a, b) in replanned.iter().zip(&event.plans[i]) {
                    max_dev = max_dev.max((a.x - b.x).abs()).max((a.y - b.y).abs());
                }
                plans += 1;
            }
            events += 1;
        }
        episode_seed += 1;
    }
    Ok(ProbeReport {
        events_probed: events,
        plans_probed: plans,
        max_abs_dev: max_dev,
    })
}

// --- episode files --------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct EpisodeHeader {
    format_version: u32,
    env_digest: String,
    seed: u64,
    config: RolloutConfig,
    termination: Termination,
    n_agents: usize,
    executed_steps: usize,
    n_replans: usize,
}

#[derive(Serialize, Deserialize)]
struct StepRecord {
    t: usize,
    state: JointState,
    /// Joint action taken from this state; absent on the final record.
    action: Option<Vec<Vec2>>,
}

/// One JSON record per line: header, per-step states/actions, replan
/// events. Floats survive the round trip bitwise.
pub fn save_episode(
    episode: &Episode,
    config: &RolloutConfig,
    path: &Path,
) -> Result<(), ExecError> {
    let n = episode.actions.len();
    let mut w = BufWriter::new(File::create(path)?);
    let header = EpisodeHeader {
        format_version: EPISODE_FORMAT_VERSION,
        env_digest: episode.env_digest.clone(),
        seed: episode.seed,
        config: config.clone(),
        termination: episode.termination,
        n_agents: n,
        executed_steps: episode.executed_steps(),
        n_replans: episode.replans.len(),
    };
    writeln!(w, "{}", serde_json::to_string(&header).map_err(json_err)?)?;
    for (t, state) in episode.states.iter().enumerate() {
        let action = (t < episode.executed_steps())
            .then(|| (0..n).map(|i| episode.actions[i][t]).collect());
        let record = StepRecord {
            t,
            state: state.clone(),
            action,
        };
        writeln!(w, "{}", serde_json::to_string(&record).map_err(json_err)?)?;
    }
    for event in &episode.replans {
        writeln!(w, "{}", serde_json::to_string(event).map_err(json_err)?)?;
    }
    Ok(())
}

fn json_err(e: serde_json::Error) -> ExecError {
    ExecError::Malformed(e.to_string())
}

pub fn load_episode(path: &Path) -> Result<(Episode, RolloutConfig), ExecError> {
    let mut lines = BufReader::new(File::open(path)?).lines().enumerate();
    let (_, header_line) = lines
        .next()
        .ok_or_else(|| ExecError::Malformed("empty episode file".into()))?;
    let header: EpisodeHeader = serde_json::from_str(&header_line?)
        .map_err(|source| ExecError::Parse { line: 1, source })?;
    if header.format_version != EPISODE_FORMAT_VERSION {
        return Err(ExecError::UnsupportedVersion {
            found: header.format_version,
        });
    }
    let mut states = Vec::with_capacity(header.executed_steps + 1);
    let mut actions: Vec<Vec<Vec2>> = vec![Vec::new(); header.n_agents];
    for _ in 0..=header.executed_steps {
        let (idx, line) = lines
            .next()
            .ok_or_else(|| ExecError::Malformed("truncated step records".into()))?;
        let record: StepRecord = serde_json::from_str(&line?)
            .map_err(|source| ExecError::Parse {
                line: idx + 1,
                source,
            })?;
        if let Some(joint_action) = record.action {
            if joint_action.len() != header.n_agents {
                return Err(ExecError::Malformed(format!(
                    "step {} action has {} agents, header says {}",
                    record.t,
                    joint_action.len(),
                    header.n_agents
                )));
            }
            for (i, a) in joint_action.into_iter().enumerate() {
                actions[i].push(a);
            }
        }
        states.push(record.state);
    }
    let mut replans = Vec::with_capacity(header.n_replans);
    for _ in 0..header.n_replans {
        let (idx, line) = lines
            .next()
            .ok_or_else(|| ExecError::Malformed("truncated replan records".into()))?;
        let event: ReplanEvent = serde_json::from_str(&line?)
            .map_err(|source| ExecError::Parse {
                line: idx + 1,
                source,
            })?;
        replans.push(event);
    }
    Ok((
        Episode {
            env_digest: header.env_digest,
            seed: header.seed,
            states,
            actions,
            replans,
            termination: header.termination,
        },
        header.config,
    ))
}
