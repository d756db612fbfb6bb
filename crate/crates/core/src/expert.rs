//! Scripted multi-modal expert demonstrations and their slicing into
//! diffusion training windows.
//!
//! Each coordination mode is a set of per-agent waypoint plans tracked by a
//! proportional velocity controller with truncated Gaussian action noise.
//! Waypoints may carry a gate — a predicate on the current joint state —
//! so yielding agents hold station until the right-of-way agent has
//! cleared. Every generated demonstration is verified against the expert
//! clearances, the goal condition, and the mode classifier before it is
//! accepted; failures re-roll the jitter and noise up to a retry budget.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{
    observe, step_single_integrator, AgentState, EnvKind, EnvSpec, JointState, ObsMode,
    Observation, Vec2,
};
use crate::metrics::{classify_mode, Classification};
use crate::splitmix64;

/// Controller speed cap (units/time); also the bound on expert actions.
pub const V_MAX: f64 = 1.5;
/// Required minimum inter-agent clearance in Swap demonstrations.
pub const SWAP_AGENT_CLEARANCE: f64 = 3.0;
/// Required minimum obstacle center-distance in Swap demonstrations.
pub const SWAP_OBSTACLE_CLEARANCE: f64 = 4.0;
/// Required minimum inter-agent clearance in RoadCrossing demonstrations.
pub const ROAD_AGENT_CLEARANCE: f64 = 0.75;
/// Every agent must finish within this distance of its goal.
pub const GOAL_RADIUS: f64 = 0.5;
/// Attempts per demonstration before giving up.
pub const RETRY_BUDGET: usize = 20;

const K_P: f64 = 2.0;
const NOISE_SIGMA: f64 = 0.05;
/// Demo terminates once every agent is inside this radius (tighter than
/// GOAL_RADIUS so controller wobble cannot break the goal condition).
const ARRIVE_RADIUS: f64 = 0.4;
const SWITCH_RADIUS: f64 = 0.6;

#[derive(Debug, Error)]
pub enum ExpertError {
    #[error("mode label {label} invalid for {kind:?}")]
    InvalidMode { kind: EnvKind, label: usize },
    #[error("mode weights invalid: {0}")]
    BadWeights(String),
    #[error("expected {want} mode weights, got {got}")]
    WeightCount { got: usize, want: usize },
    #[error(
        "failed to generate a {kind:?} mode-{label} demo in {attempts} attempts; \
         last violation: {constraint}"
    )]
    Generation {
        kind: EnvKind,
        label: usize,
        attempts: usize,
        constraint: String,
    },
    #[error("prediction horizon {t} exceeds demo horizon {horizon}")]
    HorizonTooShort { t: usize, horizon: usize },
    #[error("stride must be ≥ 1")]
    ZeroStride,
    #[error("no demonstrations given")]
    NoDemos,
    #[error("dataset io: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error("dataset truncated: header promises {want} windows, found {got}")]
    Truncated { want: usize, got: usize },
    #[error("unsupported dataset format version {found} (expected {DATASET_FORMAT_VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error(transparent)]
    Env(#[from] crate::env::EnvError),
    #[error(transparent)]
    Metrics(#[from] Box<crate::metrics::MetricsError>),
}

impl From<crate::metrics::MetricsError> for ExpertError {
    fn from(e: crate::metrics::MetricsError) -> Self {
        ExpertError::Metrics(Box::new(e))
    }
}

/// One coordination mode of one environment.
///
/// Swap labels: 0 both-pass-right (agent 0 south, agent 1 north),
/// 1 both-pass-left, 2/3 both north with agent 0/1 yielding, 4/5 the south
/// mirrors. RoadCrossing labels: which corridor agent yields to the
/// crossing agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModeId {
    pub env_kind: EnvKind,
    pub label: usize,
}

impl ModeId {
    pub fn new(spec: &EnvSpec, label: usize) -> Result<Self, ExpertError> {
        if label >= spec.n_modes() {
            return Err(ExpertError::InvalidMode {
                kind: spec.kind,
                label,
            });
        }
        Ok(ModeId {
            env_kind: spec.kind,
            label,
        })
    }

    pub fn all(spec: &EnvSpec) -> Vec<ModeId> {
        (0..spec.n_modes())
            .map(|label| ModeId {
                env_kind: spec.kind,
                label,
            })
            .collect()
    }
}

/// One agent's record within a demonstration: an observation per step plus
/// a terminal observation, and the executed actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTrace {
    pub observations: Vec<Observation>,
    pub actions: Vec<Vec2>,
}

impl AgentTrace {
    pub fn positions(&self) -> Vec<Vec2> {
        self.observations.iter().map(|o| o.ego_position).collect()
    }
}

/// A complete collision-free joint trajectory realizing one mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub mode: ModeId,
    pub per_agent: Vec<AgentTrace>,
    /// Number of action steps; every observation list has horizon + 1
    /// entries.
    pub horizon: usize,
}

impl Demonstration {
    pub fn paths(&self) -> Vec<Vec<Vec2>> {
        self.per_agent.iter().map(|t| t.positions()).collect()
    }
}

// --- waypoint plans ---------------------------------------------------------

/// Predicate on the current joint state that releases a gated waypoint.
#[derive(Debug, Clone, Copy)]
enum Gate {
    /// Another agent is within `dist` of its own goal.
    NearGoal { agent: usize, dist: f64 },
    /// Another agent's y exceeds `y`.
    AboveY { agent: usize, y: f64 },
    /// Another agent's x exceeds ego's x plus `offset`.
    AheadOfMeX { agent: usize, offset: f64 },
    /// Another agent's x is below ego's x plus `offset`.
    BehindMeX { agent: usize, offset: f64 },
}

impl Gate {
    fn satisfied(&self, joint: &JointState, ego: usize) -> bool {
        let pos = |i: usize| joint.agents[i].position;
        match *self {
            Gate::NearGoal { agent, dist } => {
                pos(agent).dist(joint.agents[agent].goal) < dist
            }
            Gate::AboveY { agent, y } => pos(agent).y > y,
            Gate::AheadOfMeX { agent, offset } => pos(agent).x > pos(ego).x + offset,
            Gate::BehindMeX { agent, offset } => pos(agent).x < pos(ego).x + offset,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Waypoint {
    target: Vec2,
    speed: f64,
    gate: Option<Gate>,
}

fn wp(x: f64, y: f64, speed: f64) -> Waypoint {
    Waypoint {
        target: Vec2::new(x, y),
        speed,
        gate: None,
    }
}

fn gated(x: f64, y: f64, speed: f64, gate: Gate) -> Waypoint {
    Waypoint {
        target: Vec2::new(x, y),
        speed,
        gate: Some(gate),
    }
}

/// Swap lane across the north side, east to west; `sign` = −1 mirrors
/// south. The lane peels off steeply from the start, so a short way in
/// every position is unambiguous about its mode, and keeps ≥ 5.9 units
/// from the obstacle center (radius 4).
fn swap_lane_east_west(sign: f64, speed: f64) -> Vec<Waypoint> {
    vec![
        wp(7.0, 4.8 * sign, speed),
        wp(2.5, 6.0 * sign, speed),
        wp(-2.5, 6.0 * sign, speed),
        wp(-7.0, 4.8 * sign, speed),
    ]
}

fn swap_lane_west_east(sign: f64, speed: f64) -> Vec<Waypoint> {
    vec![
        wp(-7.0, 4.8 * sign, speed),
        wp(-2.5, 6.0 * sign, speed),
        wp(2.5, 6.0 * sign, speed),
        wp(7.0, 4.8 * sign, speed),
    ]
}

/// Per-agent waypoint plans realizing `mode` (goal waypoints appended by
/// the simulator).
fn mode_plans(spec: &EnvSpec, mode: ModeId) -> Vec<Vec<Waypoint>> {
    match spec.kind {
        EnvKind::Swap => {
            let s = V_MAX;
            match mode.label {
                // Trivial modes: opposite sides, no gates.
                0 => vec![swap_lane_west_east(-1.0, s), swap_lane_east_west(1.0, s)],
                1 => vec![swap_lane_west_east(1.0, s), swap_lane_east_west(-1.0, s)],
                // Same-side yields: the yielder starts up its lane like a
                // mover, forks off at x = ∓8.3 (still on the lane line, so
                // yielding stays a live continuation of the shared lane
                // prefix), crosses the centerline to a hold point clear of
                // the mover's arc and exit legs (≥ 3.3 units), waits until
                // the mover is almost home, then rejoins the arc.
                2 | 3 | 4 | 5 => {
                    let sign = if mode.label <= 3 { 1.0 } else { -1.0 };
                    let agent0_yields = mode.label % 2 == 0;
                    if agent0_yields {
                        let mut yielder = vec![
                            wp(-8.3, 2.7 * sign, s),
                            gated(-7.8, -2.8 * sign, s, Gate::NearGoal { agent: 1, dist: 3.0 }),
                        ];
                        yielder.extend(swap_lane_west_east(sign, s).split_off(1));
                        vec![yielder, swap_lane_east_west(sign, s)]
                    } else {
                        let mut yielder = vec![
                            wp(8.3, 2.7 * sign, s),
                            gated(7.8, -2.8 * sign, s, Gate::NearGoal { agent: 0, dist: 3.0 }),
                        ];
                        yielder.extend(swap_lane_east_west(sign, s).split_off(1));
                        vec![swap_lane_west_east(sign, s), yielder]
                    }
                }
                _ => unreachable!("label validated by ModeId::new"),
            }
        }
        EnvKind::RoadCrossing => {
            let corridor = 1.4;
            let crossing = 0.9;
            match mode.label {
                // Corridor agent 0 holds east of the crossing line while
                // the crossing agent threads through; the crossing agent
                // pauses on the median to fall in behind agent 1.
                0 => vec![
                    vec![gated(1.1, -0.9, corridor, Gate::AboveY { agent: 2, y: 0.2 })],
                    vec![],
                    vec![gated(
                        0.0,
                        0.0,
                        crossing,
                        Gate::AheadOfMeX { agent: 1, offset: 0.4 },
                    )],
                ],
                // The crossing agent waits south of the road for agent 0,
                // then crosses in front of agent 1, which holds west of
                // the crossing line until its lane is clear.
                1 => vec![
                    vec![],
                    vec![gated(-1.1, 0.9, corridor, Gate::AboveY { agent: 2, y: 2.0 })],
                    vec![gated(
                        0.0,
                        -1.9,
                        crossing,
                        Gate::BehindMeX { agent: 0, offset: -0.3 },
                    )],
                ],
                _ => unreachable!("label validated by ModeId::new"),
            }
        }
    }
}

// --- generation --------------------------------------------------------------

/// Zero-mean Gaussian truncated at ±2σ, via rejection.
fn truncated_noise(rng: &mut impl Rng) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        let x = NOISE_SIGMA * z;
        if x.abs() <= 2.0 * NOISE_SIGMA {
            return x;
        }
    }
}

struct PlanTracker {
    waypoints: Vec<Waypoint>,
    index: usize,
}

impl PlanTracker {
    /// P-control toward the current waypoint, advancing past reached
    /// (and released) waypoints. The final waypoint is the goal and is
    /// held forever.
    fn command(&mut self, joint: &JointState, ego: usize) -> Vec2 {
        let pos = joint.agents[ego].position;
        while self.index + 1 < self.waypoints.len() {
            let cur = &self.waypoints[self.index];
            if pos.dist(cur.target) > SWITCH_RADIUS {
                break;
            }
            match cur.gate {
                Some(g) if !g.satisfied(joint, ego) => break,
                _ => self.index += 1,
            }
        }
        let cur = &self.waypoints[self.index];
        ((cur.target - pos) * K_P).clamp_norm(cur.speed)
    }
}

fn simulate(spec: &EnvSpec, mode: ModeId, rng: &mut ChaCha8Rng) -> Result<Demonstration, String> {
    let mut joint = spec.sample_initial_state(rng);
    let mut trackers: Vec<PlanTracker> = mode_plans(spec, mode)
        .into_iter()
        .enumerate()
        .map(|(i, mut wps)| {
            wps.push(wp(spec.nominal_goals[i].x, spec.nominal_goals[i].y, V_MAX));
            PlanTracker {
                waypoints: wps,
                index: 0,
            }
        })
        .collect();

    let observe_all = |joint: &JointState| -> Vec<Observation> {
        (0..spec.n_agents)
            .map(|i| observe(joint, i, spec, ObsMode::Full).expect("valid index"))
            .collect()
    };

    let mut traces: Vec<AgentTrace> = observe_all(&joint)
        .into_iter()
        .map(|o| AgentTrace {
            observations: vec![o],
            actions: Vec::new(),
        })
        .collect();

    let arrived = |joint: &JointState| {
        joint
            .agents
            .iter()
            .all(|a| a.position.dist(a.goal) < ARRIVE_RADIUS)
    };

    let mut steps = 0;
    while !arrived(&joint) {
        if steps >= spec.max_steps {
            return Err(format!(
                "not all agents reached their goals within {} steps",
                spec.max_steps
            ));
        }
        let mut actions = Vec::with_capacity(spec.n_agents);
        for i in 0..spec.n_agents {
            let cmd = trackers[i].command(&joint, i);
            let noisy = cmd + Vec2::new(truncated_noise(rng), truncated_noise(rng));
            actions.push(noisy.clamp_norm(V_MAX));
        }
        let agents = joint
            .agents
            .iter()
            .zip(&actions)
            .map(|(a, &act)| step_single_integrator(a, act, spec.dt).map_err(|e| e.to_string()))
            .collect::<Result<Vec<AgentState>, String>>()?;
        joint = JointState {
            agents,
            time_index: joint.time_index + 1,
        };
        steps += 1;
        for (trace, (obs, act)) in traces
            .iter_mut()
            .zip(observe_all(&joint).into_iter().zip(&actions))
        {
            trace.observations.push(obs);
            trace.actions.push(*act);
        }
    }
    Ok(Demonstration {
        mode,
        per_agent: traces,
        horizon: steps,
    })
}

/// Expert clearance thresholds (agent, obstacle) for an environment.
pub fn expert_clearances(spec: &EnvSpec) -> (f64, f64) {
    match spec.kind {
        EnvKind::Swap => (SWAP_AGENT_CLEARANCE, SWAP_OBSTACLE_CLEARANCE),
        EnvKind::RoadCrossing => (ROAD_AGENT_CLEARANCE, 0.0),
    }
}

fn check_demo(spec: &EnvSpec, mode: ModeId, demo: &Demonstration) -> Result<(), String> {
    let states: Vec<JointState> = (0..=demo.horizon)
        .map(|t| JointState {
            agents: demo
                .per_agent
                .iter()
                .enumerate()
                .map(|(i, tr)| AgentState {
                    position: tr.observations[t].ego_position,
                    goal: spec.nominal_goals[i],
                })
                .collect(),
            time_index: t,
        })
        .collect();
    let (agent_thr, obstacle_thr) = expert_clearances(spec);
    let report = crate::env::collision_report(&states, agent_thr, obstacle_thr, &spec.obstacles)
        .map_err(|e| e.to_string())?;
    if report.agent_collision {
        return Err(format!("inter-agent clearance < {agent_thr}"));
    }
    if report.obstacle_collision {
        return Err(format!("obstacle clearance < {obstacle_thr}"));
    }
    for (i, tr) in demo.per_agent.iter().enumerate() {
        let last = tr.observations[demo.horizon].ego_position;
        if last.dist(spec.nominal_goals[i]) >= GOAL_RADIUS {
            return Err(format!("agent {i} ended {:.3} from goal", last.dist(spec.nominal_goals[i])));
        }
        if tr.actions.iter().any(|a| a.norm() > V_MAX + 1e-12) {
            return Err(format!("agent {i} action exceeds v_max"));
        }
    }
    match classify_mode(&demo.paths(), spec).map_err(|e| e.to_string())? {
        Classification::Mode(m) if m == mode => Ok(()),
        Classification::Mode(m) => Err(format!(
            "classified as mode {} instead of {}",
            m.label, mode.label
        )),
        Classification::Unclassified => Err("classified as Unclassified".to_string()),
    }
}

/// Generates one verified demonstration of `mode`, re-rolling jitter and
/// noise until the clearance/goal/mode checks pass or the budget runs out.
pub fn generate_demo(spec: &EnvSpec, mode: ModeId, seed: u64) -> Result<Demonstration, ExpertError> {
    if mode.env_kind != spec.kind || mode.label >= spec.n_modes() {
        return Err(ExpertError::InvalidMode {
            kind: spec.kind,
            label: mode.label,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut last = String::new();
    for _ in 0..RETRY_BUDGET {
        match simulate(spec, mode, &mut rng) {
            Ok(demo) => match check_demo(spec, mode, &demo) {
                Ok(()) => return Ok(demo),
                Err(violation) => last = violation,
            },
            Err(violation) => last = violation,
        }
    }
    Err(ExpertError::Generation {
        kind: spec.kind,
        label: mode.label,
        attempts: RETRY_BUDGET,
        constraint: last,
    })
}

/// Categorical mode draw with weights proportional to `weights`.
pub fn sample_mode(
    spec: &EnvSpec,
    weights: &[f64],
    rng: &mut impl Rng,
) -> Result<ModeId, ExpertError> {
    if weights.len() != spec.n_modes() {
        return Err(ExpertError::WeightCount {
            got: weights.len(),
            want: spec.n_modes(),
        });
    }
    let dist =
        WeightedIndex::new(weights).map_err(|e| ExpertError::BadWeights(e.to_string()))?;
    let label = rng.sample(&dist);
    Ok(ModeId {
        env_kind: spec.kind,
        label,
    })
}

/// `per_mode` verified demonstrations of every mode, in mode order, with
/// per-demo seeds derived from `seed`.
pub fn generate_corpus(
    spec: &EnvSpec,
    per_mode: usize,
    seed: u64,
) -> Result<Vec<Demonstration>, ExpertError> {
    let mut demos = Vec::with_capacity(per_mode * spec.n_modes());
    for mode in ModeId::all(spec) {
        for j in 0..per_mode {
            let s = splitmix64(seed ^ splitmix64(((mode.label as u64) << 32) | j as u64));
            demos.push(generate_demo(spec, mode, s)?);
        }
    }
    Ok(demos)
}

/// `n` verified demonstrations with modes cycling round-robin — the
/// held-out expert sets that evaluation compares rollouts against.
pub fn generate_heldout(
    spec: &EnvSpec,
    n: usize,
    seed: u64,
) -> Result<Vec<Demonstration>, ExpertError> {
    let modes = ModeId::all(spec);
    (0..n)
        .map(|e| {
            let mode = modes[e % modes.len()];
            generate_demo(spec, mode, splitmix64(seed ^ splitmix64(0x4E1D ^ e as u64)))
        })
        .collect()
}

// --- windows and datasets -----------------------------------------------------

/// One diffusion training example: the observation at a window start and
/// the next `T` actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingWindow {
    pub agent_index: usize,
    pub observation: Vec<f64>,
    pub actions: Vec<Vec2>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub demos_per_mode: Vec<usize>,
    pub seed: u64,
}

/// Windowed expert corpus for one environment and observation mode.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub env_spec: EnvSpec,
    pub t: usize,
    pub obs_mode: ObsMode,
    /// windows[agent_index] — every agent has at least one window.
    pub windows: Vec<Vec<TrainingWindow>>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn n_agents(&self) -> usize {
        self.windows.len()
    }

    pub fn total_windows(&self) -> usize {
        self.windows.iter().map(|w| w.len()).sum()
    }

    pub fn obs_dim(&self) -> usize {
        self.env_spec.obs_dim(self.obs_mode)
    }

    /// Empirical standard deviation of all action components pooled across
    /// agents and windows — the σ_data estimate for EDM preconditioning.
    pub fn action_std(&self) -> f64 {
        let mut n = 0usize;
        let mut mean = 0.0f64;
        let mut m2 = 0.0f64;
        for w in self.windows.iter().flatten() {
            for a in &w.actions {
                for v in [a.x, a.y] {
                    n += 1;
                    let d = v - mean;
                    mean += d / n as f64;
                    m2 += d * (v - mean);
                }
            }
        }
        if n == 0 {
            return 1.0;
        }
        (m2 / n as f64).sqrt()
    }
}

/// Slices demonstrations into (observation, T-step action) windows at
/// start indices 0, stride, 2·stride, … ≤ horizon − T.
pub fn window_dataset(
    demos: &[Demonstration],
    spec: &EnvSpec,
    t: usize,
    stride: usize,
    obs_mode: ObsMode,
    provenance: Provenance,
) -> Result<Dataset, ExpertError> {
    if stride == 0 {
        return Err(ExpertError::ZeroStride);
    }
    if demos.is_empty() {
        return Err(ExpertError::NoDemos);
    }
    if let Some(short) = demos.iter().find(|d| d.horizon < t) {
        return Err(ExpertError::HorizonTooShort {
            t,
            horizon: short.horizon,
        });
    }
    let mut windows: Vec<Vec<TrainingWindow>> = vec![Vec::new(); spec.n_agents];
    for demo in demos {
        for (agent_index, trace) in demo.per_agent.iter().enumerate() {
            let mut start = 0;
            while start + t <= demo.horizon {
                let obs = match obs_mode {
                    ObsMode::Full => trace.observations[start].clone(),
                    ObsMode::EgoOnly => trace.observations[start].to_ego_only(),
                };
                windows[agent_index].push(TrainingWindow {
                    agent_index,
                    observation: obs.flatten(),
                    actions: trace.actions[start..start + t].to_vec(),
                });
                start += stride;
            }
        }
    }
    Ok(Dataset {
        env_spec: spec.clone(),
        t,
        obs_mode,
        windows,
        provenance,
    })
}

// --- dataset files --------------------------------------------------------------

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    format_version: u32,
    env_spec: EnvSpec,
    t: usize,
    obs_mode: ObsMode,
    n_agents: usize,
    demos_per_mode: Vec<usize>,
    seed: u64,
    num_windows: usize,
}

/// One JSON record per line: a header, then every window. serde_json emits
/// shortest-round-trip float literals, so the save/load cycle is bitwise.
pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<(), ExpertError> {
    let mut w = BufWriter::new(File::create(path)?);
    let header = DatasetHeader {
        format_version: DATASET_FORMAT_VERSION,
        env_spec: dataset.env_spec.clone(),
        t: dataset.t,
        obs_mode: dataset.obs_mode,
        n_agents: dataset.n_agents(),
        demos_per_mode: dataset.provenance.demos_per_mode.clone(),
        seed: dataset.provenance.seed,
        num_windows: dataset.total_windows(),
    };
    serde_json::to_writer(&mut w, &header).map_err(io_err)?;
    w.write_all(b"\n")?;
    for window in dataset.windows.iter().flatten() {
        serde_json::to_writer(&mut w, window).map_err(io_err)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn io_err(e: serde_json::Error) -> ExpertError {
    ExpertError::Io(std::io::Error::other(e))
}

pub fn load_dataset(path: &Path) -> Result<Dataset, ExpertError> {
    let mut lines = BufReader::new(File::open(path)?).lines();
    let header_line = lines.next().ok_or(ExpertError::Truncated { want: 1, got: 0 })??;
    let header: DatasetHeader =
        serde_json::from_str(&header_line).map_err(|source| ExpertError::Parse { line: 1, source })?;
    if header.format_version != DATASET_FORMAT_VERSION {
        return Err(ExpertError::UnsupportedVersion {
            found: header.format_version,
        });
    }
    let mut windows: Vec<Vec<TrainingWindow>> = vec![Vec::new(); header.n_agents];
    let mut got = 0usize;
    for (idx, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let window: TrainingWindow = serde_json::from_str(&line)
            .map_err(|source| ExpertError::Parse { line: idx + 2, source })?;
        windows[window.agent_index].push(window);
        got += 1;
    }
    if got != header.num_windows {
        return Err(ExpertError::Truncated {
            want: header.num_windows,
            got,
        });
    }
    Ok(Dataset {
        env_spec: header.env_spec,
        t: header.t,
        obs_mode: header.obs_mode,
        windows,
        provenance: Provenance {
            demos_per_mode: header.demos_per_mode,
            seed: header.seed,
        },
    })
}
