//! The three pipeline commands: gen-data, train, eval. Every artifact is
//! a pure function of (config, seeds), so reruns are byte-identical.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use mimicd::env::{min_obstacle_distances, min_pairwise_distances, EnvSpec, JointState, Vec2};
use mimicd::execution::{
    batch_rollout, episode_from_demo, save_episode, Episode, ExecError, RolloutConfig,
};
use mimicd::expert::{
    expert_clearances, generate_corpus, generate_heldout, load_dataset, save_dataset,
    window_dataset, Dataset, Demonstration, ExpertError, Provenance,
};
use mimicd::metrics::{
    classify_mode, collision_table, emd_report, mode_histogram, success_rate, Classification,
    CollisionTable, MetricsError,
};
use mimicd::training::{checkpoint, restore, train, JointPolicySet, TrainError, TrainOutput};
use serde::Serialize;

use crate::config::{method_slug, parse_method, ConfigError, ExperimentConfig};

// --- errors with exit codes ------------------------------------------------------

#[derive(Debug)]
pub enum CliError {
    /// Bad configuration or inputs → exit code 1.
    Validation(String),
    /// Failures while running (NaN guard, IO, solver) → exit code 2.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Validation(e.0)
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::BadConfig(_)
            | TrainError::DatasetMismatch(_)
            | TrainError::Meta(_)
            | TrainError::UnsupportedVersion { .. }
            | TrainError::BindingMismatch { .. } => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<ExpertError> for CliError {
    fn from(e: ExpertError) -> Self {
        match e {
            ExpertError::Generation { .. } | ExpertError::Io(_) => {
                CliError::Runtime(e.to_string())
            }
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<ExecError> for CliError {
    fn from(e: ExecError) -> Self {
        match e {
            ExecError::BadConfig(_)
            | ExecError::Policy(_)
            | ExecError::UnsupportedVersion { .. } => CliError::Validation(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn io_err(what: &str, path: &Path, e: std::io::Error) -> CliError {
    CliError::Runtime(format!("{what} {}: {e}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err("cannot create", parent, e))?;
    }
    fs::write(path, text).map_err(|e| io_err("cannot write", path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let json = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Runtime(format!("serialize {}: {e}", path.display())))?;
    write_text(path, &format!("{json}\n"))
}

// --- gen-data ------------------------------------------------------------------------

#[derive(Serialize)]
struct CorpusSummary {
    env_kind: String,
    n_modes: usize,
    demos_per_mode: usize,
    n_demos: usize,
    seed: u64,
    t: usize,
    stride: usize,
    obs_dim: usize,
    total_windows: usize,
    action_std: f64,
    min_horizon: usize,
    max_horizon: usize,
    min_agent_clearance: f64,
    min_obstacle_clearance: Option<f64>,
    expert_agent_clearance: f64,
    expert_obstacle_clearance: Option<f64>,
}

fn demo_states(demo: &Demonstration, spec: &EnvSpec) -> Vec<JointState> {
    episode_from_demo(demo, spec, 0).states
}

pub fn gen_data(config: &ExperimentConfig) -> Result<(), CliError> {
    let spec = config.environment.build()?;
    let d = &config.dataset;
    let demos = generate_corpus(&spec, d.demos_per_mode, d.seed)?;

    let mut min_agent = f64::INFINITY;
    let mut min_obstacle = f64::INFINITY;
    let mut min_horizon = usize::MAX;
    let mut max_horizon = 0usize;
    for demo in &demos {
        let states = demo_states(demo, &spec);
        for (_, dist) in min_pairwise_distances(&states).map_err(ExecError::from)? {
            min_agent = min_agent.min(dist);
        }
        for dist in min_obstacle_distances(&states, &spec.obstacles).map_err(ExecError::from)? {
            min_obstacle = min_obstacle.min(dist);
        }
        min_horizon = min_horizon.min(demo.horizon);
        max_horizon = max_horizon.max(demo.horizon);
    }

    let provenance = Provenance {
        demos_per_mode: vec![d.demos_per_mode; spec.n_modes()],
        seed: d.seed,
    };
    let dataset = window_dataset(
        &demos,
        &spec,
        d.t,
        d.stride,
        mimicd::env::ObsMode::Full,
        provenance,
    )?;
    let path = config.dataset_path();
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err("cannot create", parent, e))?;
    }
    save_dataset(&dataset, &path)?;

    let (expert_agent, expert_obstacle) = expert_clearances(&spec);
    let summary = CorpusSummary {
        env_kind: config.environment.kind.clone(),
        n_modes: spec.n_modes(),
        demos_per_mode: d.demos_per_mode,
        n_demos: demos.len(),
        seed: d.seed,
        t: d.t,
        stride: d.stride,
        obs_dim: dataset.obs_dim(),
        total_windows: dataset.total_windows(),
        action_std: dataset.action_std(),
        min_horizon,
        max_horizon,
        min_agent_clearance: min_agent,
        min_obstacle_clearance: (!spec.obstacles.is_empty()).then_some(min_obstacle),
        expert_agent_clearance: expert_agent,
        expert_obstacle_clearance: (expert_obstacle > 0.0).then_some(expert_obstacle),
    };
    write_json(
        &config.out_dir.join("dataset").join("summary.json"),
        &summary,
    )?;
    println!(
        "gen-data: {} demos across {} modes, {} windows, min agent clearance {:.3}",
        summary.n_demos, summary.n_modes, summary.total_windows, summary.min_agent_clearance
    );
    Ok(())
}

// --- train ---------------------------------------------------------------------------

fn load_checked_dataset(config: &ExperimentConfig, spec: &EnvSpec) -> Result<Dataset, CliError> {
    let path = config.dataset_path();
    if !path.exists() {
        return Err(CliError::Validation(format!(
            "dataset {} not found — run gen-data first",
            path.display()
        )));
    }
    let dataset = load_dataset(&path)?;
    if dataset.env_spec.digest() != spec.digest() {
        return Err(CliError::Validation(format!(
            "dataset {} was generated for a different environment",
            path.display()
        )));
    }
    if dataset.t != config.dataset.t {
        return Err(CliError::Validation(format!(
            "dataset horizon T = {} does not match config dataset.t = {}",
            dataset.t, config.dataset.t
        )));
    }
    Ok(dataset)
}

pub fn train_cmd(config: &ExperimentConfig, method_flag: Option<&str>) -> Result<(), CliError> {
    let spec = config.environment.build()?;
    let dataset = load_checked_dataset(config, &spec)?;
    let method = parse_method(method_flag.unwrap_or(&config.training.method))?;
    let train_config = config.training.build(method, config.rollout.h);
    let ckpt_dir = config.checkpoint_dir(method, train_config.seed);
    let TrainOutput { set, log } = train(&dataset, &train_config, None, Some(&ckpt_dir))?;
    checkpoint(&set, &ckpt_dir.join("final"))?;
    let loss_csv = config.out_dir.join("metrics").join(format!(
        "loss_{}_seed_{}.csv",
        method_slug(method),
        train_config.seed
    ));
    write_text(&loss_csv, &log.to_csv(set.n_agents()))?;
    println!(
        "train: {} for {} steps, final total loss {:.6} (smoothed {:.6}), checkpoint {}",
        method_slug(method),
        set.meta.steps_done,
        log.rows.last().map_or(f64::NAN, |r| r.total),
        set.meta.smoothed_loss.unwrap_or(f64::NAN),
        ckpt_dir.join("final").display()
    );
    Ok(())
}

// --- eval ----------------------------------------------------------------------------

#[derive(Serialize)]
struct CollisionRow {
    threshold: f64,
    agent: usize,
    obstacle: usize,
    total: usize,
}

#[derive(Serialize)]
struct TerminationCounts {
    reached: usize,
    budget: usize,
    diverged: usize,
}

#[derive(Serialize)]
struct EvalReport {
    label: String,
    n_episodes: usize,
    success_rate: f64,
    agent_thresholds: Vec<f64>,
    obstacle_threshold: Option<f64>,
    collisions: Vec<CollisionRow>,
    emd_per_agent: Vec<f64>,
    emd_noise_floor: Vec<f64>,
    mode_counts: Vec<usize>,
    unclassified: usize,
    mean_executed_steps: f64,
    terminations: TerminationCounts,
}

fn collisions_csv(label: &str, table: &CollisionTable, with_obstacle: bool) -> String {
    if with_obstacle && table.thresholds.len() == 1 {
        let c = &table.counts[0];
        format!(
            "method,agent,obstacle,total\n{label},{},{},{}\n",
            c.agent_agent, c.agent_obstacle, c.total
        )
    } else if !with_obstacle {
        let header: Vec<String> = table.thresholds.iter().map(|t| format!("{t}")).collect();
        let counts: Vec<String> = table
            .counts
            .iter()
            .map(|c| format!("{}", c.agent_agent))
            .collect();
        format!(
            "method,{}\n{label},{}\n",
            header.join(","),
            counts.join(",")
        )
    } else {
        let mut out = String::from("method,threshold,agent,obstacle,total\n");
        for (t, c) in table.thresholds.iter().zip(&table.counts) {
            out.push_str(&format!(
                "{label},{t},{},{},{}\n",
                c.agent_agent, c.agent_obstacle, c.total
            ));
        }
        out
    }
}

fn emd_csv(label: &str, per_agent: &[f64], floor: &[f64]) -> String {
    let header: Vec<String> = (1..=per_agent.len())
        .map(|i| format!("agent_{i}"))
        .collect();
    let row: Vec<String> = per_agent.iter().map(|v| format!("{v}")).collect();
    let floor_row: Vec<String> = floor.iter().map(|v| format!("{v}")).collect();
    format!(
        "method,{}\n{label},{}\nexpert-split,{}\n",
        header.join(","),
        row.join(","),
        floor_row.join(",")
    )
}

fn modes_csv(label: &str, counts: &[usize], unclassified: usize) -> String {
    let header: Vec<String> = (0..counts.len()).map(|m| format!("mode_{m}")).collect();
    let row: Vec<String> = counts.iter().map(|c| format!("{c}")).collect();
    format!(
        "method,{},unclassified\n{label},{},{unclassified}\n",
        header.join(","),
        row.join(",")
    )
}

/// Per-agent path sets: out[agent][episode] = that agent's position path.
fn paths_per_agent(paths: &[Vec<Vec<Vec2>>]) -> Vec<Vec<Vec<Vec2>>> {
    let n_agents = paths.first().map_or(0, |p| p.len());
    (0..n_agents)
        .map(|a| paths.iter().map(|p| p[a].clone()).collect())
        .collect()
}

pub struct EvalArgs<'a> {
    pub method: Option<&'a str>,
    pub checkpoint: Option<PathBuf>,
    pub replay_expert: bool,
}

pub fn eval_cmd(config: &ExperimentConfig, args: &EvalArgs) -> Result<(), CliError> {
    let spec = config.environment.build()?;
    let n = config.rollout.n_episodes;
    let thresholds = config.evaluation.agent_thresholds(spec.kind);
    let obstacle_threshold = config.evaluation.obstacle_threshold(spec.kind);

    let heldout = generate_heldout(&spec, n, config.evaluation.heldout_seed)?;
    let expert_paths: Vec<Vec<Vec<Vec2>>> = heldout.iter().map(|d| d.paths()).collect();

    let (episodes, label, rollout_config) = if args.replay_expert {
        let rc = config.rollout.build(&spec, config.dataset.t);
        let episodes: Vec<Episode> = heldout
            .iter()
            .enumerate()
            .map(|(e, d)| episode_from_demo(d, &spec, config.rollout.seed + e as u64))
            .collect();
        (episodes, "expert-replay".to_string(), rc)
    } else {
        let method = parse_method(args.method.unwrap_or(&config.training.method))?;
        let ckpt_dir = args
            .checkpoint
            .clone()
            .unwrap_or_else(|| config.checkpoint_dir(method, config.training.seed).join("final"));
        if !ckpt_dir.join("meta.json").exists() {
            return Err(CliError::Validation(format!(
                "checkpoint {} not found — run train first",
                ckpt_dir.display()
            )));
        }
        let set: JointPolicySet = restore(&ckpt_dir)?;
        set.bind_check(&spec).map_err(CliError::from)?;
        let rc = config.rollout.build(&spec, set.t);
        let episodes = batch_rollout(&set, &spec, &rc, n, config.rollout.seed)?;
        (episodes, method_slug(method).to_string(), rc)
    };

    write_eval_artifacts(
        config,
        &spec,
        &label,
        &rollout_config,
        &episodes,
        &expert_paths,
        &thresholds,
        obstacle_threshold,
    )
}

#[allow(clippy::too_many_arguments)]
fn write_eval_artifacts(
    config: &ExperimentConfig,
    spec: &EnvSpec,
    label: &str,
    rollout_config: &RolloutConfig,
    episodes: &[Episode],
    expert_paths: &[Vec<Vec<Vec2>>],
    thresholds: &[f64],
    obstacle_threshold: Option<f64>,
) -> Result<(), CliError> {
    let n = episodes.len();
    let episode_dir = config.out_dir.join("episodes").join(label);
    fs::create_dir_all(&episode_dir).map_err(|e| io_err("cannot create", &episode_dir, e))?;
    for (e, episode) in episodes.iter().enumerate() {
        save_episode(
            episode,
            rollout_config,
            &episode_dir.join(format!("ep_{e:03}.jsonl")),
        )?;
    }

    let state_sets: Vec<Vec<JointState>> = episodes.iter().map(|e| e.states.clone()).collect();
    let table = collision_table(&state_sets, thresholds, obstacle_threshold, &spec.obstacles)?;

    let episode_paths: Vec<Vec<Vec<Vec2>>> = episodes.iter().map(|e| e.paths()).collect();
    let classifications: Vec<Classification> = episode_paths
        .iter()
        .map(|p| classify_mode(p, spec))
        .collect::<Result<_, _>>()?;
    let histogram = mode_histogram(&classifications, spec);

    let outcomes: Vec<(bool, bool)> = episodes
        .iter()
        .map(|ep| -> Result<(bool, bool), CliError> {
            let report = mimicd::env::collision_report(
                &ep.states,
                thresholds[0],
                obstacle_threshold.unwrap_or(0.0),
                &spec.obstacles,
            )
            .map_err(ExecError::from)?;
            Ok((
                ep.success(),
                report.agent_collision || report.obstacle_collision,
            ))
        })
        .collect::<Result<_, _>>()?;
    let success = success_rate(&outcomes);

    let emd = emd_report(&paths_per_agent(&episode_paths), &paths_per_agent(expert_paths))?;
    let heldout_b = generate_heldout(spec, n, config.evaluation.heldout_seed + 1)?;
    let expert_paths_b: Vec<Vec<Vec<Vec2>>> = heldout_b.iter().map(|d| d.paths()).collect();
    let floor = emd_report(&paths_per_agent(expert_paths), &paths_per_agent(&expert_paths_b))?;

    let metrics_dir = config.out_dir.join("metrics");
    write_text(
        &metrics_dir.join(format!("collisions_{label}.csv")),
        &collisions_csv(label, &table, obstacle_threshold.is_some()),
    )?;
    write_text(
        &metrics_dir.join(format!("emd_{label}.csv")),
        &emd_csv(label, &emd.per_agent, &floor.per_agent),
    )?;
    write_text(
        &metrics_dir.join(format!("modes_{label}.csv")),
        &modes_csv(label, &histogram.counts, histogram.unclassified),
    )?;

    let report = EvalReport {
        label: label.to_string(),
        n_episodes: n,
        success_rate: success,
        agent_thresholds: thresholds.to_vec(),
        obstacle_threshold,
        collisions: table
            .thresholds
            .iter()
            .zip(&table.counts)
            .map(|(t, c)| CollisionRow {
                threshold: *t,
                agent: c.agent_agent,
                obstacle: c.agent_obstacle,
                total: c.total,
            })
            .collect(),
        emd_per_agent: emd.per_agent.clone(),
        emd_noise_floor: floor.per_agent.clone(),
        mode_counts: histogram.counts.clone(),
        unclassified: histogram.unclassified,
        mean_executed_steps: episodes.iter().map(|e| e.executed_steps() as f64).sum::<f64>()
            / n as f64,
        terminations: TerminationCounts {
            reached: episodes.iter().filter(|e| e.success()).count(),
            budget: episodes
                .iter()
                .filter(|e| e.termination == mimicd::execution::Termination::StepBudget)
                .count(),
            diverged: episodes
                .iter()
                .filter(|e| e.termination == mimicd::execution::Termination::Diverged)
                .count(),
        },
    };
    write_json(
        &config.out_dir.join("report").join(format!("report_{label}.json")),
        &report,
    )?;

    let svg_episodes: Vec<(Vec<Vec<Vec2>>, Option<usize>)> = episode_paths
        .iter()
        .zip(&classifications)
        .map(|(p, c)| (p.clone(), c.mode_label()))
        .collect();
    write_text(
        &config.out_dir.join("report").join(format!("overlay_{label}.svg")),
        &crate::svg::overlay_svg(spec, expert_paths, &svg_episodes),
    )?;

    println!(
        "eval {label}: success {success:.2}, collisions@{} agent {} obstacle {} total {}, \
         EMD {:?}, modes {:?} (+{} unclassified)",
        thresholds[0],
        table.counts[0].agent_agent,
        table.counts[0].agent_obstacle,
        table.counts[0].total,
        emd.per_agent,
        histogram.counts,
        histogram.unclassified
    );
    Ok(())
}
