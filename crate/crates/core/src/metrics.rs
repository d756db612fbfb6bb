//! Evaluation metrics: discrete Fréchet distance, exact Earth Mover's
//! Distance between trajectory sets, collision tables, and coordination-mode
//! classification.
//!
//! Trajectories are compared as position sequences (spatial paths), not
//! action sequences. The EMD uses an exact assignment solve rather than an
//! entropic approximation so downstream comparisons carry no solver
//! tolerance.

use rayon::prelude::*;
use thiserror::Error;

use crate::env::{collision_report, EnvKind, EnvSpec, JointState, Obstacle, Vec2};
use crate::expert::ModeId;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty point sequence")]
    EmptySequence,
    #[error("trajectory sets have different sizes ({a} vs {b})")]
    SizeMismatch { a: usize, b: usize },
    #[error("no episodes given")]
    NoEpisodes,
    #[error("expected {want} agent paths, got {got}")]
    AgentCount { got: usize, want: usize },
    #[error(transparent)]
    Env(#[from] crate::env::EnvError),
}

// --- discrete Fréchet distance ------------------------------------------

/// Classic dynamic program: d(i,j) = max(‖P_i − Q_j‖, min of the three
/// predecessor cells). O(|P|·|Q|) time, O(|Q|) memory.
pub fn discrete_frechet(p: &[Vec2], q: &[Vec2]) -> Result<f64, MetricsError> {
    if p.is_empty() || q.is_empty() {
        return Err(MetricsError::EmptySequence);
    }
    let mut prev = vec![0.0f64; q.len()];
    let mut cur = vec![0.0f64; q.len()];
    for (i, &pi) in p.iter().enumerate() {
        for (j, &qj) in q.iter().enumerate() {
            let d = pi.dist(qj);
            let reach = if i == 0 && j == 0 {
                d
            } else if i == 0 {
                cur[j - 1].max(d)
            } else if j == 0 {
                prev[0].max(d)
            } else {
                prev[j].min(prev[j - 1]).min(cur[j - 1]).max(d)
            };
            cur[j] = reach;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[q.len() - 1])
}

// --- exact EMD over trajectory sets --------------------------------------

/// EMD between two equal-sized trajectory sets under the discrete Fréchet
/// metric with uniform weights: (1/n) × the minimum-cost perfect matching
/// on the n×n cost matrix.
pub fn emd_uniform(a: &[Vec<Vec2>], b: &[Vec<Vec2>]) -> Result<f64, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::SizeMismatch {
            a: a.len(),
            b: b.len(),
        });
    }
    if a.is_empty() {
        return Err(MetricsError::EmptySequence);
    }
    let n = a.len();
    let rows: Vec<Vec<f64>> = a
        .par_iter()
        .map(|ta| {
            b.iter()
                .map(|tb| discrete_frechet(ta, tb))
                .collect::<Result<Vec<f64>, _>>()
        })
        .collect::<Result<_, _>>()?;
    let (_, total) = assignment_min_cost(&rows);
    Ok(total / n as f64)
}

/// Exact minimum-cost assignment on a square matrix (Hungarian algorithm
/// with row/column potentials, O(n³)). Returns (row assigned to each
/// column, total cost).
pub fn assignment_min_cost(cost: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let n = cost.len();
    assert!(n > 0 && cost.iter().all(|r| r.len() == n), "square matrix");
    // 1-based arrays; p[j] is the row matched to column j, p[0] is scratch.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let assigned: Vec<usize> = (1..=n).map(|j| p[j] - 1).collect();
    let total = assigned
        .iter()
        .enumerate()
        .map(|(j, &i)| cost[i][j])
        .sum();
    (assigned, total)
}

/// Per-agent EMD between evaluation rollouts and a held-out expert set,
/// plus bookkeeping for the report.
#[derive(Debug, Clone)]
pub struct EmdReport {
    pub per_agent: Vec<f64>,
    pub set_size: usize,
    pub metric: &'static str,
}

/// `eval[i]` and `expert[i]` are agent i's path sets (equal sizes).
pub fn emd_report(
    eval: &[Vec<Vec<Vec2>>],
    expert: &[Vec<Vec<Vec2>>],
) -> Result<EmdReport, MetricsError> {
    if eval.len() != expert.len() {
        return Err(MetricsError::AgentCount {
            got: eval.len(),
            want: expert.len(),
        });
    }
    let per_agent = eval
        .iter()
        .zip(expert)
        .map(|(a, b)| emd_uniform(a, b))
        .collect::<Result<Vec<_>, _>>()?;
    let set_size = eval.first().map_or(0, |s| s.len());
    Ok(EmdReport {
        per_agent,
        set_size,
        metric: "discrete Fréchet",
    })
}

// --- collision tables -----------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CollisionCounts {
    pub agent_agent: usize,
    pub agent_obstacle: usize,
    /// Episodes with at least one collision of either kind.
    pub total: usize,
}

/// Collision counts per agent-agent threshold over a fixed episode set.
#[derive(Debug, Clone)]
pub struct CollisionTable {
    pub thresholds: Vec<f64>,
    pub counts: Vec<CollisionCounts>,
    pub n_episodes: usize,
}

/// Counts episodes whose state sequences fire the strict-inequality
/// collision predicate at each agent threshold. `obstacle_threshold` is
/// applied uniformly across rows (None for obstacle-free environments).
pub fn collision_table(
    episodes: &[Vec<JointState>],
    agent_thresholds: &[f64],
    obstacle_threshold: Option<f64>,
    obstacles: &[Obstacle],
) -> Result<CollisionTable, MetricsError> {
    if episodes.is_empty() {
        return Err(MetricsError::NoEpisodes);
    }
    let obs_thr = obstacle_threshold.unwrap_or(0.0);
    let mut counts = Vec::with_capacity(agent_thresholds.len());
    for &thr in agent_thresholds {
        let mut c = CollisionCounts {
            agent_agent: 0,
            agent_obstacle: 0,
            total: 0,
        };
        for ep in episodes {
            let r = collision_report(ep, thr, obs_thr, obstacles)?;
            c.agent_agent += r.agent_collision as usize;
            c.agent_obstacle += r.obstacle_collision as usize;
            c.total += r.any() as usize;
        }
        counts.push(c);
    }
    Ok(CollisionTable {
        thresholds: agent_thresholds.to_vec(),
        counts,
        n_episodes: episodes.len(),
    })
}

// --- mode classification ---------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Classification {
    Mode(ModeId),
    Unclassified,
}

impl Classification {
    pub fn mode_label(&self) -> Option<usize> {
        match self {
            Classification::Mode(m) => Some(m.label),
            Classification::Unclassified => None,
        }
    }
}

/// Counts of classified modes plus the unclassified remainder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModeHistogram {
    pub counts: Vec<usize>,
    pub unclassified: usize,
}

impl ModeHistogram {
    pub fn new(n_modes: usize) -> Self {
        Self {
            counts: vec![0; n_modes],
            unclassified: 0,
        }
    }

    pub fn add(&mut self, c: Classification) {
        match c {
            Classification::Mode(m) => self.counts[m.label] += 1,
            Classification::Unclassified => self.unclassified += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum::<usize>() + self.unclassified
    }

    pub fn distinct_modes(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }
}

pub fn mode_histogram(classifications: &[Classification], spec: &EnvSpec) -> ModeHistogram {
    let mut h = ModeHistogram::new(spec.n_modes());
    for &c in classifications {
        h.add(c);
    }
    h
}

/// Assigns one agent-position-path-per-agent episode to a coordination
/// mode.
///
/// Swap: each agent's pass side comes from the sign of its swept angle
/// around the obstacle center. Opposite sides give the two trivial modes;
/// same side gives a yield mode, with the yielder being the agent whose
/// normalized progress-to-goal is lower at the time of minimum inter-agent
/// distance. Paths entering the obstacle, or sweeping less than π/2, are
/// Unclassified.
///
/// RoadCrossing: the label is which corridor agent yields, read off from
/// whether the crossing agent (index 2) passes in front of or behind
/// corridor agent 0 at the moment it crosses agent 0's lane.
pub fn classify_mode(paths: &[Vec<Vec2>], spec: &EnvSpec) -> Result<Classification, MetricsError> {
    if paths.len() != spec.n_agents {
        return Err(MetricsError::AgentCount {
            got: paths.len(),
            want: spec.n_agents,
        });
    }
    if paths.iter().any(|p| p.len() < 2) {
        return Err(MetricsError::EmptySequence);
    }
    match spec.kind {
        EnvKind::Swap => classify_swap(paths, spec),
        EnvKind::RoadCrossing => Ok(classify_road(paths)),
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Side {
    North,
    South,
}

fn classify_swap(paths: &[Vec<Vec2>], spec: &EnvSpec) -> Result<Classification, MetricsError> {
    let obstacle = spec.obstacles[0];
    for path in paths {
        if path.iter().any(|p| p.dist(obstacle.center) < obstacle.radius) {
            return Ok(Classification::Unclassified);
        }
    }
    let mut sides = Vec::with_capacity(2);
    for path in paths {
        match pass_side(path, obstacle.center) {
            Some(s) => sides.push(s),
            None => return Ok(Classification::Unclassified),
        }
    }
    let label = match (sides[0], sides[1]) {
        // Trivial modes: agents on opposite sides never conflict. "Both
        // pass right" (obstacle on each agent's left) puts the east-bound
        // agent 0 south and the west-bound agent 1 north.
        (Side::South, Side::North) => 0,
        (Side::North, Side::South) => 1,
        (Side::North, Side::North) | (Side::South, Side::South) => {
            let t = argmin_pair_distance(&paths[0], &paths[1]);
            let yielder = if progress_to_goal(&paths[0], t, spec.nominal_goals[0])
                <= progress_to_goal(&paths[1], t, spec.nominal_goals[1])
            {
                0
            } else {
                1
            };
            match (sides[0], yielder) {
                (Side::North, 0) => 2,
                (Side::North, _) => 3,
                (Side::South, 0) => 4,
                (Side::South, _) => 5,
            }
        }
    };
    Ok(Classification::Mode(ModeId {
        env_kind: EnvKind::Swap,
        label,
    }))
}

/// Which side of `center` a path passes on, from the total swept angle of
/// the center-to-agent bearing: the bearing halfway through the sweep
/// points at the side of closest approach. None if the path sweeps less
/// than π/2 (it never went around).
fn pass_side(path: &[Vec2], center: Vec2) -> Option<Side> {
    let bearing = |p: Vec2| (p.y - center.y).atan2(p.x - center.x);
    let mut swept = 0.0;
    for w in path.windows(2) {
        swept += wrap_angle(bearing(w[1]) - bearing(w[0]));
    }
    if swept.abs() < std::f64::consts::FRAC_PI_2 {
        return None;
    }
    let mid = bearing(path[0]) + swept / 2.0;
    if mid.sin() > 0.0 {
        Some(Side::North)
    } else {
        Some(Side::South)
    }
}

fn wrap_angle(d: f64) -> f64 {
    d - std::f64::consts::TAU * (d / std::f64::consts::TAU).round()
}

fn argmin_pair_distance(a: &[Vec2], b: &[Vec2]) -> usize {
    let n = a.len().min(b.len());
    (0..n)
        .min_by(|&s, &t| a[s].dist(b[s]).total_cmp(&a[t].dist(b[t])))
        .unwrap_or(0)
}

/// Fraction of the start-to-goal distance already covered at time `t`.
fn progress_to_goal(path: &[Vec2], t: usize, goal: Vec2) -> f64 {
    let total = path[0].dist(goal);
    if total == 0.0 {
        return 1.0;
    }
    let t = t.min(path.len() - 1);
    1.0 - path[t].dist(goal) / total
}

fn classify_road(paths: &[Vec<Vec2>]) -> Classification {
    let (corridor0, crossing) = (&paths[0], &paths[2]);
    let n = corridor0.len().min(crossing.len());
    // Moment the crossing agent is level with corridor agent 0's lane.
    let t = (0..n)
        .min_by(|&s, &u| {
            (crossing[s].y - corridor0[s].y)
                .abs()
                .total_cmp(&(crossing[u].y - corridor0[u].y).abs())
        })
        .unwrap_or(0);
    if (crossing[t].y - corridor0[t].y).abs() > 1.0 {
        // The crossing agent never actually crossed the lane (e.g. froze).
        return Classification::Unclassified;
    }
    // Agent 0 travels in the −x direction, so "in front" means smaller x.
    // Crossing in front ⇒ agent 0 yielded (label 0); behind ⇒ agent 1's
    // turn to yield comes later (label 1).
    let label = if crossing[t].x < corridor0[t].x { 0 } else { 1 };
    Classification::Mode(ModeId {
        env_kind: EnvKind::RoadCrossing,
        label,
    })
}

// --- success ---------------------------------------------------------------

/// Fraction of episodes that both reached all goals and stayed
/// collision-free at the evaluation thresholds.
pub fn success_rate(outcomes: &[(bool, bool)]) -> f64 {
    if outcomes.is_empty() {
        return 0.0;
    }
    let ok = outcomes
        .iter()
        .filter(|(reached, collided)| *reached && !collided)
        .count();
    ok as f64 / outcomes.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{min_pairwise_distances, AgentState};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pts(v: &[(f64, f64)]) -> Vec<Vec2> {
        v.iter().map(|&(x, y)| Vec2::new(x, y)).collect()
    }

    /// Exhaustive recursion over all monotone couplings — the textbook
    /// definition, exponential and only usable for tiny inputs.
    fn frechet_brute(p: &[Vec2], q: &[Vec2]) -> f64 {
        fn go(p: &[Vec2], q: &[Vec2], i: usize, j: usize) -> f64 {
            let d = p[i].dist(q[j]);
            if i == 0 && j == 0 {
                return d;
            }
            let mut best = f64::INFINITY;
            if i > 0 {
                best = best.min(go(p, q, i - 1, j));
            }
            if j > 0 {
                best = best.min(go(p, q, i, j - 1));
            }
            if i > 0 && j > 0 {
                best = best.min(go(p, q, i - 1, j - 1));
            }
            best.max(d)
        }
        go(p, q, p.len() - 1, q.len() - 1)
    }

    #[test]
    fn frechet_identity_and_offset() {
        let p = pts(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.5)]);
        assert_eq!(discrete_frechet(&p, &p).unwrap(), 0.0);
        let a = pts(&[(0.0, 0.0), (1.0, 0.0)]);
        let b = pts(&[(0.0, 1.0), (1.0, 1.0)]);
        assert_eq!(discrete_frechet(&a, &b).unwrap(), 1.0);
        assert!(discrete_frechet(&a, &[]).is_err());
    }

    #[test]
    fn frechet_matches_brute_force_couplings() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..300 {
            let np = rng.random_range(1..=5);
            let nq = rng.random_range(1..=5);
            let p: Vec<Vec2> = (0..np)
                .map(|_| Vec2::new(rng.random::<f64>() * 4.0, rng.random::<f64>() * 4.0))
                .collect();
            let q: Vec<Vec2> = (0..nq)
                .map(|_| Vec2::new(rng.random::<f64>() * 4.0, rng.random::<f64>() * 4.0))
                .collect();
            let fast = discrete_frechet(&p, &q).unwrap();
            let brute = frechet_brute(&p, &q);
            assert!((fast - brute).abs() < 1e-12, "{fast} vs {brute}");
        }
    }

    #[test]
    fn frechet_is_a_pseudometric_on_random_triples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut random_path = |n: usize| -> Vec<Vec2> {
            (0..n)
                .map(|_| Vec2::new(rng.random::<f64>() * 3.0, rng.random::<f64>() * 3.0))
                .collect()
        };
        for _ in 0..100 {
            let (a, b, c) = (random_path(4), random_path(3), random_path(5));
            let ab = discrete_frechet(&a, &b).unwrap();
            let ba = discrete_frechet(&b, &a).unwrap();
            let bc = discrete_frechet(&b, &c).unwrap();
            let ac = discrete_frechet(&a, &c).unwrap();
            assert_eq!(ab, ba);
            assert!(ab >= 0.0);
            assert!(ac <= ab + bc + 1e-12, "triangle violated");
        }
    }

    fn emd_brute(a: &[Vec<Vec2>], b: &[Vec<Vec2>]) -> f64 {
        let n = a.len();
        let cost: Vec<Vec<f64>> = a
            .iter()
            .map(|ta| {
                b.iter()
                    .map(|tb| discrete_frechet(ta, tb).unwrap())
                    .collect()
            })
            .collect();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut best = f64::INFINITY;
        permute(&mut perm, 0, &mut |p| {
            let c: f64 = p.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
            if c < best {
                best = c;
            }
        });
        best / n as f64
    }

    fn permute(v: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
        if k == v.len() {
            visit(v);
            return;
        }
        for i in k..v.len() {
            v.swap(k, i);
            permute(v, k + 1, visit);
            v.swap(k, i);
        }
    }

    fn random_set(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<Vec2>> {
        (0..n)
            .map(|_| {
                let len = rng.random_range(2..=6);
                (0..len)
                    .map(|_| Vec2::new(rng.random::<f64>() * 5.0, rng.random::<f64>() * 5.0))
                    .collect()
            })
            .collect()
    }

    #[test]
    fn emd_matches_permutation_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..40 {
            let n = rng.random_range(1..=6);
            let a = random_set(&mut rng, n);
            let b = random_set(&mut rng, n);
            let fast = emd_uniform(&a, &b).unwrap();
            let brute = emd_brute(&a, &b);
            assert!(
                (fast - brute).abs() < 1e-9,
                "trial {trial}: {fast} vs {brute}"
            );
        }
    }

    #[test]
    fn emd_identity_symmetry_and_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = random_set(&mut rng, 5);
        let mut shuffled = a.clone();
        shuffled.rotate_left(2);
        assert!(emd_uniform(&a, &shuffled).unwrap() < 1e-15);

        let b = random_set(&mut rng, 5);
        let ab = emd_uniform(&a, &b).unwrap();
        let ba = emd_uniform(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-12);

        // Row-minima mean is a lower bound on any perfect matching.
        let greedy: f64 = a
            .iter()
            .map(|ta| {
                b.iter()
                    .map(|tb| discrete_frechet(ta, tb).unwrap())
                    .fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            / a.len() as f64;
        assert!(ab + 1e-12 >= greedy);

        let singleton_a = vec![a[0].clone()];
        let singleton_b = vec![b[0].clone()];
        let single = emd_uniform(&singleton_a, &singleton_b).unwrap();
        assert_eq!(single, discrete_frechet(&a[0], &b[0]).unwrap());

        assert!(matches!(
            emd_uniform(&a, &singleton_b),
            Err(MetricsError::SizeMismatch { a: 5, b: 1 })
        ));
    }

    /// Two agents approaching to a chosen minimum distance, then receding.
    fn episode_with_min_distance(d: f64) -> Vec<JointState> {
        (0..9)
            .map(|t| {
                let gap = d + ((t as f64) - 4.0).abs();
                JointState {
                    agents: vec![
                        AgentState {
                            position: Vec2::new(0.0, 0.0),
                            goal: Vec2::ZERO,
                        },
                        AgentState {
                            position: Vec2::new(gap, 0.0),
                            goal: Vec2::ZERO,
                        },
                    ],
                    time_index: t,
                }
            })
            .collect()
    }

    #[test]
    fn collision_table_counts_match_fixture_distances() {
        let thresholds = [0.75, 0.675, 0.5625, 0.375];
        // Strict predicate on min distances {0.7, 0.5, 0.3}: 0.75 catches
        // all three, 0.675 and 0.5625 catch {0.5, 0.3}, 0.375 only 0.3.
        let eps = [
            episode_with_min_distance(0.7),
            episode_with_min_distance(0.5),
            episode_with_min_distance(0.3),
        ];
        // First confirm the fixture really has those minima.
        for (ep, want) in eps.iter().zip([0.7, 0.5, 0.3]) {
            let pairs = min_pairwise_distances(ep).unwrap();
            assert!((pairs[0].1 - want).abs() < 1e-12);
        }
        let table = collision_table(&eps, &thresholds, None, &[]).unwrap();
        let agent_counts: Vec<usize> = table.counts.iter().map(|c| c.agent_agent).collect();
        assert_eq!(agent_counts, vec![3, 2, 2, 1]);
        assert_eq!(table.n_episodes, 3);

        // With minima {0.7, 0.6, 0.3} the strict predicate gives
        // (3, 2, 1, 1): 0.6 is not below 0.5625.
        let eps2 = [
            episode_with_min_distance(0.7),
            episode_with_min_distance(0.6),
            episode_with_min_distance(0.3),
        ];
        let table2 = collision_table(&eps2, &thresholds, None, &[]).unwrap();
        let counts2: Vec<usize> = table2.counts.iter().map(|c| c.agent_agent).collect();
        assert_eq!(counts2, vec![3, 2, 1, 1]);
    }

    #[test]
    fn collision_counts_shrink_with_threshold() {
        let eps = [
            episode_with_min_distance(0.7),
            episode_with_min_distance(0.4),
            episode_with_min_distance(0.65),
            episode_with_min_distance(0.2),
        ];
        let table = collision_table(&eps, &[0.75, 0.675, 0.5625, 0.375], None, &[]).unwrap();
        for w in table.counts.windows(2) {
            assert!(w[1].agent_agent <= w[0].agent_agent);
            assert!(w[1].total <= w[0].total);
        }
        // Far-apart episodes count nothing anywhere.
        let far = [episode_with_min_distance(10.0)];
        let t = collision_table(&far, &[0.75, 0.675, 0.5625, 0.375], None, &[]).unwrap();
        assert!(t.counts.iter().all(|c| c.total == 0));
    }

    /// Semicircular swap path from (−10,0) to (10,0) passing north or
    /// south of the origin at radius 6.
    fn arc_path(from_east: bool, north: bool, n: usize) -> Vec<Vec2> {
        (0..=n)
            .map(|i| {
                let f = i as f64 / n as f64;
                let theta = if from_east {
                    // start angle 0 → ±π
                    if north {
                        f * std::f64::consts::PI
                    } else {
                        -f * std::f64::consts::PI
                    }
                } else {
                    // start angle π → 0 through π/2 (north) or 3π/2 (south)
                    if north {
                        std::f64::consts::PI * (1.0 - f)
                    } else {
                        std::f64::consts::PI * (1.0 + f)
                    }
                };
                Vec2::new(6.0 * theta.cos(), 6.0 * theta.sin())
            })
            .collect()
    }

    #[test]
    fn swap_trivial_modes_classify_by_side() {
        let spec = EnvSpec::swap();
        // Agent 0 (west start) south + agent 1 (east start) north = mode 0.
        let paths = vec![arc_path(false, false, 60), arc_path(true, true, 60)];
        let c = classify_mode(&paths, &spec).unwrap();
        assert_eq!(c.mode_label(), Some(0));

        let paths = vec![arc_path(false, true, 60), arc_path(true, false, 60)];
        let c = classify_mode(&paths, &spec).unwrap();
        assert_eq!(c.mode_label(), Some(1));
    }

    #[test]
    fn swap_yield_modes_pick_the_lagging_agent() {
        let spec = EnvSpec::swap();
        // Both north; agent 1 loiters near its start for the first half,
        // then follows the same arc — at closest approach agent 1 has made
        // less progress, so agent 1 is the yielder: mode 3.
        let mover = arc_path(false, true, 120);
        let mut yielder = vec![Vec2::new(10.0, 0.0); 60];
        yielder.extend(arc_path(true, true, 60));
        let c = classify_mode(&[mover.clone(), yielder.clone()], &spec).unwrap();
        assert_eq!(c.mode_label(), Some(3));

        // Swapping roles gives mode 2 (agent 0 yields).
        let mut y0 = vec![Vec2::new(-10.0, 0.0); 60];
        y0.extend(arc_path(false, true, 60));
        let m1 = arc_path(true, true, 120);
        let c = classify_mode(&[y0, m1], &spec).unwrap();
        assert_eq!(c.mode_label(), Some(2));
    }

    #[test]
    fn mirroring_an_episode_mirrors_the_mode() {
        let spec = EnvSpec::swap();
        let mirror = |paths: &[Vec<Vec2>]| -> Vec<Vec<Vec2>> {
            paths
                .iter()
                .map(|p| p.iter().map(|v| Vec2::new(v.x, -v.y)).collect())
                .collect()
        };

        // Mode 0 (a0 south, a1 north); mode 2 (both north, a0 yields);
        // mode 3 (both north, a1 yields).
        let mode0 = vec![arc_path(false, false, 60), arc_path(true, true, 60)];

        let mut lag0 = vec![Vec2::new(-10.0, 0.0); 60];
        lag0.extend(arc_path(false, true, 60));
        let mode2 = vec![lag0, arc_path(true, true, 120)];

        let mut lag1 = vec![Vec2::new(10.0, 0.0); 60];
        lag1.extend(arc_path(true, true, 60));
        let mode3 = vec![arc_path(false, true, 120), lag1];

        // Reflection about the x-axis swaps north/south: 0↔1, 2↔4, 3↔5.
        for (fix, label, mirrored_label) in [(&mode0, 0, 1), (&mode2, 2, 4), (&mode3, 3, 5)] {
            let c = classify_mode(fix, &spec).unwrap();
            assert_eq!(c.mode_label(), Some(label));
            let cm = classify_mode(&mirror(fix), &spec).unwrap();
            assert_eq!(cm.mode_label(), Some(mirrored_label));
        }
    }

    #[test]
    fn path_through_obstacle_is_unclassified() {
        let spec = EnvSpec::swap();
        // Straight through the middle — the mode-averaged BC failure shape.
        let through: Vec<Vec2> = (0..=100)
            .map(|i| Vec2::new(-10.0 + 0.2 * i as f64, 0.0))
            .collect();
        let other = arc_path(true, true, 100);
        let c = classify_mode(&[through, other], &spec).unwrap();
        assert_eq!(c, Classification::Unclassified);
    }

    fn road_paths(crossing_first: bool) -> Vec<Vec<Vec2>> {
        let n = 100;
        // Corridor agent 0: east to west at y=-0.9. Crossing agent 2:
        // south to north at x=0, early or late.
        let a0: Vec<Vec2> = (0..=n)
            .map(|i| Vec2::new(10.0 - 0.2 * i as f64, -0.9))
            .collect();
        let a1: Vec<Vec2> = (0..=n)
            .map(|i| Vec2::new(-10.0 + 0.2 * i as f64, 0.9))
            .collect();
        let a2: Vec<Vec2> = (0..=n)
            .map(|i| {
                let f = i as f64 / n as f64;
                let y = if crossing_first {
                    // Crosses y=-0.9 around i=20, while agent 0 is still east.
                    -6.0 + 12.0 * (f * 2.0).min(1.0)
                } else {
                    // Holds south until i=60, crossing after agent 0 passed.
                    if i < 60 {
                        -6.0
                    } else {
                        -6.0 + 12.0 * ((i - 60) as f64 / 40.0)
                    }
                };
                Vec2::new(0.0, y)
            })
            .collect();
        vec![a0, a1, a2]
    }

    #[test]
    fn road_modes_split_on_crossing_order() {
        let spec = EnvSpec::road_crossing();
        let c = classify_mode(&road_paths(true), &spec).unwrap();
        assert_eq!(c.mode_label(), Some(0), "early crosser passes in front");
        let c = classify_mode(&road_paths(false), &spec).unwrap();
        assert_eq!(c.mode_label(), Some(1), "late crosser passes behind");
    }

    #[test]
    fn frozen_crosser_is_unclassified() {
        let spec = EnvSpec::road_crossing();
        let mut paths = road_paths(true);
        paths[2] = vec![Vec2::new(0.0, -6.0); paths[0].len()];
        let c = classify_mode(&paths, &spec).unwrap();
        assert_eq!(c, Classification::Unclassified);
    }

    #[test]
    fn histogram_totals_and_success_rates() {
        let spec = EnvSpec::swap();
        let cls = [
            Classification::Mode(ModeId {
                env_kind: EnvKind::Swap,
                label: 0,
            }),
            Classification::Mode(ModeId {
                env_kind: EnvKind::Swap,
                label: 0,
            }),
            Classification::Mode(ModeId {
                env_kind: EnvKind::Swap,
                label: 3,
            }),
            Classification::Unclassified,
        ];
        let h = mode_histogram(&cls, &spec);
        assert_eq!(h.total(), 4);
        assert_eq!(h.counts[0], 2);
        assert_eq!(h.distinct_modes(), 2);
        assert_eq!(h.unclassified, 1);

        assert_eq!(success_rate(&[(true, false); 5]), 1.0);
        assert_eq!(success_rate(&[(false, false); 4]), 0.0);
        let mixed = [
            (true, false),
            (true, false),
            (true, false),
            (true, true),
            (false, false),
        ];
        assert_eq!(success_rate(&mixed), 0.6);
    }

    #[test]
    fn assignment_handles_known_matrices() {
        // Diagonal is optimal.
        let cost = vec![
            vec![1.0, 10.0, 10.0],
            vec![10.0, 2.0, 10.0],
            vec![10.0, 10.0, 3.0],
        ];
        let (asg, total) = assignment_min_cost(&cost);
        assert_eq!(asg, vec![0, 1, 2]);
        assert_eq!(total, 6.0);

        // Anti-diagonal is optimal.
        let cost = vec![vec![9.0, 1.0], vec![1.0, 9.0]];
        let (asg, total) = assignment_min_cost(&cost);
        assert_eq!(asg, vec![1, 0]);
        assert_eq!(total, 2.0);
    }
}
