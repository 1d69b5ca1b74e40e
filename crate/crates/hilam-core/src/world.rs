//! Synthetic 2-D scripted-skill world.
//!
//! Episodes are generated by running per-skill scripted controllers on a
//! point mass in the unit square. Each episode carries its ground-truth
//! skill segmentation, which later serves as the evaluation oracle for the
//! unsupervised chunker. The world also executes policy rollouts, scoring
//! success as ordered waypoint visitation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{Rng, Stream};

/// Proportional gain of the scripted waypoint controller.
const PROP_GAIN: f64 = 0.5;
/// Episode start positions are drawn from this sub-square.
const START_RANGE: (f64, f64) = (0.1, 0.9);
/// Waypoints and skill geometry live inside this sub-square.
const WAYPOINT_RANGE: (f64, f64) = (0.15, 0.85);
/// Consecutive move_to waypoints must be at least this far apart.
const MIN_WAYPOINT_SEP: f64 = 0.2;
/// A waypoint counts as visited within this radius.
pub const SUCCESS_RADIUS: f64 = 0.05;
/// The oracle advances to the next waypoint slightly inside the radius.
const ORACLE_RADIUS: f64 = 0.045;

/// State dimension exposed to policies (position + velocity).
pub const STATE_DIM: usize = 4;
/// Action dimension (commanded velocity).
pub const ACTION_DIM: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub position: [f64; 2],
    pub velocity: [f64; 2],
}

impl WorldState {
    pub fn at(position: [f64; 2]) -> Self {
        WorldState { position, velocity: [0.0, 0.0] }
    }

    pub fn observation(&self) -> [f64; STATE_DIM] {
        [self.position[0], self.position[1], self.velocity[0], self.velocity[1]]
    }

    pub fn from_observation(obs: &[f64]) -> Self {
        WorldState { position: [obs[0], obs[1]], velocity: [obs[2], obs[3]] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub task_library_size: usize,
    pub train_episodes: usize,
    pub val_episodes: usize,
    pub test_episodes: usize,
    /// Std-dev of per-step position noise.
    pub noise_sigma: f64,
    /// Per-component speed cap.
    pub v_max: f64,
    pub min_skills: usize,
    pub max_skills: usize,
    pub min_duration: usize,
    pub max_duration: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            task_library_size: 40,
            train_episodes: 2000,
            val_episodes: 200,
            test_episodes: 200,
            noise_sigma: 0.002,
            v_max: 0.05,
            min_skills: 2,
            max_skills: 5,
            min_duration: 8,
            max_duration: 24,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.task_library_size == 0 {
            return Err(Error::Config("task_library_size must be positive".into()));
        }
        if self.train_episodes == 0 || self.val_episodes == 0 || self.test_episodes == 0 {
            return Err(Error::Config("episode counts must be positive".into()));
        }
        if self.min_skills < 2 || self.max_skills < self.min_skills {
            return Err(Error::Config("need 2..=max skills per task".into()));
        }
        if self.min_duration < 8 || self.max_duration < self.min_duration {
            return Err(Error::Config("skill durations must satisfy 8 <= min <= max".into()));
        }
        Ok(())
    }
}

/// One scripted skill. Durations are fixed per script; execution varies by
/// start state and noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum SkillSpec {
    MoveTo { waypoint: [f64; 2], duration: usize },
    Dwell { duration: usize },
    Arc { center: [f64; 2], radius: f64, angular_rate: f64, duration: usize },
    Zigzag { axis: [f64; 2], speed: f64, half_period: usize, duration: usize },
}

impl SkillSpec {
    pub fn duration(&self) -> usize {
        match self {
            SkillSpec::MoveTo { duration, .. }
            | SkillSpec::Dwell { duration }
            | SkillSpec::Arc { duration, .. }
            | SkillSpec::Zigzag { duration, .. } => *duration,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            SkillSpec::MoveTo { .. } => "move_to",
            SkillSpec::Dwell { .. } => "dwell",
            SkillSpec::Arc { .. } => "arc",
            SkillSpec::Zigzag { .. } => "zigzag",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskScript {
    pub task_id: usize,
    pub skills: Vec<SkillSpec>,
}

impl TaskScript {
    pub fn total_duration(&self) -> usize {
        self.skills.iter().map(|s| s.duration()).sum()
    }

    pub fn waypoints(&self) -> Vec<[f64; 2]> {
        self.skills
            .iter()
            .filter_map(|s| match s {
                SkillSpec::MoveTo { waypoint, .. } => Some(*waypoint),
                _ => None,
            })
            .collect()
    }
}

/// One generated episode with ground-truth segmentation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub id: u64,
    pub task_id: usize,
    /// T states, row-major [T x 4].
    pub states: Vec<[f64; STATE_DIM]>,
    /// T-1 commanded velocities.
    pub actions: Vec<[f64; ACTION_DIM]>,
    /// Per-state skill instance id (0-based, increments at each boundary).
    pub skill_ids: Vec<usize>,
    /// Per-state segment-start flags; index 0 is always 1.
    pub gt_boundaries: Vec<u8>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.states.len();
        let fail = |what: &str| Err(Error::World(format!("episode {}: {what}", self.id)));
        if t == 0 {
            return fail("empty");
        }
        if self.actions.len() != t - 1 {
            return fail("action count != T-1");
        }
        if self.skill_ids.len() != t || self.gt_boundaries.len() != t {
            return fail("label length != T");
        }
        if self.gt_boundaries[0] != 1 {
            return fail("first step must start a skill");
        }
        for (i, s) in self.states.iter().enumerate() {
            if s.iter().any(|v| !v.is_finite()) {
                return fail(&format!("non-finite state at step {i}"));
            }
        }
        for i in 1..t {
            let changed = self.skill_ids[i] != self.skill_ids[i - 1];
            if changed != (self.gt_boundaries[i] == 1) {
                return fail(&format!("skill id / boundary mismatch at step {i}"));
            }
        }
        Ok(())
    }
}

fn clamp_action(a: [f64; 2], v_max: f64) -> [f64; 2] {
    [a[0].clamp(-v_max, v_max), a[1].clamp(-v_max, v_max)]
}

/// position' = clamp(position + action + noise); velocity' = applied action.
pub fn step_dynamics(state: &WorldState, action: [f64; 2], cfg: &WorldConfig, rng: &mut Rng) -> WorldState {
    let a = clamp_action(action, cfg.v_max);
    let noise = [cfg.noise_sigma * rng.normal(), cfg.noise_sigma * rng.normal()];
    WorldState {
        position: [
            (state.position[0] + a[0] + noise[0]).clamp(0.0, 1.0),
            (state.position[1] + a[1] + noise[1]).clamp(0.0, 1.0),
        ],
        velocity: a,
    }
}

/// Scripted per-skill controller, instantiated at skill entry.
enum SkillController {
    MoveTo { waypoint: [f64; 2] },
    Dwell,
    Arc { center: [f64; 2], radius: f64, angular_rate: f64, theta0: f64 },
    Zigzag { axis: [f64; 2], speed: f64, half_period: usize },
}

impl SkillController {
    fn new(spec: &SkillSpec, entry: &WorldState) -> Self {
        match *spec {
            SkillSpec::MoveTo { waypoint, .. } => SkillController::MoveTo { waypoint },
            SkillSpec::Dwell { .. } => SkillController::Dwell,
            SkillSpec::Arc { center, radius, angular_rate, .. } => {
                let dx = entry.position[0] - center[0];
                let dy = entry.position[1] - center[1];
                let theta0 = if dx == 0.0 && dy == 0.0 { 0.0 } else { dy.atan2(dx) };
                SkillController::Arc { center, radius, angular_rate, theta0 }
            }
            SkillSpec::Zigzag { axis, speed, half_period, .. } => {
                SkillController::Zigzag { axis, speed, half_period }
            }
        }
    }

    fn action(&self, state: &WorldState, step_in_skill: usize, v_max: f64) -> [f64; 2] {
        match self {
            SkillController::MoveTo { waypoint } => clamp_action(
                [
                    PROP_GAIN * (waypoint[0] - state.position[0]),
                    PROP_GAIN * (waypoint[1] - state.position[1]),
                ],
                v_max,
            ),
            SkillController::Dwell => [0.0, 0.0],
            SkillController::Arc { center, radius, angular_rate, theta0 } => {
                let theta = theta0 + angular_rate * (step_in_skill + 1) as f64;
                let target = [center[0] + radius * theta.cos(), center[1] + radius * theta.sin()];
                clamp_action(
                    [target[0] - state.position[0], target[1] - state.position[1]],
                    v_max,
                )
            }
            SkillController::Zigzag { axis, speed, half_period } => {
                let sign = if (step_in_skill / half_period) % 2 == 0 { 1.0 } else { -1.0 };
                clamp_action([sign * speed * axis[0], sign * speed * axis[1]], v_max)
            }
        }
    }
}

fn draw_skill(rng: &mut Rng, cfg: &WorldConfig, prev: Option<&SkillSpec>) -> SkillSpec {
    let duration = rng.int_range(cfg.min_duration, cfg.max_duration);
    let (lo, hi) = WAYPOINT_RANGE;
    let mut kind = rng.below(4);
    // Consecutive skills must differ in kind, except move_to -> move_to with
    // a well-separated waypoint, so every boundary is detectable in principle.
    if let Some(prev) = prev {
        let prev_kind = match prev {
            SkillSpec::MoveTo { .. } => 0,
            SkillSpec::Dwell { .. } => 1,
            SkillSpec::Arc { .. } => 2,
            SkillSpec::Zigzag { .. } => 3,
        };
        if kind == prev_kind && kind != 0 {
            let others: Vec<usize> = (0..4).filter(|&k| k != prev_kind).collect();
            kind = others[rng.below(3)];
        }
    }
    match kind {
        0 => {
            let prev_wp = match prev {
                Some(SkillSpec::MoveTo { waypoint, .. }) => Some(*waypoint),
                _ => None,
            };
            let mut waypoint = [rng.range(lo, hi), rng.range(lo, hi)];
            if let Some(w0) = prev_wp {
                for tries in 0.. {
                    let d = ((waypoint[0] - w0[0]).powi(2) + (waypoint[1] - w0[1]).powi(2)).sqrt();
                    if d >= MIN_WAYPOINT_SEP {
                        break;
                    }
                    assert!(tries < 64, "draw_skill: waypoint separation rejection stalled");
                    waypoint = [rng.range(lo, hi), rng.range(lo, hi)];
                }
            }
            SkillSpec::MoveTo { waypoint, duration }
        }
        1 => SkillSpec::Dwell { duration },
        2 => SkillSpec::Arc {
            center: [rng.range(0.3, 0.7), rng.range(0.3, 0.7)],
            radius: rng.range(0.08, 0.2),
            angular_rate: rng.range(0.15, 0.35) * if rng.below(2) == 0 { 1.0 } else { -1.0 },
            duration,
        },
        _ => {
            let angle = rng.range(0.0, std::f64::consts::TAU);
            SkillSpec::Zigzag {
                axis: [angle.cos(), angle.sin()],
                speed: rng.range(0.025, 0.05),
                half_period: rng.int_range(2, 4),
                duration,
            }
        }
    }
}

/// Build the task library: `task_library_size` scripts of 2-5 skills each.
pub fn generate_task_library(cfg: &WorldConfig, seed: u64) -> Vec<TaskScript> {
    let mut rng = Rng::new(seed, Stream::Data, 0);
    (0..cfg.task_library_size)
        .map(|task_id| {
            let n_skills = rng.int_range(cfg.min_skills, cfg.max_skills);
            let mut skills: Vec<SkillSpec> = Vec::with_capacity(n_skills);
            for _ in 0..n_skills {
                let spec = draw_skill(&mut rng, cfg, skills.last());
                skills.push(spec);
            }
            TaskScript { task_id, skills }
        })
        .collect()
}

/// Run the scripted controllers over `script`, recording ground truth.
/// Deterministic in (script, seed); the episode id is set to the seed and
/// may be reassigned by the dataset builder.
pub fn generate_episode(script: &TaskScript, cfg: &WorldConfig, seed: u64) -> Episode {
    let mut rng = Rng::new(seed, Stream::Data, 1 + script.task_id as u64);
    let (lo, hi) = START_RANGE;
    let mut state = WorldState::at([rng.range(lo, hi), rng.range(lo, hi)]);
    let total: usize = script.total_duration();

    let mut states = Vec::with_capacity(total);
    let mut actions = Vec::with_capacity(total - 1);
    let mut skill_ids = Vec::with_capacity(total);
    let mut gt_boundaries = Vec::with_capacity(total);

    let mut t = 0;
    for (i, spec) in script.skills.iter().enumerate() {
        let controller = SkillController::new(spec, &state);
        for j in 0..spec.duration() {
            states.push(state.observation());
            skill_ids.push(i);
            gt_boundaries.push(u8::from(j == 0));
            t += 1;
            if t == total {
                break;
            }
            let a = controller.action(&state, j, cfg.v_max);
            actions.push(a);
            state = step_dynamics(&state, a, cfg, &mut rng);
        }
    }

    Episode { id: seed, task_id: script.task_id, states, actions, skill_ids, gt_boundaries }
}

/// Episodes plus the library they were generated from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub library: Vec<TaskScript>,
    pub train: Vec<Episode>,
    pub val: Vec<Episode>,
    pub test: Vec<Episode>,
}

impl Dataset {
    pub fn splits(&self) -> [(&str, &[Episode]); 3] {
        [("train", &self.train), ("val", &self.val), ("test", &self.test)]
    }
}

/// Generate id-disjoint train/val/test splits, round-robin over the task
/// library. Deterministic in (cfg, seed).
pub fn generate_dataset(cfg: &WorldConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let library = generate_task_library(cfg, seed);
    let total = cfg.train_episodes + cfg.val_episodes + cfg.test_episodes;
    let mut all = Vec::with_capacity(total);
    for i in 0..total {
        let script = &library[i % library.len()];
        let ep_seed = seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let mut ep = generate_episode(script, cfg, ep_seed);
        ep.id = i as u64;
        all.push(ep);
    }
    let val_at = cfg.train_episodes;
    let test_at = val_at + cfg.val_episodes;
    let test = all.split_off(test_at);
    let val = all.split_off(val_at);
    Ok(Dataset { library, train: all, val, test })
}

// ── rollouts ─────────────────────────────────────────────────────────

/// Anything that maps (state, task) to a commanded velocity. Implementations
/// may keep per-episode state; `reset` is called once per rollout.
pub trait Policy {
    fn reset(&mut self) {}
    fn act(&mut self, state: &WorldState, task_id: usize) -> [f64; 2];
}

#[derive(Clone, Debug)]
pub struct RolloutResult {
    pub success: bool,
    pub steps: usize,
    pub trajectory: Vec<[f64; STATE_DIM]>,
}

/// Execute `policy` on `script`'s task. Success means every move_to waypoint
/// is visited in order within [`SUCCESS_RADIUS`] before `max_steps`
/// (default 4 x script duration). A non-finite action fails the episode.
pub fn rollout(
    policy: &mut dyn Policy,
    script: &TaskScript,
    cfg: &WorldConfig,
    seed: u64,
    max_steps: Option<usize>,
) -> RolloutResult {
    let max_steps = max_steps.unwrap_or(4 * script.total_duration());
    let waypoints = script.waypoints();
    let mut rng = Rng::new(seed, Stream::Rollout, 1 + script.task_id as u64);
    let (lo, hi) = START_RANGE;
    let mut state = WorldState::at([rng.range(lo, hi), rng.range(lo, hi)]);
    let mut visited = 0usize;
    let mut trajectory = vec![state.observation()];
    policy.reset();

    let check = |state: &WorldState, visited: &mut usize| {
        while *visited < waypoints.len() {
            let w = waypoints[*visited];
            let d = ((state.position[0] - w[0]).powi(2) + (state.position[1] - w[1]).powi(2)).sqrt();
            if d <= SUCCESS_RADIUS {
                *visited += 1;
            } else {
                break;
            }
        }
    };

    check(&state, &mut visited);
    let mut steps = 0;
    while visited < waypoints.len() && steps < max_steps {
        let a = policy.act(&state, script.task_id);
        if !a[0].is_finite() || !a[1].is_finite() {
            return RolloutResult { success: false, steps, trajectory };
        }
        state = step_dynamics(&state, a, cfg, &mut rng);
        trajectory.push(state.observation());
        steps += 1;
        check(&state, &mut visited);
    }

    RolloutResult { success: visited == waypoints.len(), steps, trajectory }
}

/// The scripted waypoint-seeking controller wrapped as a policy; used as the
/// soundness oracle for the success metric.
pub struct OraclePolicy {
    waypoints: Vec<[f64; 2]>,
    next: usize,
    v_max: f64,
}

impl OraclePolicy {
    pub fn new(script: &TaskScript, cfg: &WorldConfig) -> Self {
        OraclePolicy { waypoints: script.waypoints(), next: 0, v_max: cfg.v_max }
    }
}

impl Policy for OraclePolicy {
    fn reset(&mut self) {
        self.next = 0;
    }

    fn act(&mut self, state: &WorldState, _task_id: usize) -> [f64; 2] {
        while self.next < self.waypoints.len() {
            let w = self.waypoints[self.next];
            let d = ((state.position[0] - w[0]).powi(2) + (state.position[1] - w[1]).powi(2)).sqrt();
            if d <= ORACLE_RADIUS {
                self.next += 1;
            } else {
                break;
            }
        }
        if self.next >= self.waypoints.len() {
            return [0.0, 0.0];
        }
        let w = self.waypoints[self.next];
        clamp_action(
            [
                PROP_GAIN * (w[0] - state.position[0]),
                PROP_GAIN * (w[1] - state.position[1]),
            ],
            self.v_max,
        )
    }
}
