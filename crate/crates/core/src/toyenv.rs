//! Deterministic multi-task point-reach environment.
//!
//! A point mass moves in the plane with `pos' = pos + dt · clip(action)`. Task
//! `k` asks it to reach goal `k`, one of `K` equally spaced points on the unit
//! circle. A scripted proportional controller provides expert demonstrations;
//! suboptimal demonstrations corrupt the expert's actions with Gaussian noise.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{SourceTag, Trajectory};
use crate::error::{Error, Result};
use crate::rng;

/// What the policy observes besides its position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObsMode {
    /// `(pos, goal)`
    GoalConditioned,
    /// `(pos, 0, 0)`: the goal slots are zeroed.
    NoGoal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvSpec {
    pub num_tasks: usize,
    pub dt: f64,
    pub gain: f64,
    pub action_clip: f64,
    pub success_radius: f64,
    pub max_steps: usize,
    /// Starts are drawn uniformly from `[-start_box, start_box]²`.
    pub start_box: f64,
    pub obs_mode: ObsMode,
}

impl Default for EnvSpec {
    fn default() -> Self {
        Self {
            num_tasks: 8,
            dt: 0.1,
            gain: 5.0,
            action_clip: 1.0,
            success_radius: 0.1,
            max_steps: 50,
            start_box: 1.0,
            obs_mode: ObsMode::GoalConditioned,
        }
    }
}

pub const OBS_DIM: usize = 4;
pub const ACTION_DIM: usize = 2;

impl EnvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_tasks == 0 {
            return Err(Error::InvalidArgument("num_tasks must be at least 1".into()));
        }
        if !(self.success_radius > 0.0) || self.max_steps == 0 {
            return Err(Error::InvalidArgument(
                "success_radius must be positive and max_steps at least 1".into(),
            ));
        }
        if !(self.dt > 0.0 && self.action_clip > 0.0 && self.start_box >= 0.0) {
            return Err(Error::InvalidArgument(
                "dt and action_clip must be positive, start_box non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn goal(&self, task: usize) -> [f64; 2] {
        let angle = 2.0 * std::f64::consts::PI * task as f64 / self.num_tasks as f64;
        [angle.cos(), angle.sin()]
    }

    pub fn goals(&self) -> Vec<[f64; 2]> {
        (0..self.num_tasks).map(|k| self.goal(k)).collect()
    }

    pub fn observe(&self, pos: [f64; 2], task: usize) -> Vec<f64> {
        match self.obs_mode {
            ObsMode::GoalConditioned => {
                let g = self.goal(task);
                vec![pos[0], pos[1], g[0], g[1]]
            }
            ObsMode::NoGoal => vec![pos[0], pos[1], 0.0, 0.0],
        }
    }

    fn clip(&self, v: f64) -> f64 {
        v.clamp(-self.action_clip, self.action_clip)
    }

    fn sample_start(&self, rng: &mut impl Rng) -> [f64; 2] {
        if self.start_box == 0.0 {
            return [0.0, 0.0];
        }
        let b = self.start_box;
        [rng.random_range(-b..=b), rng.random_range(-b..=b)]
    }
}

/// `pos + dt · clip(action)`, clipping each coordinate.
pub fn env_step(spec: &EnvSpec, pos: [f64; 2], action: &[f64]) -> [f64; 2] {
    [
        pos[0] + spec.dt * spec.clip(action[0]),
        pos[1] + spec.dt * spec.clip(action[1]),
    ]
}

/// Scripted controller `clip(gain · (goal - pos))`.
pub fn expert_action(spec: &EnvSpec, pos: [f64; 2], goal: [f64; 2]) -> [f64; 2] {
    [
        spec.clip(spec.gain * (goal[0] - pos[0])),
        spec.clip(spec.gain * (goal[1] - pos[1])),
    ]
}

pub fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Anything that maps an observation to a (mean) action.
pub trait Policy: Sync {
    fn act(&self, obs: &[f64]) -> Vec<f64>;
}

/// The scripted expert for one goal, as a policy. It reads its position from
/// the observation and ignores the goal slots.
#[derive(Clone, Debug)]
pub struct ScriptedExpert {
    pub spec: EnvSpec,
    pub goal: [f64; 2],
}

impl Policy for ScriptedExpert {
    fn act(&self, obs: &[f64]) -> Vec<f64> {
        expert_action(&self.spec, [obs[0], obs[1]], self.goal).to_vec()
    }
}

/// Always outputs the zero action.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroPolicy;

impl Policy for ZeroPolicy {
    fn act(&self, _obs: &[f64]) -> Vec<f64> {
        vec![0.0; ACTION_DIM]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutResult {
    pub success: bool,
    pub steps_taken: usize,
    pub final_distance: f64,
}

/// One episode from `start`. Success is declared as soon as the position is
/// within `success_radius` of the goal, including at the start.
pub fn rollout(policy: &dyn Policy, spec: &EnvSpec, task: usize, start: [f64; 2]) -> RolloutResult {
    let goal = spec.goal(task);
    let mut pos = start;
    let mut steps = 0;
    while steps < spec.max_steps && distance(pos, goal) >= spec.success_radius {
        let a = policy.act(&spec.observe(pos, task));
        pos = env_step(spec, pos, &a);
        steps += 1;
    }
    let final_distance = distance(pos, goal);
    RolloutResult {
        success: final_distance < spec.success_radius,
        steps_taken: steps,
        final_distance,
    }
}

/// Fraction of `n_rollouts` seeded episodes that succeed. Rollout `i` draws its
/// start from the stream `(seed, i)`, so the result does not depend on how the
/// rollouts are scheduled.
pub fn rollout_success_rate(
    policy: &dyn Policy,
    spec: &EnvSpec,
    task_id: usize,
    n_rollouts: usize,
    seed: u64,
) -> Result<f64> {
    if n_rollouts == 0 {
        return Err(Error::InvalidArgument("n_rollouts must be at least 1".into()));
    }
    if task_id >= spec.num_tasks {
        return Err(Error::InvalidArgument(format!(
            "task {task_id} out of range for {} tasks",
            spec.num_tasks
        )));
    }
    let successes = (0..n_rollouts)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::rng_for(seed, &[rng::STREAM_ROLLOUT, i as u64]);
            let start = spec.sample_start(&mut r);
            rollout(policy, spec, task_id, start).success as usize
        })
        .sum::<usize>();
    Ok(successes as f64 / n_rollouts as f64)
}

fn record_episode(
    spec: &EnvSpec,
    task: usize,
    start: [f64; 2],
    noise: Option<(&Normal<f64>, &mut rand_chacha::ChaCha8Rng)>,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let goal = spec.goal(task);
    let mut pos = start;
    let mut states = Vec::new();
    let mut actions = Vec::new();
    match noise {
        None => {
            // Expert: stop once the goal is reached; always record one step.
            loop {
                let a = expert_action(spec, pos, goal);
                states.push(spec.observe(pos, task));
                actions.push(a.to_vec());
                pos = env_step(spec, pos, &a);
                if distance(pos, goal) < spec.success_radius || states.len() == spec.max_steps {
                    break;
                }
            }
        }
        Some((normal, r)) => {
            // Suboptimal episodes run for the full horizon.
            for _ in 0..spec.max_steps {
                let e = expert_action(spec, pos, goal);
                let a = [
                    spec.clip(e[0] + normal.sample(r)),
                    spec.clip(e[1] + normal.sample(r)),
                ];
                states.push(spec.observe(pos, task));
                actions.push(a.to_vec());
                pos = env_step(spec, pos, &a);
            }
        }
    }
    (states, actions)
}

/// Expert demonstrations for one task.
pub fn generate_expert(
    spec: &EnvSpec,
    task: usize,
    count: usize,
    source_tag: SourceTag,
    first_traj_id: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    spec.validate()?;
    (0..count)
        .map(|i| {
            let mut r = rng::rng_for(seed, &[rng::STREAM_GEN, task as u64, 0, i as u64]);
            let start = spec.sample_start(&mut r);
            let (s, a) = record_episode(spec, task, start, None);
            Trajectory::new(first_traj_id + i, task, source_tag, s, a)
        })
        .collect()
}

/// Prior dataset: for every task, `n_expert_per_task` expert episodes then
/// `n_noisy_per_task` noise-corrupted episodes. Trajectory ids are assigned
/// in that order starting at 0.
pub fn generate_prior(
    spec: &EnvSpec,
    n_expert_per_task: usize,
    n_noisy_per_task: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    spec.validate()?;
    let normal = Normal::new(0.0, noise_sigma)
        .map_err(|e| Error::InvalidArgument(format!("noise_sigma {noise_sigma}: {e}")))?;
    let mut out = Vec::with_capacity(spec.num_tasks * (n_expert_per_task + n_noisy_per_task));
    for task in 0..spec.num_tasks {
        let experts = generate_expert(spec, task, n_expert_per_task, SourceTag::Expert, out.len(), seed)?;
        out.extend(experts);
        for i in 0..n_noisy_per_task {
            let mut r = rng::rng_for(seed, &[rng::STREAM_GEN, task as u64, 1, i as u64]);
            let start = spec.sample_start(&mut r);
            let (s, a) = record_episode(spec, task, start, Some((&normal, &mut r)));
            out.push(Trajectory::new(out.len(), task, SourceTag::Suboptimal, s, a)?);
        }
    }
    Ok(out)
}

/// Target demonstrations: expert episodes for `task`, tagged `target`, drawn
/// from a stream disjoint from the prior's.
pub fn generate_target(spec: &EnvSpec, task: usize, count: usize, first_traj_id: usize, seed: u64) -> Result<Vec<Trajectory>> {
    generate_expert(spec, task, count, SourceTag::Target, first_traj_id, rng::derive_seed(seed, &[0x7a12]))
}

/// Positions visited when replaying a trajectory's actions from its first
/// stored position; one more entry than the trajectory has pairs.
pub fn replay_positions(spec: &EnvSpec, traj: &Trajectory) -> Vec<[f64; 2]> {
    let first = &traj.pairs()[0].state;
    let mut pos = [first[0], first[1]];
    let mut out = vec![pos];
    for p in traj.pairs() {
        pos = env_step(spec, pos, &p.action);
        out.push(pos);
    }
    out
}

/// Whether replaying the trajectory ends within `success_radius` of its goal.
pub fn replay_success(spec: &EnvSpec, traj: &Trajectory) -> bool {
    let last = *replay_positions(spec, traj).last().expect("non-empty");
    distance(last, spec.goal(traj.task_id)) < spec.success_radius
}
