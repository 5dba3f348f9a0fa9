//! Continuous 2-D point mass.
//!
//! State is `(x, y, vx, vy)` in a clipped box, action is a bounded
//! acceleration in `[-1, 1]²`. Each step pays the reduction in distance to
//! the goal, and entering the goal pays a terminal bonus. The progress term
//! telescopes, so every successful episode returns
//! `bonus + progress·(d_start − d_end)` however long it takes, and the value
//! of any policy that eventually reaches the goal stays positive.

use rand::Rng;

use super::dataset::{DatasetMeta, OfflineDataset, Transition};
use crate::error::{check_dim, Error, Result};
use crate::rng::Rng64;

pub const ENV_ID: &str = "pointmass";
pub const STATE_DIM: usize = 4;
pub const ACTION_DIM: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct PointMassConfig {
    pub dt: f64,
    pub accel_gain: f64,
    pub max_speed: f64,
    pub goal: [f64; 2],
    pub goal_radius: f64,
    pub goal_bonus: f64,
    pub progress: f64,
    pub horizon: usize,
    /// Start positions are drawn uniformly from `[lo, hi]²`.
    pub start_region: [f64; 2],
}

impl Default for PointMassConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            accel_gain: 2.0,
            max_speed: 1.0,
            goal: [0.6, 0.6],
            goal_radius: 0.1,
            goal_bonus: 10.0,
            progress: 1.0,
            horizon: 50,
            start_region: [-0.9, -0.7],
        }
    }
}

/// Result of one simulator step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointMass {
    pub config: PointMassConfig,
}

impl Default for PointMass {
    fn default() -> Self {
        Self::new(PointMassConfig::default())
    }
}

impl PointMass {
    pub fn new(config: PointMassConfig) -> Self {
        Self { config }
    }

    pub fn reset(&self, rng: &mut Rng64) -> Vec<f64> {
        let [lo, hi] = self.config.start_region;
        vec![rng.random_range(lo..hi), rng.random_range(lo..hi), 0.0, 0.0]
    }

    pub fn goal_distance(&self, state: &[f64]) -> f64 {
        let dx = state[0] - self.config.goal[0];
        let dy = state[1] - self.config.goal[1];
        (dx * dx + dy * dy).sqrt()
    }

    /// Deterministic clipped dynamics. Actions are clipped to `[-1, 1]`;
    /// hitting a wall zeroes the velocity component into it.
    pub fn step(&self, state: &[f64], action: &[f64]) -> Result<StepOutcome> {
        check_dim("point-mass state", STATE_DIM, state.len())?;
        check_dim("point-mass action", ACTION_DIM, action.len())?;
        if state.iter().chain(action).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("point-mass step input".into()));
        }
        let c = &self.config;
        let mut next = vec![0.0; STATE_DIM];
        for i in 0..2 {
            let a = action[i].clamp(-1.0, 1.0);
            let mut v = (state[2 + i] + c.dt * c.accel_gain * a).clamp(-c.max_speed, c.max_speed);
            let mut p = state[i] + c.dt * v;
            if p.abs() > 1.0 {
                p = p.clamp(-1.0, 1.0);
                v = 0.0;
            }
            next[i] = p;
            next[2 + i] = v;
        }
        let dist = self.goal_distance(&next);
        let shaped = c.progress * (self.goal_distance(state) - dist);
        let done = dist < c.goal_radius;
        let reward = if done { shaped + c.goal_bonus } else { shaped };
        Ok(StepOutcome {
            next_state: next,
            reward,
            done,
        })
    }

    /// PD controller toward the goal.
    pub fn expert_action(&self, state: &[f64]) -> Vec<f64> {
        (0..2)
            .map(|i| (2.0 * (self.config.goal[i] - state[i]) - 1.5 * state[2 + i]).clamp(-1.0, 1.0))
            .collect()
    }

    /// Rolls out `policy` for one episode from a sampled start and returns
    /// the undiscounted return.
    pub fn rollout(&self, rng: &mut Rng64, mut policy: impl FnMut(&[f64]) -> Vec<f64>) -> Result<f64> {
        let mut state = self.reset(rng);
        let mut ret = 0.0;
        for _ in 0..self.config.horizon {
            let out = self.step(&state, &policy(&state))?;
            ret += out.reward;
            state = out.next_state;
            if out.done {
                break;
            }
        }
        Ok(ret)
    }
}

/// Behavior-policy tiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BehaviorPolicy {
    Random,
    Medium,
    Expert,
}

impl BehaviorPolicy {
    pub fn tag(self) -> &'static str {
        match self {
            BehaviorPolicy::Random => "random",
            BehaviorPolicy::Medium => "medium",
            BehaviorPolicy::Expert => "expert",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "random" => Ok(BehaviorPolicy::Random),
            "medium" => Ok(BehaviorPolicy::Medium),
            "expert" => Ok(BehaviorPolicy::Expert),
            other => Err(Error::Config(format!("unknown behavior policy '{other}'"))),
        }
    }
}

/// Which controller produced each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Controller {
    Random,
    Expert,
}

/// Generated dataset plus per-step controller tags and per-episode returns.
#[derive(Debug, Clone)]
pub struct PointMassData {
    pub dataset: OfflineDataset,
    pub controllers: Vec<Controller>,
    pub episode_returns: Vec<f64>,
}

/// Rolls out `episodes` episodes. `medium` picks the expert or a uniform
/// random action with equal probability at every step.
pub fn generate_pointmass_dataset(
    env: &PointMass,
    policy: BehaviorPolicy,
    episodes: usize,
    rng: &mut Rng64,
    seed: u64,
) -> Result<PointMassData> {
    let mut transitions = Vec::with_capacity(episodes * env.config.horizon);
    let mut controllers = Vec::with_capacity(transitions.capacity());
    let mut episode_returns = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut state = env.reset(rng);
        let mut ret = 0.0;
        for _ in 0..env.config.horizon {
            let use_expert = match policy {
                BehaviorPolicy::Random => false,
                BehaviorPolicy::Expert => true,
                BehaviorPolicy::Medium => rng.random_bool(0.5),
            };
            let action = if use_expert {
                env.expert_action(&state)
            } else {
                vec![rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)]
            };
            let out = env.step(&state, &action)?;
            ret += out.reward;
            transitions.push(Transition {
                state: state.clone(),
                action,
                reward: out.reward,
                next_state: out.next_state.clone(),
                done: out.done,
            });
            controllers.push(if use_expert { Controller::Expert } else { Controller::Random });
            state = out.next_state;
            if out.done {
                break;
            }
        }
        episode_returns.push(ret);
    }
    let best_return = episode_returns.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let meta = DatasetMeta {
        env_id: ENV_ID.into(),
        state_dim: STATE_DIM,
        action_dim: ACTION_DIM,
        policy: policy.tag().into(),
        seed,
        best_return,
    };
    Ok(PointMassData {
        dataset: OfflineDataset::new(meta, transitions)?,
        controllers,
        episode_returns,
    })
}
