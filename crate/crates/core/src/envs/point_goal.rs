use std::collections::BTreeMap;

use super::{clamp_to_box, ActionSpace, EnvSpec, Environment, StepResult};
use crate::error::{DiceError, Result};
use crate::numerics::Action;

#[derive(Debug, Clone, PartialEq)]
pub struct PointGoalParams {
    pub goals: usize,
    pub goal_distance: f64,
    pub goal_radius: f64,
    pub max_speed: f64,
    pub step_cost: f64,
    pub goal_bonus: f64,
    pub horizon: usize,
    pub reward_scale: f64,
}

impl Default for PointGoalParams {
    fn default() -> Self {
        PointGoalParams {
            goals: 3,
            goal_distance: 1.0,
            goal_radius: 0.15,
            max_speed: 0.1,
            step_cost: 0.01,
            goal_bonus: 1.0,
            horizon: 64,
            reward_scale: 1.0,
        }
    }
}

/// A point starting at the origin with `G` goals on a circle of radius
/// `goal_distance`, the first at 90° and the rest evenly spaced.
///
/// Observation: `[x, y, gx_1 - x, gy_1 - y, ..., gx_G - x, gy_G - y]`.
/// Action: a velocity command in `[-1, 1]^2`, scaled by `max_speed` and then
/// limited to Euclidean norm `max_speed`. Every step costs `step_cost`;
/// entering any goal's radius pays `goal_bonus` and ends the episode.
#[derive(Debug, Clone)]
pub struct PointGoal2D {
    params: PointGoalParams,
    spec: EnvSpec,
    goals: Vec<[f64; 2]>,
    pos: [f64; 2],
    t: usize,
    done: bool,
}

impl PointGoal2D {
    pub fn new(params: PointGoalParams) -> Result<Self> {
        if params.goals == 0 || params.goal_distance <= 0.0 || params.max_speed <= 0.0 || params.goal_radius < 0.0 {
            return Err(DiceError::Config(format!("invalid point_goal_2d parameters {params:?}")));
        }
        let goals = (0..params.goals)
            .map(|i| {
                let angle = std::f64::consts::FRAC_PI_2 + std::f64::consts::TAU * i as f64 / params.goals as f64;
                [params.goal_distance * angle.cos(), params.goal_distance * angle.sin()]
            })
            .collect();
        let spec = EnvSpec {
            name: "point_goal_2d".into(),
            obs_dim: 2 + 2 * params.goals,
            action: ActionSpace::Box {
                low: vec![-1.0; 2],
                high: vec![1.0; 2],
            },
            horizon: params.horizon,
            reward_scale: params.reward_scale,
        };
        Ok(PointGoal2D {
            params,
            spec,
            goals,
            pos: [0.0, 0.0],
            t: 0,
            done: true,
        })
    }

    pub fn goals(&self) -> &[[f64; 2]] {
        &self.goals
    }

    pub fn position(&self) -> [f64; 2] {
        self.pos
    }

    pub fn params(&self) -> &PointGoalParams {
        &self.params
    }

    fn observe(&self) -> Vec<f64> {
        let mut obs = Vec::with_capacity(self.spec.obs_dim);
        obs.extend_from_slice(&self.pos);
        for g in &self.goals {
            obs.push(g[0] - self.pos[0]);
            obs.push(g[1] - self.pos[1]);
        }
        obs
    }

    /// Index of the goal whose radius contains the current position.
    pub fn goal_reached(&self) -> Option<usize> {
        self.goals.iter().position(|g| {
            let (dx, dy) = (g[0] - self.pos[0], g[1] - self.pos[1]);
            (dx * dx + dy * dy).sqrt() <= self.params.goal_radius
        })
    }
}

impl Environment for PointGoal2D {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, _seed: u64) -> Vec<f64> {
        self.pos = [0.0, 0.0];
        self.t = 0;
        self.done = false;
        self.observe()
    }

    fn step(&mut self, action: &Action) -> Result<StepResult> {
        if self.done {
            return Err(DiceError::Contract("point_goal_2d: step after done".into()));
        }
        let raw = action
            .as_continuous()
            .ok_or_else(|| DiceError::Contract("point_goal_2d expects a continuous action".into()))?;
        if raw.len() != 2 {
            return Err(DiceError::dim("point_goal_2d action", 2, raw.len()));
        }
        let ActionSpace::Box { low, high } = &self.spec.action else {
            unreachable!()
        };
        let (a, box_clamped) = clamp_to_box(raw, low, high);
        let mut vel = [a[0] * self.params.max_speed, a[1] * self.params.max_speed];
        let speed = (vel[0] * vel[0] + vel[1] * vel[1]).sqrt();
        let speed_clamped = speed > self.params.max_speed;
        if speed_clamped {
            let s = self.params.max_speed / speed;
            vel = [vel[0] * s, vel[1] * s];
        }
        if box_clamped || speed_clamped {
            log::trace!("point_goal_2d: action {raw:?} clamped to velocity {vel:?}");
        }
        self.pos = [self.pos[0] + vel[0], self.pos[1] + vel[1]];
        self.t += 1;

        let mut reward = -self.params.step_cost;
        let mut info = BTreeMap::new();
        info.insert("clamped", f64::from(u8::from(box_clamped || speed_clamped)));
        let reached = self.goal_reached();
        if let Some(g) = reached {
            reward += self.params.goal_bonus;
            info.insert("goal", g as f64);
        }
        self.done = reached.is_some() || self.t >= self.params.horizon;
        Ok(StepResult {
            next_obs: self.observe(),
            reward: reward * self.params.reward_scale,
            done: self.done,
            info,
        })
    }

    fn elapsed(&self) -> usize {
        self.t
    }
}
