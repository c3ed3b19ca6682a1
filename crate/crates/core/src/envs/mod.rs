//! Built-in environments sharing one reset/step contract.
//!
//! - [`PointGoal2D`]: continuous navigation towards any of several goals.
//! - [`GridMaze`]: sparse-reward 8x8 maze with discrete moves.
//! - [`LineReturn`]: one-dimensional diagnostic task with two optima.

mod grid_maze;
mod line_return;
mod point_goal;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{DiceError, Result};
use crate::numerics::Action;

pub use grid_maze::GridMaze;
pub use line_return::LineReturn;
pub use point_goal::PointGoal2D;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ActionSpace {
    Box { low: Vec<f64>, high: Vec<f64> },
    Discrete(usize),
}

impl ActionSpace {
    pub fn dim(&self) -> usize {
        match self {
            ActionSpace::Box { low, .. } => low.len(),
            ActionSpace::Discrete(n) => *n,
        }
    }

    pub fn is_continuous(&self) -> bool {
        matches!(self, ActionSpace::Box { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub name: String,
    pub obs_dim: usize,
    pub action: ActionSpace,
    pub horizon: usize,
    pub reward_scale: f64,
}

impl EnvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(DiceError::Config(format!("{}: horizon must be >= 1", self.name)));
        }
        if let ActionSpace::Box { low, high } = &self.action {
            if low.len() != high.len() || low.iter().chain(high).any(|b| !b.is_finite()) {
                return Err(DiceError::Config(format!("{}: action bounds must be finite", self.name)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub next_obs: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub info: BTreeMap<&'static str, f64>,
}

pub trait Environment {
    fn spec(&self) -> &EnvSpec;

    /// Starts a new episode. The same seed always yields the same observation.
    fn reset(&mut self, seed: u64) -> Vec<f64>;

    /// Advances one step. Stepping a finished episode is a contract error.
    fn step(&mut self, action: &Action) -> Result<StepResult>;

    /// Steps taken in the current episode.
    fn elapsed(&self) -> usize;
}

/// Clamps a continuous action into its box, reporting whether anything moved.
pub(crate) fn clamp_to_box(action: &[f64], low: &[f64], high: &[f64]) -> (Vec<f64>, bool) {
    let mut clamped = false;
    let out = action
        .iter()
        .zip(low.iter().zip(high))
        .map(|(a, (lo, hi))| {
            let c = a.clamp(*lo, *hi);
            clamped |= c != *a;
            c
        })
        .collect();
    (out, clamped)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvName {
    #[serde(rename = "point_goal_2d")]
    PointGoal2d,
    GridMaze,
    LineReturn,
}

/// Environment selection and parameters. Unset parameters take the
/// environment's defaults; parameters that do not apply to the chosen
/// environment are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub name: EnvName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub horizon: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goals: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goal_distance: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goal_radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_speed: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_cost: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goal_bonus: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub peak: Option<f64>,
}

impl EnvConfig {
    pub fn named(name: EnvName) -> Self {
        EnvConfig {
            name,
            horizon: None,
            reward_scale: None,
            goals: None,
            goal_distance: None,
            goal_radius: None,
            max_speed: None,
            step_cost: None,
            goal_bonus: None,
            peak: None,
        }
    }

    pub fn build(&self) -> Result<Env> {
        let reject = |field: &str, set: bool| -> Result<()> {
            if set {
                Err(DiceError::Config(format!("env parameter `{field}` does not apply to {:?}", self.name)))
            } else {
                Ok(())
            }
        };
        let env = match self.name {
            EnvName::PointGoal2d => {
                reject("peak", self.peak.is_some())?;
                let mut p = point_goal::PointGoalParams::default();
                if let Some(v) = self.goals {
                    p.goals = v;
                }
                if let Some(v) = self.goal_distance {
                    p.goal_distance = v;
                }
                if let Some(v) = self.goal_radius {
                    p.goal_radius = v;
                }
                if let Some(v) = self.max_speed {
                    p.max_speed = v;
                }
                if let Some(v) = self.step_cost {
                    p.step_cost = v;
                }
                if let Some(v) = self.goal_bonus {
                    p.goal_bonus = v;
                }
                if let Some(v) = self.horizon {
                    p.horizon = v;
                }
                if let Some(v) = self.reward_scale {
                    p.reward_scale = v;
                }
                Env::PointGoal(PointGoal2D::new(p)?)
            }
            EnvName::GridMaze => {
                for (f, set) in [
                    ("goals", self.goals.is_some()),
                    ("goal_distance", self.goal_distance.is_some()),
                    ("goal_radius", self.goal_radius.is_some()),
                    ("max_speed", self.max_speed.is_some()),
                    ("step_cost", self.step_cost.is_some()),
                    ("goal_bonus", self.goal_bonus.is_some()),
                    ("peak", self.peak.is_some()),
                ] {
                    reject(f, set)?;
                }
                Env::GridMaze(GridMaze::new(
                    self.horizon.unwrap_or(grid_maze::DEFAULT_HORIZON),
                    self.reward_scale.unwrap_or(1.0),
                )?)
            }
            EnvName::LineReturn => {
                for (f, set) in [
                    ("goals", self.goals.is_some()),
                    ("goal_distance", self.goal_distance.is_some()),
                    ("goal_radius", self.goal_radius.is_some()),
                    ("max_speed", self.max_speed.is_some()),
                    ("step_cost", self.step_cost.is_some()),
                    ("goal_bonus", self.goal_bonus.is_some()),
                ] {
                    reject(f, set)?;
                }
                Env::LineReturn(LineReturn::new(
                    self.peak.unwrap_or(1.0),
                    self.horizon.unwrap_or(1),
                    self.reward_scale.unwrap_or(1.0),
                )?)
            }
        };
        env.spec().validate()?;
        Ok(env)
    }
}

/// Any built-in environment.
#[derive(Debug, Clone)]
pub enum Env {
    PointGoal(PointGoal2D),
    GridMaze(GridMaze),
    LineReturn(LineReturn),
}

impl Environment for Env {
    fn spec(&self) -> &EnvSpec {
        match self {
            Env::PointGoal(e) => e.spec(),
            Env::GridMaze(e) => e.spec(),
            Env::LineReturn(e) => e.spec(),
        }
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        match self {
            Env::PointGoal(e) => e.reset(seed),
            Env::GridMaze(e) => e.reset(seed),
            Env::LineReturn(e) => e.reset(seed),
        }
    }

    fn step(&mut self, action: &Action) -> Result<StepResult> {
        match self {
            Env::PointGoal(e) => e.step(action),
            Env::GridMaze(e) => e.step(action),
            Env::LineReturn(e) => e.step(action),
        }
    }

    fn elapsed(&self) -> usize {
        match self {
            Env::PointGoal(e) => e.elapsed(),
            Env::GridMaze(e) => e.elapsed(),
            Env::LineReturn(e) => e.elapsed(),
        }
    }
}
