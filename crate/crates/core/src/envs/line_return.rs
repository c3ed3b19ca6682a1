use std::collections::BTreeMap;

use super::{clamp_to_box, ActionSpace, EnvSpec, Environment, StepResult};
use crate::error::{DiceError, Result};
use crate::numerics::Action;

/// One-dimensional diagnostic task. The observation is the constant `[1]`,
/// the action is a scalar in `[-2p, 2p]` and the reward is
/// `1 - min((a - p)^2, (a + p)^2)`, with optima at `±p`.
#[derive(Debug, Clone)]
pub struct LineReturn {
    spec: EnvSpec,
    peak: f64,
    t: usize,
    done: bool,
}

impl LineReturn {
    pub fn new(peak: f64, horizon: usize, reward_scale: f64) -> Result<Self> {
        if !(peak > 0.0 && peak.is_finite()) {
            return Err(DiceError::Config(format!("line_return: peak must be positive, got {peak}")));
        }
        let spec = EnvSpec {
            name: "line_return".into(),
            obs_dim: 1,
            action: ActionSpace::Box {
                low: vec![-2.0 * peak],
                high: vec![2.0 * peak],
            },
            horizon,
            reward_scale,
        };
        spec.validate()?;
        Ok(LineReturn {
            spec,
            peak,
            t: 0,
            done: true,
        })
    }

    pub fn reward(&self, a: f64) -> f64 {
        let p = self.peak;
        1.0 - ((a - p).powi(2)).min((a + p).powi(2))
    }

    /// Derivative of the reward with respect to the action.
    pub fn reward_slope(&self, a: f64) -> f64 {
        let p = self.peak;
        if (a - p).abs() <= (a + p).abs() {
            -2.0 * (a - p)
        } else {
            -2.0 * (a + p)
        }
    }

    pub fn peaks(&self) -> [f64; 2] {
        [-self.peak, self.peak]
    }
}

impl Environment for LineReturn {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, _seed: u64) -> Vec<f64> {
        self.t = 0;
        self.done = false;
        vec![1.0]
    }

    fn step(&mut self, action: &Action) -> Result<StepResult> {
        if self.done {
            return Err(DiceError::Contract("line_return: step after done".into()));
        }
        let raw = action
            .as_continuous()
            .ok_or_else(|| DiceError::Contract("line_return expects a continuous action".into()))?;
        let ActionSpace::Box { low, high } = &self.spec.action else {
            unreachable!()
        };
        if raw.len() != 1 {
            return Err(DiceError::dim("line_return action", 1, raw.len()));
        }
        let (a, clamped) = clamp_to_box(raw, low, high);
        self.t += 1;
        self.done = self.t >= self.spec.horizon;
        let mut info = BTreeMap::new();
        info.insert("clamped", f64::from(u8::from(clamped)));
        Ok(StepResult {
            next_obs: vec![1.0],
            reward: self.reward(a[0]) * self.spec.reward_scale,
            done: self.done,
            info,
        })
    }

    fn elapsed(&self) -> usize {
        self.t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_optima() {
        let env = LineReturn::new(1.0, 1, 1.0).unwrap();
        assert_eq!(env.reward(1.0), 1.0);
        assert_eq!(env.reward(-1.0), 1.0);
        assert_eq!(env.reward(0.0), 0.0);
        assert_eq!(env.reward(0.5), env.reward(-0.5));
        for a in [-1.7, -0.3, 0.2, 1.4] {
            let h = 1e-6;
            let fd = (env.reward(a + h) - env.reward(a - h)) / (2.0 * h);
            assert!((fd - env.reward_slope(a)).abs() < 1e-6);
        }
    }

    #[test]
    fn single_step_episode() {
        let mut env = LineReturn::new(1.0, 1, 1.0).unwrap();
        env.reset(0);
        let r = env.step(&Action::Continuous(vec![1.0])).unwrap();
        assert!(r.done);
        assert_eq!(r.reward, 1.0);
    }
}
