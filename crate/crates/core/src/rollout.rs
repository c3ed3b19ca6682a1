//! Trajectory collection, advantage estimation and the team batch merge.
//!
//! Advantages are computed once, by the agent that collected the data, with
//! that agent's own value network. Merging never recomputes them: a
//! transition keeps the advantage its owner assigned even when another agent
//! trains on it.

use rand::Rng;

use crate::envs::{Env, Environment};
use crate::error::{DiceError, Result};
use crate::numerics::{sample_action, Action, HeadOutput, PolicyNet, ValueNet};

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: Action,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    pub done: bool,
    /// Log-probability of `action` under the owner's policy when it acted.
    pub behavior_log_prob: f64,
    /// The owner's action distribution at `obs` when it acted.
    pub behavior: HeadOutput,
    /// Index of the collecting agent, `0..K`.
    pub owner: usize,
}

/// Transitions in time order, split into contiguous segments.
///
/// `segment_end[i]` marks the last transition of a contiguous piece of
/// trajectory: either the episode ended there or collection stopped. The
/// per-transition vectors are filled by [`TrajectoryBatch::compute_advantages`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectoryBatch {
    pub env_name: String,
    pub obs_dim: usize,
    pub transitions: Vec<Transition>,
    pub segment_end: Vec<bool>,
    pub values: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    /// Content hash of the value parameters that produced each advantage.
    pub value_hash: Vec<u64>,
}

impl TrajectoryBatch {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn has_advantages(&self) -> bool {
        self.advantages.len() == self.len() && !self.is_empty()
    }

    /// Number of transitions per owner, indexed by owner.
    pub fn owner_counts(&self, num_agents: usize) -> Vec<usize> {
        let mut counts = vec![0; num_agents];
        for t in &self.transitions {
            counts[t.owner] += 1;
        }
        counts
    }

    /// Fills values, advantages (GAE) and discounted-return value targets
    /// using `value_net`, which must belong to the owner of the transitions.
    pub fn compute_advantages(&mut self, value_net: &ValueNet, gamma: f64, lambda: f64) -> Result<()> {
        let n = self.len();
        let mut values = Vec::with_capacity(n);
        for t in &self.transitions {
            values.push(value_net.forward(&t.obs)?);
        }
        let mut next_values = vec![0.0; n];
        for i in 0..n {
            next_values[i] = if self.transitions[i].done {
                0.0
            } else if self.segment_end[i] {
                value_net.forward(&self.transitions[i].next_obs)?
            } else {
                values[i + 1]
            };
        }
        let rewards: Vec<f64> = self.transitions.iter().map(|t| t.reward).collect();
        let dones: Vec<bool> = self.transitions.iter().map(|t| t.done).collect();
        self.advantages = gae(&rewards, &values, &next_values, &dones, &self.segment_end, gamma, lambda);
        self.returns = discounted_returns(&rewards, &next_values, &dones, &self.segment_end, gamma);
        self.values = values;
        self.value_hash = vec![value_net.params().content_hash(); n];
        Ok(())
    }
}

/// Single-step advantage `r + γ·v(s')·(1 - done) - v(s)`.
pub fn one_step_advantage(reward: f64, value: f64, next_value: f64, done: bool, gamma: f64) -> f64 {
    let bootstrap = if done { 0.0 } else { gamma * next_value };
    reward + bootstrap - value
}

/// Generalized advantage estimation over segmented trajectories.
///
/// `next_values[t]` is the value of the state following step `t` (ignored on
/// terminal steps). The recursion restarts at every segment end, so with
/// `lambda = 0` every entry equals [`one_step_advantage`] and with
/// `lambda = 1` it equals the bootstrapped discounted return minus the value.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    next_values: &[f64],
    dones: &[bool],
    segment_end: &[bool],
    gamma: f64,
    lambda: f64,
) -> Vec<f64> {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        if segment_end[t] {
            running = 0.0;
        }
        let delta = one_step_advantage(rewards[t], values[t], next_values[t], dones[t], gamma);
        running = delta + gamma * lambda * running;
        adv[t] = running;
    }
    adv
}

/// Discounted returns within segments, bootstrapped from `next_values` at
/// non-terminal segment ends.
pub fn discounted_returns(
    rewards: &[f64],
    next_values: &[f64],
    dones: &[bool],
    segment_end: &[bool],
    gamma: f64,
) -> Vec<f64> {
    let n = rewards.len();
    let mut out = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let tail = if dones[t] {
            0.0
        } else if segment_end[t] {
            next_values[t]
        } else {
            running
        };
        running = rewards[t] + gamma * tail;
        out[t] = running;
    }
    out
}

/// Shifts and scales to zero mean and unit (population) standard deviation.
pub fn normalize_advantages(advantages: &[f64]) -> Result<Vec<f64>> {
    if advantages.len() < 2 {
        return Err(DiceError::Contract(format!(
            "advantage normalization needs at least 2 samples, got {}",
            advantages.len()
        )));
    }
    let n = advantages.len() as f64;
    let mean = advantages.iter().sum::<f64>() / n;
    let var = advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    Ok(advantages.iter().map(|a| (a - mean) / (std + 1e-8)).collect())
}

/// Concatenates per-agent batches, in agent order, into one shared batch.
/// Owner tags, advantages and value provenance are carried over untouched.
pub fn merge_team_batches(batches: &[TrajectoryBatch]) -> Result<TrajectoryBatch> {
    let first = batches
        .first()
        .ok_or_else(|| DiceError::Contract("cannot merge an empty team".into()))?;
    let mut out = TrajectoryBatch {
        env_name: first.env_name.clone(),
        obs_dim: first.obs_dim,
        ..Default::default()
    };
    for b in batches {
        if b.env_name != first.env_name || b.obs_dim != first.obs_dim {
            return Err(DiceError::Config(format!(
                "cannot merge batches from different environments ({} vs {})",
                first.env_name, b.env_name
            )));
        }
        if !b.has_advantages() {
            return Err(DiceError::Contract("merge requires owner-computed advantages".into()));
        }
        out.transitions.extend_from_slice(&b.transitions);
        out.segment_end.extend_from_slice(&b.segment_end);
        out.values.extend_from_slice(&b.values);
        out.advantages.extend_from_slice(&b.advantages);
        out.returns.extend_from_slice(&b.returns);
        out.value_hash.extend_from_slice(&b.value_hash);
    }
    Ok(out)
}

/// Splits a total sample budget over `k` agents: `n / k` each, with the
/// remainder handed out one by one starting from agent 0.
pub fn split_budget(total: usize, k: usize) -> Vec<usize> {
    assert!(k >= 1, "at least one agent");
    (0..k).map(|i| total / k + usize::from(i < total % k)).collect()
}

/// One agent's private environment copy plus episode bookkeeping.
/// The episode in progress carries over between calls to [`collect`].
#[derive(Debug, Clone)]
pub struct EnvRunner {
    env: Env,
    seed_base: u64,
    episodes_started: u64,
    obs: Vec<f64>,
    episode_return: f64,
    completed: Vec<f64>,
    env_steps: u64,
}

impl EnvRunner {
    pub fn new(mut env: Env, seed_base: u64) -> Self {
        let obs = env.reset(seed_base);
        EnvRunner {
            env,
            seed_base,
            episodes_started: 1,
            obs,
            episode_return: 0.0,
            completed: Vec::new(),
            env_steps: 0,
        }
    }

    pub fn env(&self) -> &Env {
        &self.env
    }

    pub fn obs(&self) -> &[f64] {
        &self.obs
    }

    /// Returns of all episodes finished so far, in order.
    pub fn completed_returns(&self) -> &[f64] {
        &self.completed
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    /// Steps the environment and handles the episode reset.
    pub fn step(&mut self, action: &Action) -> Result<(Vec<f64>, crate::envs::StepResult)> {
        let result = self.env.step(action)?;
        self.env_steps += 1;
        self.episode_return += result.reward;
        let obs = std::mem::replace(&mut self.obs, result.next_obs.clone());
        if result.done {
            self.completed.push(self.episode_return);
            self.episode_return = 0.0;
            self.obs = self.env.reset(self.seed_base.wrapping_add(self.episodes_started));
            self.episodes_started += 1;
        }
        Ok((obs, result))
    }
}

/// Collects exactly `n` transitions with `policy`, tagging them with `owner`.
pub fn collect<R: Rng + ?Sized>(
    policy: &PolicyNet,
    runner: &mut EnvRunner,
    n: usize,
    owner: usize,
    rng: &mut R,
) -> Result<TrajectoryBatch> {
    if n == 0 {
        return Err(DiceError::Contract("collect needs n >= 1".into()));
    }
    let spec = runner.env.spec().clone();
    let mut batch = TrajectoryBatch {
        env_name: spec.name.clone(),
        obs_dim: spec.obs_dim,
        ..Default::default()
    };
    for i in 0..n {
        let head = policy.forward(runner.obs())?;
        let (action, log_prob) = sample_action(&head, rng);
        if !log_prob.is_finite() {
            return Err(DiceError::NonFinite {
                what: "behavior log-prob".into(),
                agent: Some(owner),
            });
        }
        let (obs, result) = runner.step(&action)?;
        batch.segment_end.push(result.done || i + 1 == n);
        batch.transitions.push(Transition {
            obs,
            action,
            reward: result.reward,
            next_obs: result.next_obs,
            done: result.done,
            behavior_log_prob: log_prob,
            behavior: head,
            owner,
        });
    }
    Ok(batch)
}
