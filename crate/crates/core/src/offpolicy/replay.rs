use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DiceError, Result};
use crate::rollout::split_budget;

/// A stored continuous-control transition.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayTransition {
    pub obs: Vec<f64>,
    /// Squashed action as sent to the environment.
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    pub done: bool,
    pub owner: usize,
}

/// FIFO ring buffer owned by one agent.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    owner: usize,
    capacity: usize,
    data: VecDeque<ReplayTransition>,
}

impl ReplayBuffer {
    pub fn new(owner: usize, capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(DiceError::Config("replay buffer capacity must be >= 1".into()));
        }
        Ok(ReplayBuffer {
            owner,
            capacity,
            data: VecDeque::with_capacity(capacity.min(1 << 16)),
        })
    }

    pub fn owner(&self) -> usize {
        self.owner
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Appends a transition, evicting the oldest one when full. The stored
    /// copy is re-tagged with this buffer's owner.
    pub fn push(&mut self, mut t: ReplayTransition) {
        t.owner = self.owner;
        if self.data.len() == self.capacity {
            self.data.pop_front();
        }
        self.data.push_back(t);
    }

    pub fn iter(&self) -> impl Iterator<Item = &ReplayTransition> {
        self.data.iter()
    }

    /// `n` uniform draws with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<ReplayTransition>> {
        if self.data.is_empty() && n > 0 {
            return Err(DiceError::Contract(format!("sampling from empty buffer of agent {}", self.owner)));
        }
        Ok((0..n).map(|_| self.data[rng.gen_range(0..self.data.len())].clone()).collect())
    }
}

/// How agents share experience.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShareMode {
    /// One batch drawn from all buffers, consumed by every agent.
    ShareBatch,
    /// Every agent draws its own batch from all buffers.
    ShareBuffer,
    /// Every agent samples only from its own buffer.
    Independent,
}

fn ready(buffers: &[ReplayBuffer], shares: &[usize]) -> bool {
    buffers.iter().zip(shares).all(|(b, &n)| b.len() >= n.max(1))
}

/// `N` transitions composed of `split_budget(N, K)[j]` uniform draws from
/// buffer `j`, concatenated in buffer order. `None` while any buffer holds
/// fewer entries than its share.
pub fn sample_share_batch<R: Rng + ?Sized>(
    buffers: &[ReplayBuffer],
    total: usize,
    rng: &mut R,
) -> Result<Option<Vec<ReplayTransition>>> {
    if buffers.is_empty() {
        return Err(DiceError::Contract("no replay buffers".into()));
    }
    let shares = split_budget(total, buffers.len());
    if !ready(buffers, &shares) {
        return Ok(None);
    }
    let mut batch = Vec::with_capacity(total);
    for (buffer, &n) in buffers.iter().zip(&shares) {
        batch.extend(buffer.sample(n, rng)?);
    }
    Ok(Some(batch))
}

/// A personal batch for one agent with the same owner composition as
/// [`sample_share_batch`], drawn with that agent's generator.
pub fn sample_share_buffer<R: Rng + ?Sized>(
    buffers: &[ReplayBuffer],
    agent: usize,
    total: usize,
    rng: &mut R,
) -> Result<Option<Vec<ReplayTransition>>> {
    if agent >= buffers.len() {
        return Err(DiceError::Contract(format!("agent {agent} out of range")));
    }
    sample_share_batch(buffers, total, rng)
}
