//! Delayed-update target policies and the diversity signal.
//!
//! The diversity reward of agent `k` at state `s` compares `k`'s live
//! action summary (Gaussian mean, or action probabilities for categorical
//! heads) against every delayed target policy of the team, `k`'s own target
//! included:
//!
//! ```text
//! r_d(s) = 1/K · Σ_j ||μ_k(s) − μ̄_j(s)||²
//! ```
//!
//! With `exclude_self` the sum skips `j = k` and divides by `K − 1`.

use serde::{Deserialize, Serialize};

use crate::error::{DiceError, Result};
use crate::numerics::{OptimizerState, ParamVector, PolicyNet, ValueNet};
use crate::rollout::gae;

/// Default Polyak coefficient for delayed targets.
pub const DEFAULT_TAU: f64 = 0.005;

/// `(1 − τ)·target + τ·latest`, element-wise.
pub fn polyak_update(target: &ParamVector, latest: &ParamVector, tau: f64) -> Result<ParamVector> {
    latest.check_len("polyak update", target.len())?;
    if !(0.0..=1.0).contains(&tau) {
        return Err(DiceError::Config(format!("polyak coefficient must lie in [0, 1], got {tau}")));
    }
    Ok(ParamVector::from_vec(
        target
            .iter()
            .zip(latest.iter())
            .map(|(t, l)| (1.0 - tau) * t + tau * l)
            .collect(),
    ))
}

/// One delayed copy of each agent's policy.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetPolicySet {
    targets: Vec<PolicyNet>,
    pub tau: f64,
}

impl TargetPolicySet {
    /// Targets start as exact copies of the live policies.
    pub fn new(live: &[PolicyNet], tau: f64) -> Self {
        TargetPolicySet {
            targets: live.to_vec(),
            tau,
        }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn get(&self, k: usize) -> &PolicyNet {
        &self.targets[k]
    }

    pub fn iter(&self) -> impl Iterator<Item = &PolicyNet> {
        self.targets.iter()
    }

    /// Polyak-averages every target towards its live policy.
    pub fn update(&mut self, live: &[PolicyNet]) -> Result<()> {
        if live.len() != self.targets.len() {
            return Err(DiceError::dim("target policy set", self.targets.len(), live.len()));
        }
        for (target, policy) in self.targets.iter_mut().zip(live) {
            let next = polyak_update(target.params(), policy.params(), self.tau)?;
            target.set_params(next)?;
        }
        Ok(())
    }

    /// Replaces every target with its live policy (delayed update disabled).
    pub fn sync(&mut self, live: &[PolicyNet]) {
        self.targets = live.to_vec();
    }

    /// Action summaries of all targets at `obs`.
    pub fn summaries(&self, obs: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.targets
            .iter()
            .map(|t| Ok(t.forward(obs)?.behavior_summary()))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiversityOptions {
    /// Skip agent `k`'s own target and divide by `K − 1`.
    #[serde(default)]
    pub exclude_self: bool,
    /// Divide each squared distance by the action dimension.
    #[serde(default)]
    pub per_dim_mean: bool,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Diversity reward from precomputed summaries. Returns the reward and its
/// gradient with respect to the live summary.
pub fn diversity_from_summaries(
    k: usize,
    live: &[f64],
    targets: &[Vec<f64>],
    opts: DiversityOptions,
) -> (f64, Vec<f64>) {
    let dim_scale = if opts.per_dim_mean { 1.0 / live.len() as f64 } else { 1.0 };
    let mut total = 0.0;
    let mut grad = vec![0.0; live.len()];
    let mut count = 0usize;
    for (j, target) in targets.iter().enumerate() {
        if opts.exclude_self && j == k {
            continue;
        }
        count += 1;
        total += sq_dist(live, target);
        for (g, (l, t)) in grad.iter_mut().zip(live.iter().zip(target)) {
            *g += 2.0 * (l - t);
        }
    }
    if count == 0 {
        return (0.0, grad);
    }
    let scale = dim_scale / count as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    (total * scale, grad)
}

/// Diversity reward of agent `k` at `obs`.
pub fn diversity_reward(
    k: usize,
    obs: &[f64],
    live: &PolicyNet,
    targets: &TargetPolicySet,
    opts: DiversityOptions,
) -> Result<f64> {
    let summary = live.forward(obs)?.behavior_summary();
    Ok(diversity_from_summaries(k, &summary, &targets.summaries(obs)?, opts).0)
}

/// `R_d,t = Σ_{t' ≥ t} γ^{t'−t} r_d(s_t')` within each segment.
pub fn diversity_return(rewards: &[f64], segment_end: &[bool], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut running = 0.0;
    for t in (0..rewards.len()).rev() {
        if segment_end[t] {
            running = 0.0;
        }
        running = rewards[t] + gamma * running;
        out[t] = running;
    }
    out
}

/// Per-transition diversity signal for one consuming agent.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DiversitySignal {
    pub rewards: Vec<f64>,
    pub returns: Vec<f64>,
}

/// Mean squared distance between action summaries over all agent pairs and
/// probe states. Zero for a single agent.
pub fn team_pairwise_diversity(policies: &[PolicyNet], probes: &[Vec<f64>]) -> Result<f64> {
    if policies.len() < 2 || probes.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for obs in probes {
        let summaries: Vec<Vec<f64>> = policies
            .iter()
            .map(|p| Ok(p.forward(obs)?.behavior_summary()))
            .collect::<Result<_>>()?;
        for i in 0..summaries.len() {
            for j in i + 1..summaries.len() {
                total += sq_dist(&summaries[i], &summaries[j]);
                pairs += 1;
            }
        }
    }
    Ok(total / pairs as f64)
}

/// One full-batch regression step of a diversity value network towards
/// `targets`. Returns the mean squared error before the step.
pub fn fit_dvn(dvn: &mut ValueNet, opt: &mut OptimizerState, obs: &[Vec<f64>], targets: &[f64]) -> Result<f64> {
    if obs.len() != targets.len() || obs.is_empty() {
        return Err(DiceError::dim("dvn batch", obs.len(), targets.len()));
    }
    let n = obs.len() as f64;
    let mut grad = vec![0.0; dvn.num_params()];
    let mut loss = 0.0;
    for (x, y) in obs.iter().zip(targets) {
        let (v, trace) = dvn.forward_trace(x)?;
        let err = v - y;
        loss += err * err / n;
        // ascent on −mse
        dvn.backward(&trace, -2.0 * err / n, &mut grad);
    }
    let grad = ParamVector::from_vec(grad);
    let mut params = dvn.params().clone();
    opt.apply(&mut params, &grad)?;
    dvn.set_params(params)?;
    Ok(loss)
}

/// Diversity advantages: GAE over diversity rewards with DVN state values.
pub fn dvn_advantages(
    dvn: &ValueNet,
    obs: &[Vec<f64>],
    next_obs: &[Vec<f64>],
    rewards: &[f64],
    dones: &[bool],
    segment_end: &[bool],
    gamma: f64,
    lambda: f64,
) -> Result<Vec<f64>> {
    let values: Vec<f64> = obs.iter().map(|o| dvn.forward(o)).collect::<Result<_>>()?;
    let mut next_values = vec![0.0; values.len()];
    for i in 0..values.len() {
        next_values[i] = if dones[i] {
            0.0
        } else if segment_end[i] {
            dvn.forward(&next_obs[i])?
        } else {
            values[i + 1]
        };
    }
    Ok(gae(rewards, &values, &next_values, dones, segment_end, gamma, lambda))
}
