//! On-policy team trainer built on a clipped-ratio policy gradient.
//!
//! One iteration:
//! 1. every agent collects its share `n_k` of the `N`-sample budget;
//! 2. each agent computes advantages for its own data with its own value net;
//! 3. the batches are merged into one shared batch (skipped without `use_ce`);
//! 4. diversity rewards and returns are computed against the delayed targets;
//! 5. for `sgd_iters` epochs over shuffled minibatches each agent computes a
//!    task gradient and a diversity gradient, fuses them and takes an ascent
//!    step; each value net regresses on the returns of its own transitions;
//! 6. delayed targets are Polyak-averaged (or synced without `use_du`).

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diversity::{
    diversity_from_summaries, diversity_return, dvn_advantages, team_pairwise_diversity, DiversityOptions,
    DiversitySignal, TargetPolicySet,
};
use crate::envs::{ActionSpace, EnvConfig, Environment};
use crate::error::{DiceError, Result};
use crate::fusion::fuse;
use crate::harness::seeding::{derive_seed, stream_rng, Stream};
use crate::numerics::{
    clip_grad_norm, HeadGrad, HeadKind, OptimizerKind, OptimizerState, ParamVector, PolicyNet, ValueNet,
};
use crate::rollout::{collect, merge_team_batches, normalize_advantages, split_budget, EnvRunner, TrajectoryBatch, Transition};

/// `clip(ρ, 0, 1 + ε)·A`: bounded below by `(1 + ε)·A` when `A < 0`.
pub fn tsc_loss(ratio: f64, advantage: f64, eps: f64) -> f64 {
    ratio.clamp(0.0, 1.0 + eps) * advantage
}

/// `min(ρ·A, clip(ρ, 1 − ε, 1 + ε)·A)`.
pub fn ppo_clip_loss(ratio: f64, advantage: f64, eps: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - eps, 1.0 + eps) * advantage)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateKind {
    TwoSideClip,
    PpoClip,
}

impl SurrogateKind {
    pub fn value(self, ratio: f64, advantage: f64, eps: f64) -> f64 {
        match self {
            SurrogateKind::TwoSideClip => tsc_loss(ratio, advantage, eps),
            SurrogateKind::PpoClip => ppo_clip_loss(ratio, advantage, eps),
        }
    }

    /// Derivative with respect to the ratio.
    pub fn d_ratio(self, ratio: f64, advantage: f64, eps: f64) -> f64 {
        match self {
            SurrogateKind::TwoSideClip => {
                if ratio > 0.0 && ratio < 1.0 + eps {
                    advantage
                } else {
                    0.0
                }
            }
            SurrogateKind::PpoClip => {
                let clipped = ratio.clamp(1.0 - eps, 1.0 + eps);
                if ratio * advantage <= clipped * advantage {
                    advantage
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OnPolicyConfig {
    /// Team size `K`.
    pub agents: usize,
    /// Total samples per iteration `N` (split over the agents).
    pub train_batch: usize,
    pub minibatch: usize,
    pub sgd_iters: usize,
    pub clip_eps: f64,
    /// Fixed coefficient of the `KL(behavior || current)` penalty.
    pub kl_coeff: f64,
    pub entropy_coeff: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub tau: f64,
    pub lr: f64,
    pub value_lr: f64,
    pub optimizer: OptimizerKind,
    /// L2 cap on the fused policy gradient (and on value gradients).
    pub max_grad_norm: Option<f64>,
    pub hidden: usize,
    pub policy_output_gain: f64,
    pub init_log_std: f64,
    pub use_tsc: bool,
    pub use_ce: bool,
    pub use_dr: bool,
    pub use_dvn: bool,
    pub use_na: bool,
    pub use_du: bool,
    /// All agents start from agent 0's initial parameters.
    pub identical_init: bool,
    pub diversity: DiversityOptions,
    /// Floor the fused gradient magnitude at zero.
    pub fusion_floor: bool,
    /// Completed episodes averaged into each agent's reported return.
    pub metrics_window: usize,
}

impl Default for OnPolicyConfig {
    fn default() -> Self {
        OnPolicyConfig {
            agents: 5,
            train_batch: 512,
            minibatch: 64,
            sgd_iters: 10,
            clip_eps: 0.2,
            kl_coeff: 0.2,
            entropy_coeff: 0.0,
            gamma: 0.99,
            lambda: 1.0,
            tau: 0.005,
            lr: 1e-4,
            value_lr: 1e-3,
            optimizer: OptimizerKind::Sga,
            max_grad_norm: Some(10.0),
            hidden: 64,
            policy_output_gain: 0.1,
            init_log_std: 0.0,
            use_tsc: true,
            use_ce: true,
            use_dr: true,
            use_dvn: false,
            use_na: false,
            use_du: true,
            identical_init: false,
            diversity: DiversityOptions::default(),
            fusion_floor: false,
            metrics_window: 10,
        }
    }
}

impl OnPolicyConfig {
    /// Full-size settings: 256-unit layers, `N = 2048`, KL coefficient 1.0.
    pub fn paper_scale() -> Self {
        OnPolicyConfig {
            train_batch: 2048,
            kl_coeff: 1.0,
            hidden: 256,
            value_lr: 1e-4,
            ..Default::default()
        }
    }

    /// Single-agent PPO baseline: one agent, no diversity, standard clip.
    pub fn single_agent_ppo(&self) -> Self {
        OnPolicyConfig {
            agents: 1,
            use_dr: false,
            use_tsc: false,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(DiceError::Config(msg));
        if self.agents == 0 {
            return fail("onpolicy.agents must be >= 1".into());
        }
        if self.train_batch < self.agents {
            return fail(format!(
                "onpolicy.train_batch ({}) must be >= agents ({})",
                self.train_batch, self.agents
            ));
        }
        if self.minibatch == 0 || self.minibatch > self.train_batch {
            return fail(format!("onpolicy.minibatch must lie in [1, {}]", self.train_batch));
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.lambda) {
            return fail("onpolicy.gamma and onpolicy.lambda must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return fail("onpolicy.tau must lie in [0, 1]".into());
        }
        if self.clip_eps < 0.0 || self.lr < 0.0 || self.value_lr < 0.0 || self.hidden == 0 {
            return fail("onpolicy: clip_eps, lr and value_lr must be >= 0 and hidden >= 1".into());
        }
        if self.use_na && self.train_batch < 2 {
            return fail("advantage normalization needs train_batch >= 2".into());
        }
        Ok(())
    }

    pub fn objective_params(&self) -> ObjectiveParams {
        ObjectiveParams {
            surrogate: if self.use_tsc {
                SurrogateKind::TwoSideClip
            } else {
                SurrogateKind::PpoClip
            },
            clip_eps: self.clip_eps,
            kl_coeff: self.kl_coeff,
            entropy_coeff: self.entropy_coeff,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveParams {
    pub surrogate: SurrogateKind,
    pub clip_eps: f64,
    pub kl_coeff: f64,
    pub entropy_coeff: f64,
}

/// One training sample as seen by a consuming agent.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub transition: &'a Transition,
    /// Owner-computed task advantage.
    pub advantage: f64,
    /// Diversity return (or diversity advantage) for the consuming agent.
    pub diversity: f64,
    /// Weight in the batch objective.
    pub weight: f64,
}

/// Objective values, gradients and ratio diagnostics over a set of samples.
#[derive(Debug, Clone)]
pub struct ObjectiveEval {
    pub task: f64,
    pub diversity: f64,
    pub g_task: ParamVector,
    pub g_div: Option<ParamVector>,
    pub ratio_sum: f64,
    pub ratio_max: f64,
    pub kl_sum: f64,
    pub entropy_sum: f64,
    pub count: usize,
}

/// Weights `1 / (K · n_j)` for a sample owned by `j`, where `K` counts the
/// owners present and `n_j` the samples of owner `j`: the mean over owners of
/// each owner's sample mean.
pub fn owner_weights<'a>(transitions: impl IntoIterator<Item = &'a Transition>) -> Vec<f64> {
    let owners: Vec<usize> = transitions.into_iter().map(|t| t.owner).collect();
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &o in &owners {
        *counts.entry(o).or_default() += 1;
    }
    let k = counts.len() as f64;
    owners.iter().map(|o| 1.0 / (k * counts[o] as f64)).collect()
}

/// Task objective `Σ w·[surrogate(ρ, A) − β·KL(behavior || π) + c·H(π)]` and
/// diversity objective `Σ w·surrogate(ρ, R_d)`, with gradients.
pub fn policy_objectives(
    policy: &PolicyNet,
    samples: &[Sample<'_>],
    params: &ObjectiveParams,
    with_diversity: bool,
) -> Result<ObjectiveEval> {
    let n_params = policy.num_params();
    let mut g_task = vec![0.0; n_params];
    let mut g_div = if with_diversity { Some(vec![0.0; n_params]) } else { None };
    let mut eval = ObjectiveEval {
        task: 0.0,
        diversity: 0.0,
        g_task: ParamVector::zeros(0),
        g_div: None,
        ratio_sum: 0.0,
        ratio_max: 0.0,
        kl_sum: 0.0,
        entropy_sum: 0.0,
        count: samples.len(),
    };
    let eps = params.clip_eps;
    for s in samples {
        let t = s.transition;
        let (head, trace) = policy.forward_trace(&t.obs)?;
        let log_prob = head.log_prob(&t.action);
        let ratio = (log_prob - t.behavior_log_prob).exp();
        eval.ratio_sum += ratio;
        eval.ratio_max = eval.ratio_max.max(ratio);
        let kl = head.kl_from(&t.behavior);
        let entropy = head.entropy();
        eval.kl_sum += kl;
        eval.entropy_sum += entropy;
        if ratio.is_nan() || ratio.is_infinite() {
            return Err(DiceError::NonFinite {
                what: format!("probability ratio ({ratio})"),
                agent: None,
            });
        }

        let surrogate = params.surrogate.value(ratio, s.advantage, eps);
        eval.task += s.weight * (surrogate - params.kl_coeff * kl + params.entropy_coeff * entropy);

        let log_prob_grad = head.log_prob_grad(&t.action);
        let d_ratio = params.surrogate.d_ratio(ratio, s.advantage, eps);
        let mut up = HeadGrad::zeros_like(&head);
        if d_ratio != 0.0 {
            up.add_scaled(s.weight * d_ratio * ratio, &log_prob_grad);
        }
        if params.kl_coeff != 0.0 {
            up.add_scaled(-s.weight * params.kl_coeff, &head.kl_from_grad(&t.behavior));
        }
        if params.entropy_coeff != 0.0 {
            up.add_scaled(s.weight * params.entropy_coeff, &head.entropy_grad());
        }
        policy.backward(&trace, &up, &mut g_task);

        if let Some(g_div) = g_div.as_mut() {
            eval.diversity += s.weight * params.surrogate.value(ratio, s.diversity, eps);
            let d_ratio = params.surrogate.d_ratio(ratio, s.diversity, eps);
            if d_ratio != 0.0 {
                let mut up = HeadGrad::zeros_like(&head);
                up.add_scaled(s.weight * d_ratio * ratio, &log_prob_grad);
                policy.backward(&trace, &up, g_div);
            }
        }
    }
    eval.g_task = ParamVector::from_vec(g_task);
    eval.g_div = g_div.map(ParamVector::from_vec);
    Ok(eval)
}

/// Owner-weighted task objective of `policy` over a whole (shared) batch.
pub fn ce_task_objective(policy: &PolicyNet, batch: &TrajectoryBatch, advantages: &[f64], cfg: &OnPolicyConfig) -> Result<f64> {
    let weights = owner_weights(&batch.transitions);
    let samples: Vec<Sample> = batch
        .transitions
        .iter()
        .zip(advantages)
        .zip(&weights)
        .map(|((t, &a), &w)| Sample {
            transition: t,
            advantage: a,
            diversity: 0.0,
            weight: w,
        })
        .collect();
    Ok(policy_objectives(policy, &samples, &cfg.objective_params(), false)?.task)
}

/// Owner-weighted diversity objective: the task surrogate with the advantage
/// replaced by the diversity return.
pub fn diversity_objective(
    policy: &PolicyNet,
    batch: &TrajectoryBatch,
    diversity_returns: &[f64],
    cfg: &OnPolicyConfig,
) -> Result<f64> {
    let weights = owner_weights(&batch.transitions);
    let samples: Vec<Sample> = batch
        .transitions
        .iter()
        .zip(diversity_returns)
        .zip(&weights)
        .map(|((t, &d), &w)| Sample {
            transition: t,
            advantage: 0.0,
            diversity: d,
            weight: w,
        })
        .collect();
    Ok(policy_objectives(policy, &samples, &cfg.objective_params(), true)?.diversity)
}

/// Per-iteration diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationMetrics {
    pub iteration: u64,
    pub env_steps: u64,
    /// Mean return of each agent's most recent completed episodes (NaN before
    /// the first one).
    pub agent_returns: Vec<f64>,
    /// Maximum of `agent_returns`, re-selected at every iteration.
    pub best_agent_return: f64,
    /// Return of the agent with the highest mean over all iterations so far.
    pub best_fixed_return: f64,
    pub diversity_mean: f64,
    pub pairwise_diversity: f64,
    pub entropy: f64,
    pub ratio_mean: f64,
    pub ratio_max: f64,
    /// Mean cosine between task and diversity gradients (NaN without DR).
    pub grad_cosine: f64,
    /// Fraction of fused updates whose diversity projection was capped.
    pub clip_fraction: f64,
    pub kl_mean: f64,
    pub task_objective: f64,
    pub value_loss: f64,
}

pub(crate) fn max_ignoring_nan(values: &[f64]) -> f64 {
    values
        .iter()
        .cloned()
        .filter(|v| !v.is_nan())
        .fold(f64::NAN, |a, b| if a.is_nan() || b > a { b } else { a })
}

pub(crate) fn window_mean(values: &[f64], window: usize) -> f64 {
    let tail = &values[values.len().saturating_sub(window.max(1))..];
    if tail.is_empty() {
        f64::NAN
    } else {
        tail.iter().sum::<f64>() / tail.len() as f64
    }
}

/// Tracks which agent is best over a whole run.
#[derive(Debug, Clone, Default)]
pub(crate) struct BestTracker {
    sums: Vec<f64>,
    counts: Vec<usize>,
}

impl BestTracker {
    pub(crate) fn record(&mut self, returns: &[f64]) -> f64 {
        if self.sums.len() != returns.len() {
            self.sums = vec![0.0; returns.len()];
            self.counts = vec![0; returns.len()];
        }
        for (i, r) in returns.iter().enumerate() {
            if !r.is_nan() {
                self.sums[i] += r;
                self.counts[i] += 1;
            }
        }
        let mut best: Option<(usize, f64)> = None;
        for i in 0..returns.len() {
            if self.counts[i] == 0 {
                continue;
            }
            let mean = self.sums[i] / self.counts[i] as f64;
            if best.map_or(true, |(_, m)| mean > m) {
                best = Some((i, mean));
            }
        }
        best.map_or(f64::NAN, |(i, _)| returns[i])
    }
}

#[derive(Debug, Clone)]
pub struct OnPolicyAgent {
    pub policy: PolicyNet,
    pub value: ValueNet,
    pub dvn: Option<ValueNet>,
    policy_opt: OptimizerState,
    value_opt: OptimizerState,
    dvn_opt: OptimizerState,
    runner: EnvRunner,
    rng: ChaCha8Rng,
}

impl OnPolicyAgent {
    pub fn runner(&self) -> &EnvRunner {
        &self.runner
    }
}

#[derive(Debug, Clone)]
pub struct OnPolicyTrainer {
    cfg: OnPolicyConfig,
    agents: Vec<OnPolicyAgent>,
    targets: TargetPolicySet,
    shuffle_rng: ChaCha8Rng,
    budget: Vec<usize>,
    iteration: u64,
    env_steps: u64,
    best: BestTracker,
}

struct UpdateStats {
    ratio_sum: f64,
    ratio_max: f64,
    ratio_count: usize,
    kl_sum: f64,
    entropy_sum: f64,
    cosine_sum: f64,
    fusions: usize,
    clipped: usize,
    task_sum: f64,
    task_count: usize,
    value_loss_sum: f64,
    value_count: usize,
}

impl UpdateStats {
    fn new() -> Self {
        UpdateStats {
            ratio_sum: 0.0,
            ratio_max: 0.0,
            ratio_count: 0,
            kl_sum: 0.0,
            entropy_sum: 0.0,
            cosine_sum: 0.0,
            fusions: 0,
            clipped: 0,
            task_sum: 0.0,
            task_count: 0,
            value_loss_sum: 0.0,
            value_count: 0,
        }
    }
}

fn head_for(action: &ActionSpace) -> HeadKind {
    match action {
        ActionSpace::Box { low, .. } => HeadKind::gaussian(low.len()),
        ActionSpace::Discrete(n) => HeadKind::Categorical { n: *n },
    }
}

fn non_finite(what: impl Into<String>, agent: usize) -> DiceError {
    DiceError::NonFinite {
        what: what.into(),
        agent: Some(agent),
    }
}

impl OnPolicyTrainer {
    pub fn new(cfg: OnPolicyConfig, env_cfg: &EnvConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let probe_env = env_cfg.build()?;
        let spec = probe_env.spec().clone();
        let head = head_for(&spec.action);
        let mut agents = Vec::with_capacity(cfg.agents);
        for k in 0..cfg.agents {
            let init_index = if cfg.identical_init { 0 } else { k as u64 };
            let policy = PolicyNet::new(
                spec.obs_dim,
                cfg.hidden,
                head.clone(),
                cfg.policy_output_gain,
                cfg.init_log_std,
                &mut stream_rng(seed, Stream::PolicyInit, init_index),
            )?;
            let value = ValueNet::new(spec.obs_dim, cfg.hidden, &mut stream_rng(seed, Stream::ValueInit, init_index))?;
            let dvn = if cfg.use_dvn {
                Some(ValueNet::new(spec.obs_dim, cfg.hidden, &mut stream_rng(seed, Stream::DvnInit, init_index))?)
            } else {
                None
            };
            let runner = EnvRunner::new(env_cfg.build()?, derive_seed(seed, Stream::EnvReset, k as u64));
            agents.push(OnPolicyAgent {
                policy,
                value,
                dvn,
                policy_opt: OptimizerState::new(cfg.optimizer, cfg.lr),
                value_opt: OptimizerState::new(cfg.optimizer, cfg.value_lr),
                dvn_opt: OptimizerState::new(cfg.optimizer, cfg.value_lr),
                runner,
                rng: stream_rng(seed, Stream::Rollout, k as u64),
            });
        }
        let live: Vec<PolicyNet> = agents.iter().map(|a| a.policy.clone()).collect();
        let targets = TargetPolicySet::new(&live, cfg.tau);
        Ok(OnPolicyTrainer {
            budget: split_budget(cfg.train_batch, cfg.agents),
            shuffle_rng: stream_rng(seed, Stream::Shuffle, 0),
            cfg,
            agents,
            targets,
            iteration: 0,
            env_steps: 0,
            best: BestTracker::default(),
        })
    }

    pub fn config(&self) -> &OnPolicyConfig {
        &self.cfg
    }

    pub fn agents(&self) -> &[OnPolicyAgent] {
        &self.agents
    }

    pub fn targets(&self) -> &TargetPolicySet {
        &self.targets
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    pub fn policies(&self) -> Vec<PolicyNet> {
        self.agents.iter().map(|a| a.policy.clone()).collect()
    }

    /// Collects and post-processes every agent's batch (steps 1-2).
    pub fn collect_team(&mut self) -> Result<Vec<TrajectoryBatch>> {
        let mut batches = Vec::with_capacity(self.agents.len());
        for (k, agent) in self.agents.iter_mut().enumerate() {
            let mut batch = collect(&agent.policy, &mut agent.runner, self.budget[k], k, &mut agent.rng)?;
            batch.compute_advantages(&agent.value, self.cfg.gamma, self.cfg.lambda)?;
            if batch.advantages.iter().chain(&batch.returns).any(|v| !v.is_finite()) {
                return Err(non_finite("advantages", k));
            }
            batches.push(batch);
        }
        Ok(batches)
    }

    /// Diversity rewards and returns (or DVN advantages) of agent `k` over `batch`.
    fn diversity_signal(&self, k: usize, batch: &TrajectoryBatch, target_summaries: &[Vec<Vec<f64>>]) -> Result<DiversitySignal> {
        let policy = &self.agents[k].policy;
        let mut rewards = Vec::with_capacity(batch.len());
        for (t, targets) in batch.transitions.iter().zip(target_summaries) {
            let live = policy.forward(&t.obs)?.behavior_summary();
            rewards.push(diversity_from_summaries(k, &live, targets, self.cfg.diversity).0);
        }
        if rewards.iter().any(|r| !r.is_finite()) {
            return Err(non_finite("diversity reward", k));
        }
        let returns = match &self.agents[k].dvn {
            Some(dvn) => {
                let obs: Vec<Vec<f64>> = batch.transitions.iter().map(|t| t.obs.clone()).collect();
                let next: Vec<Vec<f64>> = batch.transitions.iter().map(|t| t.next_obs.clone()).collect();
                let dones: Vec<bool> = batch.transitions.iter().map(|t| t.done).collect();
                dvn_advantages(dvn, &obs, &next, &rewards, &dones, &batch.segment_end, self.cfg.gamma, self.cfg.lambda)?
            }
            None => diversity_return(&rewards, &batch.segment_end, self.cfg.gamma),
        };
        Ok(DiversitySignal { rewards, returns })
    }

    /// Runs one full training iteration. A non-finite objective, gradient or
    /// ratio aborts with [`DiceError::NonFinite`].
    pub fn train_iteration(&mut self) -> Result<IterationMetrics> {
        let k_agents = self.agents.len();
        let batches = self.collect_team()?;
        let collected: u64 = batches.iter().map(|b| b.len() as u64).sum();
        self.env_steps += collected;

        // training data per agent
        let shared;
        let views: Vec<&TrajectoryBatch> = if self.cfg.use_ce {
            shared = merge_team_batches(&batches)?;
            vec![&shared; k_agents]
        } else {
            batches.iter().collect()
        };

        // diversity signals against the iteration-start targets
        let mut signals = Vec::with_capacity(k_agents);
        let mut target_cache: Option<(*const TrajectoryBatch, Vec<Vec<Vec<f64>>>)> = None;
        for (k, view) in views.iter().enumerate() {
            let ptr = *view as *const TrajectoryBatch;
            let summaries = match &target_cache {
                Some((p, s)) if *p == ptr => s.clone(),
                _ => {
                    let s: Vec<Vec<Vec<f64>>> = view
                        .transitions
                        .iter()
                        .map(|t| self.targets.summaries(&t.obs))
                        .collect::<Result<_>>()?;
                    target_cache = Some((ptr, s.clone()));
                    s
                }
            };
            signals.push(self.diversity_signal(k, view, &summaries)?);
        }
        let diversity_mean = signals
            .iter()
            .map(|s| s.rewards.iter().sum::<f64>() / s.rewards.len() as f64)
            .sum::<f64>()
            / k_agents as f64;

        let advantages: Vec<Vec<f64>> = views
            .iter()
            .map(|v| {
                if self.cfg.use_na {
                    normalize_advantages(&v.advantages)
                } else {
                    Ok(v.advantages.clone())
                }
            })
            .collect::<Result<_>>()?;

        // one permutation per epoch; shared by all agents when the batch is shared
        let perm_sets: Vec<Vec<Vec<usize>>> = if self.cfg.use_ce {
            let perms: Vec<Vec<usize>> = (0..self.cfg.sgd_iters)
                .map(|_| {
                    let mut p: Vec<usize> = (0..views[0].len()).collect();
                    p.shuffle(&mut self.shuffle_rng);
                    p
                })
                .collect();
            vec![perms; k_agents]
        } else {
            views
                .iter()
                .map(|v| {
                    (0..self.cfg.sgd_iters)
                        .map(|_| {
                            let mut p: Vec<usize> = (0..v.len()).collect();
                            p.shuffle(&mut self.shuffle_rng);
                            p
                        })
                        .collect()
                })
                .collect()
        };

        let mut stats = UpdateStats::new();
        let params = self.cfg.objective_params();
        for k in 0..k_agents {
            let view = views[k];
            for perm in &perm_sets[k] {
                for chunk in perm.chunks(self.cfg.minibatch) {
                    self.update_minibatch(k, view, chunk, &advantages[k], &signals[k], &params, &mut stats)?;
                }
            }
        }

        let live = self.policies();
        if self.cfg.use_du {
            self.targets.update(&live)?;
        } else {
            self.targets.sync(&live);
        }
        self.iteration += 1;

        let agent_returns: Vec<f64> = self
            .agents
            .iter()
            .map(|a| window_mean(a.runner.completed_returns(), self.cfg.metrics_window))
            .collect();
        let probes: Vec<Vec<f64>> = batches
            .iter()
            .flat_map(|b| b.transitions.iter().step_by((b.len() / 16).max(1)).map(|t| t.obs.clone()))
            .collect();
        let entropy = if stats.ratio_count > 0 {
            stats.entropy_sum / stats.ratio_count as f64
        } else {
            f64::NAN
        };
        Ok(IterationMetrics {
            iteration: self.iteration,
            env_steps: self.env_steps,
            best_agent_return: max_ignoring_nan(&agent_returns),
            best_fixed_return: self.best.record(&agent_returns),
            agent_returns,
            diversity_mean,
            pairwise_diversity: team_pairwise_diversity(&live, &probes)?,
            entropy,
            ratio_mean: stats.ratio_sum / stats.ratio_count.max(1) as f64,
            ratio_max: stats.ratio_max,
            grad_cosine: if stats.fusions > 0 {
                stats.cosine_sum / stats.fusions as f64
            } else {
                f64::NAN
            },
            clip_fraction: if stats.fusions > 0 {
                stats.clipped as f64 / stats.fusions as f64
            } else {
                0.0
            },
            kl_mean: stats.kl_sum / stats.ratio_count.max(1) as f64,
            task_objective: stats.task_sum / stats.task_count.max(1) as f64,
            value_loss: stats.value_loss_sum / stats.value_count.max(1) as f64,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn update_minibatch(
        &mut self,
        k: usize,
        view: &TrajectoryBatch,
        indices: &[usize],
        advantages: &[f64],
        signal: &DiversitySignal,
        params: &ObjectiveParams,
        stats: &mut UpdateStats,
    ) -> Result<()> {
        let weights = owner_weights(indices.iter().map(|&i| &view.transitions[i]));
        let samples: Vec<Sample> = indices
            .iter()
            .zip(&weights)
            .map(|(&i, &w)| Sample {
                transition: &view.transitions[i],
                advantage: advantages[i],
                diversity: signal.returns[i],
                weight: w,
            })
            .collect();
        let agent = &mut self.agents[k];
        let eval = policy_objectives(&agent.policy, &samples, params, self.cfg.use_dr).map_err(|e| match e {
            DiceError::NonFinite { what, .. } => non_finite(what, k),
            other => other,
        })?;
        stats.ratio_sum += eval.ratio_sum;
        stats.ratio_max = stats.ratio_max.max(eval.ratio_max);
        stats.ratio_count += eval.count;
        stats.kl_sum += eval.kl_sum;
        stats.entropy_sum += eval.entropy_sum;
        stats.task_sum += eval.task;
        stats.task_count += 1;
        if !eval.task.is_finite() || !eval.g_task.is_finite() {
            return Err(non_finite("task objective", k));
        }
        let mut g_final = match &eval.g_div {
            Some(g_div) => {
                if !eval.diversity.is_finite() || !g_div.is_finite() {
                    return Err(non_finite("diversity objective", k));
                }
                let fused = fuse(&eval.g_task, g_div, self.cfg.fusion_floor)?;
                stats.fusions += 1;
                stats.cosine_sum += fused.cosine;
                stats.clipped += usize::from(fused.clipped);
                fused.g_final
            }
            None => eval.g_task,
        };
        if let Some(max_norm) = self.cfg.max_grad_norm {
            clip_grad_norm(&mut g_final, max_norm);
        }
        let mut policy_params = agent.policy.params().clone();
        agent
            .policy_opt
            .apply(&mut policy_params, &g_final)
            .map_err(|_| non_finite("fused policy gradient", k))?;
        if !policy_params.is_finite() {
            return Err(non_finite("policy parameters", k));
        }
        agent.policy.set_params(policy_params)?;

        // value regression on the agent's own transitions
        let own: Vec<usize> = indices.iter().cloned().filter(|&i| view.transitions[i].owner == k).collect();
        if own.is_empty() {
            return Ok(());
        }
        let n = own.len() as f64;
        let mut g_value = vec![0.0; agent.value.num_params()];
        let mut loss = 0.0;
        for &i in &own {
            let (v, trace) = agent.value.forward_trace(&view.transitions[i].obs)?;
            let err = v - view.returns[i];
            loss += err * err / n;
            agent.value.backward(&trace, -2.0 * err / n, &mut g_value);
        }
        if !loss.is_finite() {
            return Err(non_finite("value loss", k));
        }
        stats.value_loss_sum += loss;
        stats.value_count += 1;
        let mut g_value = ParamVector::from_vec(g_value);
        if let Some(max_norm) = self.cfg.max_grad_norm {
            clip_grad_norm(&mut g_value, max_norm);
        }
        let mut value_params = agent.value.params().clone();
        agent
            .value_opt
            .apply(&mut value_params, &g_value)
            .map_err(|_| non_finite("value gradient", k))?;
        agent.value.set_params(value_params)?;

        if let Some(dvn) = agent.dvn.as_mut() {
            let obs: Vec<Vec<f64>> = indices.iter().map(|&i| view.transitions[i].obs.clone()).collect();
            let raw_returns = diversity_return(&signal.rewards, &view.segment_end, self.cfg.gamma);
            let targets: Vec<f64> = indices.iter().map(|&i| raw_returns[i]).collect();
            crate::diversity::fit_dvn(dvn, &mut agent.dvn_opt, &obs, &targets).map_err(|e| match e {
                DiceError::NonFinite { .. } => non_finite("diversity value network", k),
                other => other,
            })?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::EnvName;
    use crate::numerics::{sample_action, Action, HeadOutput};
    use proptest::prelude::*;
    use rand::SeedableRng;

    #[test]
    fn tsc_examples() {
        assert_eq!(tsc_loss(1.0, 1.0, 0.2), 1.0);
        assert!((tsc_loss(2.0, -1.0, 0.2) + 1.2).abs() < 1e-15);
        assert_eq!(tsc_loss(0.0, 5.0, 0.2), 0.0);
    }

    #[test]
    fn ppo_clip_examples() {
        assert_eq!(ppo_clip_loss(1.0, 0.7, 0.2), 0.7);
        assert!((ppo_clip_loss(1.5, 1.0, 0.2) - 1.2).abs() < 1e-15);
        assert_eq!(ppo_clip_loss(2.0, -1.0, 0.2), -2.0);
    }

    #[test]
    fn surrogate_derivatives_match_finite_differences() {
        let h = 1e-7;
        for kind in [SurrogateKind::TwoSideClip, SurrogateKind::PpoClip] {
            for &(r, a) in &[(0.5, 1.0), (0.9, -2.0), (1.1, 0.3), (1.5, 1.0), (1.5, -1.0), (0.6, -1.0), (0.6, 1.0)] {
                let fd = (kind.value(r + h, a, 0.2) - kind.value(r - h, a, 0.2)) / (2.0 * h);
                assert!((fd - kind.d_ratio(r, a, 0.2)).abs() < 1e-6, "{kind:?} r={r} a={a}");
            }
        }
    }

    #[test]
    fn owner_weights_average_owner_means() {
        let mk = |owner| Transition {
            obs: vec![0.0],
            action: Action::Discrete(0),
            reward: 0.0,
            next_obs: vec![0.0],
            done: false,
            behavior_log_prob: 0.0,
            behavior: HeadOutput::Categorical { logits: vec![0.0] },
            owner,
        };
        let ts = vec![mk(0), mk(0), mk(0), mk(1)];
        let w = owner_weights(&ts);
        assert_eq!(w, vec![1.0 / 6.0, 1.0 / 6.0, 1.0 / 6.0, 0.5]);
        let single = owner_weights(&ts[..3]);
        assert_eq!(single, vec![1.0 / 3.0; 3]);
    }

    fn line_batch(k_owners: usize, per_owner: usize, seed: u64) -> (PolicyNet, TrajectoryBatch) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let policy = PolicyNet::new(1, 8, HeadKind::gaussian(1), 1.0, -0.3, &mut rng).unwrap();
        let mut batch = TrajectoryBatch {
            env_name: "line_return".into(),
            obs_dim: 1,
            ..Default::default()
        };
        for owner in 0..k_owners {
            let behavior = PolicyNet::new(1, 8, HeadKind::gaussian(1), 1.0, -0.3, &mut rng).unwrap();
            for i in 0..per_owner {
                let head = behavior.forward(&[1.0]).unwrap();
                let (a, lp) = sample_action(&head, &mut rng);
                batch.transitions.push(Transition {
                    obs: vec![1.0],
                    action: a,
                    reward: 0.0,
                    next_obs: vec![1.0],
                    done: true,
                    behavior_log_prob: lp,
                    behavior: head,
                    owner,
                });
                batch.segment_end.push(true);
                batch.advantages.push((i as f64 - 1.5) * 0.7 + owner as f64);
            }
        }
        (policy, batch)
    }

    #[test]
    fn single_owner_unit_ratio_gives_mean_advantage() {
        let (policy, mut batch) = line_batch(1, 4, 3);
        // behave exactly like the policy: ratio 1
        for t in &mut batch.transitions {
            let head = policy.forward(&t.obs).unwrap();
            t.behavior_log_prob = head.log_prob(&t.action);
            t.behavior = head;
        }
        let cfg = OnPolicyConfig {
            kl_coeff: 0.0,
            ..Default::default()
        };
        let adv = batch.advantages.clone();
        let obj = ce_task_objective(&policy, &batch, &adv, &cfg).unwrap();
        let mean = adv.iter().sum::<f64>() / 4.0;
        assert!((obj - mean).abs() < 1e-12);
    }

    #[test]
    fn equal_owner_counts_average_owner_means() {
        let (policy, batch) = line_batch(2, 3, 4);
        let cfg = OnPolicyConfig::default();
        let adv = batch.advantages.clone();
        let whole = ce_task_objective(&policy, &batch, &adv, &cfg).unwrap();
        let mut halves = 0.0;
        for owner in 0..2 {
            let sub = TrajectoryBatch {
                transitions: batch.transitions[owner * 3..owner * 3 + 3].to_vec(),
                ..Default::default()
            };
            halves += 0.5 * ce_task_objective(&policy, &sub, &adv[owner * 3..owner * 3 + 3], &cfg).unwrap();
        }
        assert!((whole - halves).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(OnPolicyConfig::default().validate().is_ok());
        let bad = OnPolicyConfig {
            train_batch: 3,
            agents: 5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = OnPolicyConfig {
            minibatch: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn iteration_runs_and_counts_steps() {
        let cfg = OnPolicyConfig {
            agents: 3,
            train_batch: 64,
            minibatch: 16,
            sgd_iters: 2,
            hidden: 8,
            ..Default::default()
        };
        let mut trainer = OnPolicyTrainer::new(cfg, &EnvConfig::named(EnvName::PointGoal2d), 0).unwrap();
        let m = trainer.train_iteration().unwrap();
        assert_eq!(m.env_steps, 64);
        assert_eq!(m.agent_returns.len(), 3);
        assert!(m.grad_cosine.is_finite());
        let m = trainer.train_iteration().unwrap();
        assert_eq!(m.env_steps, 128);
    }

    #[test]
    fn discrete_env_trains() {
        let cfg = OnPolicyConfig {
            agents: 2,
            train_batch: 64,
            minibatch: 32,
            sgd_iters: 1,
            hidden: 8,
            ..Default::default()
        };
        let mut trainer = OnPolicyTrainer::new(cfg, &EnvConfig::named(EnvName::GridMaze), 1).unwrap();
        let m = trainer.train_iteration().unwrap();
        assert!(m.diversity_mean >= 0.0);
    }

    #[test]
    fn task_objective_gradient_matches_finite_differences() {
        let (policy, batch) = line_batch(3, 4, 8);
        let cfg = OnPolicyConfig {
            entropy_coeff: 0.05,
            ..Default::default()
        };
        let adv = batch.advantages.clone();
        let weights = owner_weights(&batch.transitions);
        let samples: Vec<Sample> = batch
            .transitions
            .iter()
            .zip(&adv)
            .zip(&weights)
            .map(|((t, &a), &w)| Sample {
                transition: t,
                advantage: a,
                diversity: 0.0,
                weight: w,
            })
            .collect();
        let g = policy_objectives(&policy, &samples, &cfg.objective_params(), false).unwrap().g_task;
        let h = 1e-6;
        let mut err: f64 = 0.0;
        for i in 0..policy.num_params() {
            let mut p = policy.params().clone();
            p[i] += h;
            let up = ce_task_objective(&policy.with_params(p.clone()).unwrap(), &batch, &adv, &cfg).unwrap();
            p[i] -= 2.0 * h;
            let down = ce_task_objective(&policy.with_params(p).unwrap(), &batch, &adv, &cfg).unwrap();
            err = err.max(((up - down) / (2.0 * h) - g[i]).abs());
        }
        assert!(err / g.norm() < 1e-4, "relative error {}", err / g.norm());
    }

    #[test]
    fn identical_team_without_dr_stays_identical() {
        let cfg = OnPolicyConfig {
            agents: 3,
            train_batch: 96,
            minibatch: 32,
            sgd_iters: 2,
            hidden: 8,
            lr: 0.05,
            use_dr: false,
            identical_init: true,
            ..Default::default()
        };
        let mut trainer = OnPolicyTrainer::new(cfg, &EnvConfig::named(EnvName::PointGoal2d), 2).unwrap();
        for _ in 0..5 {
            let m = trainer.train_iteration().unwrap();
            assert_eq!(m.pairwise_diversity, 0.0);
            let first = trainer.agents()[0].policy.params();
            assert!(trainer.agents().iter().all(|a| a.policy.params() == first));
        }
    }

    proptest! {
        #[test]
        fn tsc_is_bounded_below(ratio in 0.0f64..50.0, adv in -100.0f64..100.0, eps in 0.0f64..0.5) {
            prop_assert!(tsc_loss(ratio, adv, eps) >= (1.0 + eps) * adv.min(0.0));
        }

        #[test]
        fn relabeling_owners_leaves_objective_unchanged(seed in 0u64..200, shift in 1usize..3) {
            let (policy, batch) = line_batch(3, 3, seed);
            let cfg = OnPolicyConfig::default();
            let adv = batch.advantages.clone();
            let base = ce_task_objective(&policy, &batch, &adv, &cfg).unwrap();
            let mut relabeled = batch.clone();
            for t in &mut relabeled.transitions {
                t.owner = (t.owner + shift) % 3;
            }
            let moved = ce_task_objective(&policy, &relabeled, &adv, &cfg).unwrap();
            prop_assert!((base - moved).abs() <= 1e-12 * base.abs().max(1.0));
        }
    }
}
