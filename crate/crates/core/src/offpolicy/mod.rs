//! Off-policy team trainer built on soft actor-critic.
//!
//! Every agent keeps its own replay buffer, twin critics with Polyak targets
//! and a diversity critic `Q_d` regressed on the diversity reward. Experience
//! is shared through [`ShareMode`]. The actor step fuses the task gradient
//! with the gradient that ascends `Q_d`.

mod replay;
pub mod sac;

pub use replay::{sample_share_batch, sample_share_buffer, ReplayBuffer, ReplayTransition, ShareMode};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diversity::{diversity_from_summaries, polyak_update, team_pairwise_diversity, DiversityOptions, TargetPolicySet};
use crate::envs::{EnvConfig, Environment};
use crate::error::{DiceError, Result};
use crate::fusion::fuse;
use crate::harness::seeding::{derive_seed, stream_rng, Stream};
use crate::numerics::{clip_grad_norm, Action, HeadKind, OptimizerKind, OptimizerState, ParamVector, PolicyNet, ValueNet};
use crate::onpolicy::{max_ignoring_nan, window_mean, BestTracker, IterationMetrics};
use crate::rollout::EnvRunner;

use sac::{
    actor_objective, critic_regression, critic_targets, diversity_critic_targets, log_alpha_gradient, squashed_sample,
    Squash,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OffPolicyConfig {
    pub agents: usize,
    /// Transitions per update batch `N`, `N / K` from each source buffer.
    pub train_batch: usize,
    pub buffer_capacity: usize,
    /// Per-agent environment steps of uniform random actions before updates.
    pub warmup: usize,
    pub gamma: f64,
    /// Polyak coefficient for critic targets and delayed policy targets.
    pub tau: f64,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub max_grad_norm: Option<f64>,
    pub hidden: usize,
    pub policy_output_gain: f64,
    pub init_log_std: f64,
    /// Entropy temperature (initial value when `auto_alpha`).
    pub alpha: f64,
    pub auto_alpha: bool,
    pub alpha_lr: f64,
    pub mode: ShareMode,
    pub use_dr: bool,
    pub use_du: bool,
    pub identical_init: bool,
    pub diversity: DiversityOptions,
    pub fusion_floor: bool,
    /// Team steps per metrics row.
    pub steps_per_iteration: usize,
    pub metrics_window: usize,
}

impl Default for OffPolicyConfig {
    fn default() -> Self {
        OffPolicyConfig {
            agents: 5,
            train_batch: 128,
            buffer_capacity: 100_000,
            warmup: 500,
            gamma: 0.99,
            tau: 0.005,
            lr: 3e-4,
            optimizer: OptimizerKind::Adam,
            max_grad_norm: Some(10.0),
            hidden: 64,
            policy_output_gain: 0.1,
            init_log_std: 0.0,
            alpha: 0.2,
            auto_alpha: false,
            alpha_lr: 3e-4,
            mode: ShareMode::ShareBatch,
            use_dr: true,
            use_du: true,
            identical_init: false,
            diversity: DiversityOptions::default(),
            fusion_floor: false,
            steps_per_iteration: 200,
            metrics_window: 10,
        }
    }
}

impl OffPolicyConfig {
    /// Full-size settings: 256-unit layers, `N = 256`, 10000 warmup steps.
    pub fn paper_scale() -> Self {
        OffPolicyConfig {
            train_batch: 256,
            warmup: 10_000,
            hidden: 256,
            buffer_capacity: 1_000_000,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(DiceError::Config(format!("offpolicy: {msg}")));
        if self.agents == 0 {
            return fail("agents must be >= 1");
        }
        if self.train_batch < self.agents {
            return fail("train_batch must be >= agents");
        }
        if self.buffer_capacity == 0 || self.hidden == 0 || self.steps_per_iteration == 0 {
            return fail("buffer_capacity, hidden and steps_per_iteration must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.tau) {
            return fail("gamma and tau must lie in [0, 1]");
        }
        if self.alpha < 0.0 || (self.auto_alpha && self.alpha <= 0.0) {
            return fail("alpha must be >= 0 (and > 0 with auto_alpha)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SacAgent {
    pub policy: PolicyNet,
    pub q1: ValueNet,
    pub q2: ValueNet,
    pub q1_target: ValueNet,
    pub q2_target: ValueNet,
    pub q_div: ValueNet,
    pub q_div_target: ValueNet,
    pub log_alpha: f64,
    policy_opt: OptimizerState,
    q1_opt: OptimizerState,
    q2_opt: OptimizerState,
    q_div_opt: OptimizerState,
    runner: EnvRunner,
    rollout_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    replay_rng: ChaCha8Rng,
}

impl SacAgent {
    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    pub fn runner(&self) -> &EnvRunner {
        &self.runner
    }
}

/// Standard-normal noise, `n` rows of dimension `d`.
pub fn gaussian_noise<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect()).collect()
}

fn soft_update(target: &mut ValueNet, live: &ValueNet, tau: f64) -> Result<()> {
    let next = polyak_update(target.params(), live.params(), tau)?;
    target.set_params(next)
}

fn step_with(opt: &mut OptimizerState, params: &ParamVector, grad: ParamVector, max_norm: Option<f64>) -> Result<ParamVector> {
    let mut grad = grad;
    if let Some(m) = max_norm {
        clip_grad_norm(&mut grad, m);
    }
    let mut next = params.clone();
    opt.apply(&mut next, &grad)?;
    Ok(next)
}

#[derive(Default)]
struct Stats {
    updates: usize,
    critic_loss: f64,
    actor_objective: f64,
    log_prob: f64,
    diversity: f64,
    diversity_count: usize,
    cosine: f64,
    fusions: usize,
    clipped: usize,
}

#[derive(Debug, Clone)]
pub struct OffPolicyTrainer {
    cfg: OffPolicyConfig,
    squash: Squash,
    agents: Vec<SacAgent>,
    buffers: Vec<ReplayBuffer>,
    targets: TargetPolicySet,
    shared_rng: ChaCha8Rng,
    team_steps: u64,
    env_steps: u64,
    iteration: u64,
    best: BestTracker,
    last_probes: Vec<Vec<f64>>,
}

fn non_finite(what: &str, agent: usize) -> DiceError {
    DiceError::NonFinite {
        what: what.into(),
        agent: Some(agent),
    }
}

impl OffPolicyTrainer {
    pub fn new(cfg: OffPolicyConfig, env_cfg: &EnvConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let spec = env_cfg.build()?.spec().clone();
        let squash = Squash::from_space(&spec.action)?;
        let act_dim = squash.dim();
        let mut agents = Vec::with_capacity(cfg.agents);
        let mut buffers = Vec::with_capacity(cfg.agents);
        for k in 0..cfg.agents {
            let init = if cfg.identical_init { 0 } else { k as u64 };
            let policy = PolicyNet::new(
                spec.obs_dim,
                cfg.hidden,
                HeadKind::gaussian(act_dim),
                cfg.policy_output_gain,
                cfg.init_log_std,
                &mut stream_rng(seed, Stream::PolicyInit, init),
            )?;
            let mut critic_rng = stream_rng(seed, Stream::CriticInit, init);
            let q1 = ValueNet::new(spec.obs_dim + act_dim, cfg.hidden, &mut critic_rng)?;
            let q2 = ValueNet::new(spec.obs_dim + act_dim, cfg.hidden, &mut critic_rng)?;
            let q_div = ValueNet::new(spec.obs_dim + act_dim, cfg.hidden, &mut stream_rng(seed, Stream::DvnInit, init))?;
            agents.push(SacAgent {
                policy,
                q1_target: q1.clone(),
                q2_target: q2.clone(),
                q1,
                q2,
                q_div_target: q_div.clone(),
                q_div,
                log_alpha: cfg.alpha.ln(),
                policy_opt: OptimizerState::new(cfg.optimizer, cfg.lr),
                q1_opt: OptimizerState::new(cfg.optimizer, cfg.lr),
                q2_opt: OptimizerState::new(cfg.optimizer, cfg.lr),
                q_div_opt: OptimizerState::new(cfg.optimizer, cfg.lr),
                runner: EnvRunner::new(env_cfg.build()?, derive_seed(seed, Stream::EnvReset, k as u64)),
                rollout_rng: stream_rng(seed, Stream::Rollout, k as u64),
                noise_rng: stream_rng(seed, Stream::ActorNoise, k as u64),
                replay_rng: stream_rng(seed, Stream::Replay, k as u64 + 1),
            });
            buffers.push(ReplayBuffer::new(k, cfg.buffer_capacity)?);
        }
        let live: Vec<PolicyNet> = agents.iter().map(|a| a.policy.clone()).collect();
        Ok(OffPolicyTrainer {
            targets: TargetPolicySet::new(&live, cfg.tau),
            shared_rng: stream_rng(seed, Stream::Replay, 0),
            squash,
            cfg,
            agents,
            buffers,
            team_steps: 0,
            env_steps: 0,
            iteration: 0,
            best: BestTracker::default(),
            last_probes: Vec::new(),
        })
    }

    pub fn config(&self) -> &OffPolicyConfig {
        &self.cfg
    }

    pub fn agents(&self) -> &[SacAgent] {
        &self.agents
    }

    pub fn buffers(&self) -> &[ReplayBuffer] {
        &self.buffers
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

    /// One environment step per agent, then (after warmup) one update per agent.
    fn team_step(&mut self, stats: &mut Stats) -> Result<()> {
        let warm = self.team_steps < self.cfg.warmup as u64;
        for (k, agent) in self.agents.iter_mut().enumerate() {
            let action = if warm {
                self.squash
                    .center
                    .iter()
                    .zip(&self.squash.scale)
                    .map(|(c, s)| c + s * agent.rollout_rng.gen_range(-1.0..=1.0))
                    .collect()
            } else {
                let head = agent.policy.forward(agent.runner.obs())?;
                let eps = gaussian_noise(1, self.squash.dim(), &mut agent.rollout_rng).remove(0);
                squashed_sample(&head, &eps, &self.squash)?.action
            };
            if action.iter().any(|a: &f64| !a.is_finite()) {
                return Err(non_finite("action", k));
            }
            let (obs, result) = agent.runner.step(&Action::Continuous(action.clone()))?;
            self.buffers[k].push(ReplayTransition {
                obs,
                action,
                reward: result.reward,
                next_obs: result.next_obs,
                done: result.done,
                owner: k,
            });
        }
        self.team_steps += 1;
        self.env_steps += self.agents.len() as u64;
        if warm {
            return Ok(());
        }

        let n = self.cfg.train_batch;
        let shared = match self.cfg.mode {
            ShareMode::ShareBatch => match sample_share_batch(&self.buffers, n, &mut self.shared_rng)? {
                Some(b) => Some(b),
                None => return Ok(()),
            },
            _ => None,
        };
        for k in 0..self.agents.len() {
            let personal;
            let batch = match self.cfg.mode {
                ShareMode::ShareBatch => shared.as_deref().expect("shared batch"),
                ShareMode::ShareBuffer => {
                    match sample_share_buffer(&self.buffers, k, n, &mut self.agents[k].replay_rng)? {
                        Some(b) => personal = b,
                        None => continue,
                    }
                    &personal
                }
                ShareMode::Independent => {
                    match sample_share_batch(&self.buffers[k..k + 1], n, &mut self.agents[k].replay_rng)? {
                        Some(b) => personal = b,
                        None => continue,
                    }
                    &personal
                }
            };
            self.update_agent(k, batch, stats)?;
            if k + 1 == self.agents.len() {
                self.last_probes = batch.iter().step_by(8).map(|t| t.obs.clone()).collect();
            }
        }
        let live = self.policies();
        if self.cfg.use_du {
            self.targets.update(&live)?;
        } else {
            self.targets.sync(&live);
        }
        Ok(())
    }

    /// Diversity rewards of agent `k` at the batch states against the current
    /// delayed targets.
    pub fn diversity_rewards(&self, k: usize, batch: &[ReplayTransition]) -> Result<Vec<f64>> {
        batch
            .iter()
            .map(|t| {
                let live = self.agents[k].policy.forward(&t.obs)?.behavior_summary();
                let targets = self.targets.summaries(&t.obs)?;
                Ok(diversity_from_summaries(k, &live, &targets, self.cfg.diversity).0)
            })
            .collect()
    }

    fn update_agent(&mut self, k: usize, batch: &[ReplayTransition], stats: &mut Stats) -> Result<()> {
        let cfg = &self.cfg;
        let d = self.squash.dim();
        let n = batch.len();
        let r_d = if cfg.use_dr {
            Some(self.diversity_rewards(k, batch)?)
        } else {
            None
        };
        let agent = &mut self.agents[k];
        let alpha = agent.log_alpha.exp();

        // critics
        let noise_next = gaussian_noise(n, d, &mut agent.noise_rng);
        let y = critic_targets(
            batch,
            &agent.policy,
            &[&agent.q1_target, &agent.q2_target],
            alpha,
            cfg.gamma,
            &noise_next,
            &self.squash,
        )?;
        let (l1, g1) = critic_regression(&agent.q1, batch, &y)?;
        let (l2, g2) = critic_regression(&agent.q2, batch, &y)?;
        if !(l1.is_finite() && l2.is_finite()) {
            return Err(non_finite("critic loss", k));
        }
        let p1 = step_with(&mut agent.q1_opt, agent.q1.params(), g1, cfg.max_grad_norm).map_err(|_| non_finite("critic gradient", k))?;
        agent.q1.set_params(p1)?;
        let p2 = step_with(&mut agent.q2_opt, agent.q2.params(), g2, cfg.max_grad_norm).map_err(|_| non_finite("critic gradient", k))?;
        agent.q2.set_params(p2)?;
        stats.critic_loss += (l1 + l2) / 2.0;

        // diversity critic
        if let Some(r_d) = &r_d {
            stats.diversity += r_d.iter().sum::<f64>() / n as f64;
            stats.diversity_count += 1;
            let noise_div = gaussian_noise(n, d, &mut agent.noise_rng);
            let y_d = diversity_critic_targets(batch, r_d, &agent.policy, &agent.q_div_target, cfg.gamma, &noise_div, &self.squash)?;
            let (ld, gd) = critic_regression(&agent.q_div, batch, &y_d)?;
            if !ld.is_finite() {
                return Err(non_finite("diversity critic loss", k));
            }
            let pd = step_with(&mut agent.q_div_opt, agent.q_div.params(), gd, cfg.max_grad_norm)
                .map_err(|_| non_finite("diversity critic gradient", k))?;
            agent.q_div.set_params(pd)?;
        }

        // actor
        let obs: Vec<Vec<f64>> = batch.iter().map(|t| t.obs.clone()).collect();
        let noise_actor = gaussian_noise(n, d, &mut agent.noise_rng);
        let task = actor_objective(&agent.policy, &[&agent.q1, &agent.q2], alpha, &obs, &noise_actor, &self.squash)?;
        if !task.objective.is_finite() || !task.grad.is_finite() {
            return Err(non_finite("actor objective", k));
        }
        stats.actor_objective += task.objective;
        stats.log_prob += task.mean_log_prob;
        let g_final = if cfg.use_dr {
            let div = actor_objective(&agent.policy, &[&agent.q_div], 0.0, &obs, &noise_actor, &self.squash)?;
            if !div.grad.is_finite() {
                return Err(non_finite("diversity actor gradient", k));
            }
            let fused = fuse(&task.grad, &div.grad, cfg.fusion_floor)?;
            stats.fusions += 1;
            stats.cosine += fused.cosine;
            stats.clipped += usize::from(fused.clipped);
            fused.g_final
        } else {
            task.grad
        };
        let pp = step_with(&mut agent.policy_opt, agent.policy.params(), g_final, cfg.max_grad_norm)
            .map_err(|_| non_finite("fused actor gradient", k))?;
        if !pp.is_finite() {
            return Err(non_finite("policy parameters", k));
        }
        agent.policy.set_params(pp)?;

        if cfg.auto_alpha {
            agent.log_alpha += cfg.alpha_lr * log_alpha_gradient(task.mean_log_prob, -(d as f64));
        }

        soft_update(&mut agent.q1_target, &agent.q1, cfg.tau)?;
        soft_update(&mut agent.q2_target, &agent.q2, cfg.tau)?;
        if cfg.use_dr {
            soft_update(&mut agent.q_div_target, &agent.q_div, cfg.tau)?;
        }
        stats.updates += 1;
        Ok(())
    }

    /// Runs `steps_per_iteration` team steps and reports metrics.
    pub fn train_iteration(&mut self) -> Result<IterationMetrics> {
        let mut stats = Stats::default();
        for _ in 0..self.cfg.steps_per_iteration {
            self.team_step(&mut stats)?;
        }
        self.iteration += 1;
        let agent_returns: Vec<f64> = self
            .agents
            .iter()
            .map(|a| window_mean(a.runner.completed_returns(), self.cfg.metrics_window))
            .collect();
        let live = self.policies();
        let probes = if self.last_probes.is_empty() {
            self.agents.iter().map(|a| a.runner.obs().to_vec()).collect()
        } else {
            self.last_probes.clone()
        };
        let per_update = |x: f64| if stats.updates > 0 { x / stats.updates as f64 } else { f64::NAN };
        let diversity_mean = if stats.diversity_count > 0 {
            stats.diversity / stats.diversity_count as f64
        } else {
            // diagnostics only: evaluated without touching any random stream
            let mut total = 0.0;
            for k in 0..self.agents.len() {
                let batch: Vec<ReplayTransition> = probes
                    .iter()
                    .map(|o| ReplayTransition {
                        obs: o.clone(),
                        action: Vec::new(),
                        reward: 0.0,
                        next_obs: Vec::new(),
                        done: true,
                        owner: k,
                    })
                    .collect();
                let r = self.diversity_rewards(k, &batch)?;
                total += r.iter().sum::<f64>() / r.len().max(1) as f64;
            }
            total / self.agents.len() as f64
        };
        Ok(IterationMetrics {
            iteration: self.iteration,
            env_steps: self.env_steps,
            best_agent_return: max_ignoring_nan(&agent_returns),
            best_fixed_return: self.best.record(&agent_returns),
            agent_returns,
            diversity_mean,
            pairwise_diversity: team_pairwise_diversity(&live, &probes)?,
            entropy: -per_update(stats.log_prob),
            ratio_mean: f64::NAN,
            ratio_max: f64::NAN,
            grad_cosine: if stats.fusions > 0 {
                stats.cosine / stats.fusions as f64
            } else {
                f64::NAN
            },
            clip_fraction: if stats.fusions > 0 {
                stats.clipped as f64 / stats.fusions as f64
            } else {
                0.0
            },
            kl_mean: f64::NAN,
            task_objective: per_update(stats.actor_objective),
            value_loss: per_update(stats.critic_loss),
        })
    }
}
