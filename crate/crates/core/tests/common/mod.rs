//! Reference single-agent learners used by the reduction tests.
//!
//! Both are plain loops over the numerics, rollout and SAC primitives with
//! no team machinery: no merging, no diversity, no fusion, no targets.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use dice_core::envs::{EnvConfig, Environment};
use dice_core::harness::seeding::{derive_seed, stream_rng, Stream};
use dice_core::numerics::{clip_grad_norm, Action, HeadGrad, HeadKind, OptimizerState, ParamVector, PolicyNet, ValueNet};
use dice_core::offpolicy::sac::{actor_objective, critic_regression, critic_targets, squashed_sample, Squash};
use dice_core::offpolicy::{gaussian_noise, OffPolicyConfig, ReplayBuffer, ReplayTransition};
use dice_core::onpolicy::OnPolicyConfig;
use dice_core::rollout::{collect, EnvRunner};
use rand::seq::SliceRandom;
use rand::Rng;

/// One logged iteration of a reference run.
#[derive(Debug, Clone, PartialEq)]
pub struct RefRow {
    pub iteration: u64,
    pub env_steps: u64,
    pub best_return: f64,
    pub policy_hash: u64,
    pub value_hash: u64,
}

impl RefRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{:016x},{:016x}",
            self.iteration, self.env_steps, self.best_return, self.policy_hash, self.value_hash
        )
    }
}

pub const GOLDEN_HEADER: &str = "iteration,env_steps,best_return,policy_hash,value_hash";

pub fn golden_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

pub fn render(rows: &[RefRow]) -> String {
    let mut s = String::from(GOLDEN_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv_line());
        s.push('\n');
    }
    s
}

fn window_mean(values: &[f64], window: usize) -> f64 {
    let start = values.len().saturating_sub(window);
    let tail = &values[start..];
    if tail.is_empty() {
        return f64::NAN;
    }
    let mut sum = 0.0;
    for v in tail {
        sum += v;
    }
    sum / tail.len() as f64
}

fn ppo_clip_slope(ratio: f64, advantage: f64, eps: f64) -> f64 {
    // d/dρ of min(ρA, clip(ρ)A): A unless the clipped branch is active
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * advantage;
    if unclipped <= clipped {
        advantage
    } else {
        0.0
    }
}

fn apply(opt: &mut OptimizerState, params: &ParamVector, grad: Vec<f64>, max_norm: Option<f64>) -> ParamVector {
    let mut g = ParamVector::from_vec(grad);
    if let Some(m) = max_norm {
        clip_grad_norm(&mut g, m);
    }
    let mut p = params.clone();
    opt.apply(&mut p, &g).expect("finite gradient");
    p
}

/// Single-agent PPO: clipped surrogate with a KL penalty against the
/// behavior policy, GAE advantages and a value baseline.
pub fn reference_ppo(env_cfg: &EnvConfig, cfg: &OnPolicyConfig, seed: u64, iterations: u64) -> Vec<RefRow> {
    let spec = env_cfg.build().unwrap().spec().clone();
    let head = match spec.action {
        dice_core::envs::ActionSpace::Box { ref low, .. } => HeadKind::gaussian(low.len()),
        dice_core::envs::ActionSpace::Discrete(n) => HeadKind::Categorical { n },
    };
    let mut policy = PolicyNet::new(
        spec.obs_dim,
        cfg.hidden,
        head,
        cfg.policy_output_gain,
        cfg.init_log_std,
        &mut stream_rng(seed, Stream::PolicyInit, 0),
    )
    .unwrap();
    let mut value = ValueNet::new(spec.obs_dim, cfg.hidden, &mut stream_rng(seed, Stream::ValueInit, 0)).unwrap();
    let mut runner = EnvRunner::new(env_cfg.build().unwrap(), derive_seed(seed, Stream::EnvReset, 0));
    let mut rollout_rng = stream_rng(seed, Stream::Rollout, 0);
    let mut shuffle_rng = stream_rng(seed, Stream::Shuffle, 0);
    let mut policy_opt = OptimizerState::new(cfg.optimizer, cfg.lr);
    let mut value_opt = OptimizerState::new(cfg.optimizer, cfg.value_lr);
    let mut rows = Vec::new();
    let mut env_steps = 0u64;

    for iteration in 1..=iterations {
        let mut batch = collect(&policy, &mut runner, cfg.train_batch, 0, &mut rollout_rng).unwrap();
        batch.compute_advantages(&value, cfg.gamma, cfg.lambda).unwrap();
        env_steps += batch.len() as u64;

        let epochs: Vec<Vec<usize>> = (0..cfg.sgd_iters)
            .map(|_| {
                let mut p: Vec<usize> = (0..batch.len()).collect();
                p.shuffle(&mut shuffle_rng);
                p
            })
            .collect();
        for perm in &epochs {
            for mb in perm.chunks(cfg.minibatch) {
                let w = 1.0 / mb.len() as f64;
                let mut g = vec![0.0; policy.num_params()];
                for &i in mb {
                    let t = &batch.transitions[i];
                    let (out, trace) = policy.forward_trace(&t.obs).unwrap();
                    let ratio = (out.log_prob(&t.action) - t.behavior_log_prob).exp();
                    let slope = ppo_clip_slope(ratio, batch.advantages[i], cfg.clip_eps);
                    let mut up = HeadGrad::zeros_like(&out);
                    if slope != 0.0 {
                        up.add_scaled(w * slope * ratio, &out.log_prob_grad(&t.action));
                    }
                    if cfg.kl_coeff != 0.0 {
                        up.add_scaled(-w * cfg.kl_coeff, &out.kl_from_grad(&t.behavior));
                    }
                    if cfg.entropy_coeff != 0.0 {
                        up.add_scaled(w * cfg.entropy_coeff, &out.entropy_grad());
                    }
                    policy.backward(&trace, &up, &mut g);
                }
                let next = apply(&mut policy_opt, policy.params(), g, cfg.max_grad_norm);
                policy.set_params(next).unwrap();

                let n = mb.len() as f64;
                let mut gv = vec![0.0; value.num_params()];
                for &i in mb {
                    let (v, trace) = value.forward_trace(&batch.transitions[i].obs).unwrap();
                    let err = v - batch.returns[i];
                    value.backward(&trace, -2.0 * err / n, &mut gv);
                }
                let next = apply(&mut value_opt, value.params(), gv, cfg.max_grad_norm);
                value.set_params(next).unwrap();
            }
        }
        rows.push(RefRow {
            iteration,
            env_steps,
            best_return: window_mean(runner.completed_returns(), cfg.metrics_window),
            policy_hash: policy.params().content_hash(),
            value_hash: value.params().content_hash(),
        });
    }
    rows
}

/// Single-agent SAC with twin critics, fixed temperature and a uniform
/// random warmup. `value_hash` tracks the first critic.
pub fn reference_sac(env_cfg: &EnvConfig, cfg: &OffPolicyConfig, seed: u64, iterations: u64) -> Vec<RefRow> {
    let spec = env_cfg.build().unwrap().spec().clone();
    let squash = Squash::from_space(&spec.action).unwrap();
    let d = squash.dim();
    let mut policy = PolicyNet::new(
        spec.obs_dim,
        cfg.hidden,
        HeadKind::gaussian(d),
        cfg.policy_output_gain,
        cfg.init_log_std,
        &mut stream_rng(seed, Stream::PolicyInit, 0),
    )
    .unwrap();
    let mut critic_rng = stream_rng(seed, Stream::CriticInit, 0);
    let mut q1 = ValueNet::new(spec.obs_dim + d, cfg.hidden, &mut critic_rng).unwrap();
    let mut q2 = ValueNet::new(spec.obs_dim + d, cfg.hidden, &mut critic_rng).unwrap();
    let mut q1_t = q1.clone();
    let mut q2_t = q2.clone();
    let mut runner = EnvRunner::new(env_cfg.build().unwrap(), derive_seed(seed, Stream::EnvReset, 0));
    let mut act_rng = stream_rng(seed, Stream::Rollout, 0);
    let mut noise_rng = stream_rng(seed, Stream::ActorNoise, 0);
    let mut replay_rng = stream_rng(seed, Stream::Replay, 0);
    let mut buffer = ReplayBuffer::new(0, cfg.buffer_capacity).unwrap();
    let (mut opt_pi, mut opt_q1, mut opt_q2) = (
        OptimizerState::new(cfg.optimizer, cfg.lr),
        OptimizerState::new(cfg.optimizer, cfg.lr),
        OptimizerState::new(cfg.optimizer, cfg.lr),
    );
    let alpha = cfg.alpha.ln().exp();
    let soft = |target: &mut ValueNet, live: &ValueNet| {
        let p: Vec<f64> = target
            .params()
            .iter()
            .zip(live.params().iter())
            .map(|(t, l)| (1.0 - cfg.tau) * t + cfg.tau * l)
            .collect();
        target.set_params(ParamVector::from_vec(p)).unwrap();
    };

    let mut steps = 0u64;
    let mut rows = Vec::new();
    for iteration in 1..=iterations {
        for _ in 0..cfg.steps_per_iteration {
            let action: Vec<f64> = if steps < cfg.warmup as u64 {
                (0..d)
                    .map(|j| squash.center[j] + squash.scale[j] * act_rng.gen_range(-1.0..=1.0))
                    .collect()
            } else {
                let head = policy.forward(runner.obs()).unwrap();
                let eps = gaussian_noise(1, d, &mut act_rng).remove(0);
                squashed_sample(&head, &eps, &squash).unwrap().action
            };
            let (obs, res) = runner.step(&Action::Continuous(action.clone())).unwrap();
            buffer.push(ReplayTransition {
                obs,
                action,
                reward: res.reward,
                next_obs: res.next_obs,
                done: res.done,
                owner: 0,
            });
            steps += 1;
            if steps <= cfg.warmup as u64 {
                continue;
            }
            let batch = buffer.sample(cfg.train_batch, &mut replay_rng).unwrap();
            let n = batch.len();
            let noise = gaussian_noise(n, d, &mut noise_rng);
            let y = critic_targets(&batch, &policy, &[&q1_t, &q2_t], alpha, cfg.gamma, &noise, &squash).unwrap();
            let (_, g1) = critic_regression(&q1, &batch, &y).unwrap();
            let (_, g2) = critic_regression(&q2, &batch, &y).unwrap();
            let p1 = apply(&mut opt_q1, q1.params(), g1.into_vec(), cfg.max_grad_norm);
            q1.set_params(p1).unwrap();
            let p2 = apply(&mut opt_q2, q2.params(), g2.into_vec(), cfg.max_grad_norm);
            q2.set_params(p2).unwrap();

            let obs: Vec<Vec<f64>> = batch.iter().map(|t| t.obs.clone()).collect();
            let noise = gaussian_noise(n, d, &mut noise_rng);
            let actor = actor_objective(&policy, &[&q1, &q2], alpha, &obs, &noise, &squash).unwrap();
            let pp = apply(&mut opt_pi, policy.params(), actor.grad.into_vec(), cfg.max_grad_norm);
            policy.set_params(pp).unwrap();
            soft(&mut q1_t, &q1);
            soft(&mut q2_t, &q2);
        }
        rows.push(RefRow {
            iteration,
            env_steps: steps,
            best_return: window_mean(runner.completed_returns(), cfg.metrics_window),
            policy_hash: policy.params().content_hash(),
            value_hash: q1.params().content_hash(),
        });
    }
    rows
}
