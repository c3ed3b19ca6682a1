//! Soft actor-critic objectives with hand-written gradients.
//!
//! The actor is a diagonal Gaussian whose reparameterized sample
//! `u = μ + σ·ε` is squashed into the action box as `a = c + s·tanh(u)`.

use crate::envs::ActionSpace;
use crate::error::{DiceError, Result};
use crate::numerics::{gaussian_log_prob, HeadGrad, HeadOutput, ParamVector, PolicyNet, ValueNet};

use super::replay::ReplayTransition;

/// Keeps the log-Jacobian finite at saturated actions.
pub const SQUASH_EPS: f64 = 1e-6;

/// Affine map from `(-1, 1)^d` onto the action box.
#[derive(Debug, Clone, PartialEq)]
pub struct Squash {
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Squash {
    pub fn from_space(space: &ActionSpace) -> Result<Self> {
        match space {
            ActionSpace::Box { low, high } => Ok(Squash {
                center: low.iter().zip(high).map(|(l, h)| (l + h) / 2.0).collect(),
                scale: low.iter().zip(high).map(|(l, h)| (h - l) / 2.0).collect(),
            }),
            ActionSpace::Discrete(_) => Err(DiceError::Config(
                "the off-policy trainer supports continuous action spaces only".into(),
            )),
        }
    }

    pub fn dim(&self) -> usize {
        self.scale.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SquashedSample {
    pub pre_tanh: Vec<f64>,
    pub tanh: Vec<f64>,
    pub action: Vec<f64>,
    pub log_prob: f64,
}

fn gaussian_parts(head: &HeadOutput) -> Result<(&[f64], &[f64])> {
    match head {
        HeadOutput::Gaussian { mean, log_std } => Ok((mean, log_std)),
        HeadOutput::Categorical { .. } => Err(DiceError::Contract("squashed sampling needs a Gaussian head".into())),
    }
}

/// Reparameterized squashed sample for standard-normal noise `eps`.
pub fn squashed_sample(head: &HeadOutput, eps: &[f64], squash: &Squash) -> Result<SquashedSample> {
    let (mean, log_std) = gaussian_parts(head)?;
    if eps.len() != mean.len() || squash.dim() != mean.len() {
        return Err(DiceError::dim("squashed sample noise", mean.len(), eps.len()));
    }
    let pre_tanh: Vec<f64> = mean
        .iter()
        .zip(log_std)
        .zip(eps)
        .map(|((m, l), e)| m + l.exp() * e)
        .collect();
    let tanh: Vec<f64> = pre_tanh.iter().map(|u| u.tanh()).collect();
    let action = tanh
        .iter()
        .zip(squash.center.iter().zip(&squash.scale))
        .map(|(t, (c, s))| c + s * t)
        .collect();
    let log_jac: f64 = tanh
        .iter()
        .zip(&squash.scale)
        .map(|(t, s)| (s * (1.0 - t * t) + SQUASH_EPS).ln())
        .sum();
    Ok(SquashedSample {
        log_prob: gaussian_log_prob(mean, log_std, &pre_tanh) - log_jac,
        pre_tanh,
        tanh,
        action,
    })
}

/// `[obs, action]`, the critic input.
pub fn critic_input(obs: &[f64], action: &[f64]) -> Vec<f64> {
    let mut x = Vec::with_capacity(obs.len() + action.len());
    x.extend_from_slice(obs);
    x.extend_from_slice(action);
    x
}

#[derive(Debug, Clone)]
pub struct ActorEval {
    /// `mean(min_i Q_i(s, a) − α·log π(a|s))`.
    pub objective: f64,
    pub grad: ParamVector,
    pub mean_log_prob: f64,
}

/// Reparameterized actor objective over `obs` with fixed noise and its
/// gradient. With a single critic and `alpha = 0` this is the diversity
/// critic's ascent direction.
pub fn actor_objective(
    policy: &PolicyNet,
    critics: &[&ValueNet],
    alpha: f64,
    obs: &[Vec<f64>],
    noise: &[Vec<f64>],
    squash: &Squash,
) -> Result<ActorEval> {
    if obs.len() != noise.len() || obs.is_empty() || critics.is_empty() {
        return Err(DiceError::dim("actor batch", obs.len(), noise.len()));
    }
    let n = obs.len() as f64;
    let mut grad = vec![0.0; policy.num_params()];
    let mut scratch: Vec<Vec<f64>> = critics.iter().map(|c| vec![0.0; c.num_params()]).collect();
    let mut objective = 0.0;
    let mut log_prob_sum = 0.0;
    for (s, eps) in obs.iter().zip(noise) {
        let (head, trace) = policy.forward_trace(s)?;
        let sample = squashed_sample(&head, eps, squash)?;
        let x = critic_input(s, &sample.action);
        let mut best: Option<(usize, f64, crate::numerics::MlpTrace)> = None;
        for (i, critic) in critics.iter().enumerate() {
            let (q, qt) = critic.forward_trace(&x)?;
            if best.as_ref().map_or(true, |(_, b, _)| q < *b) {
                best = Some((i, q, qt));
            }
        }
        let (i, q, qt) = best.expect("at least one critic");
        objective += (q - alpha * sample.log_prob) / n;
        log_prob_sum += sample.log_prob;

        let input_grad = critics[i].backward(&qt, 1.0, &mut scratch[i]);
        let (_, log_std) = gaussian_parts(&head)?;
        let d = squash.dim();
        let mut g_mean = vec![0.0; d];
        let mut g_log_std = vec![0.0; d];
        for j in 0..d {
            let t = sample.tanh[j];
            let s_j = squash.scale[j];
            let jac = s_j * (1.0 - t * t);
            let d_neg_log_jac = 2.0 * s_j * t * (1.0 - t * t) / (jac + SQUASH_EPS);
            let g_u = input_grad[s.len() + j] * jac - alpha * d_neg_log_jac;
            g_mean[j] = g_u / n;
            g_log_std[j] = (g_u * log_std[j].exp() * eps[j] + alpha) / n;
        }
        policy.backward(
            &trace,
            &HeadGrad::Gaussian {
                mean: g_mean,
                log_std: g_log_std,
            },
            &mut grad,
        );
    }
    Ok(ActorEval {
        objective,
        grad: ParamVector::from_vec(grad),
        mean_log_prob: log_prob_sum / n,
    })
}

/// Soft TD targets `r + γ(1 − done)(min_i Q̄_i(s', a') − α·log π(a'|s'))`
/// with `a'` drawn from the current policy using `noise`.
pub fn critic_targets(
    batch: &[ReplayTransition],
    policy: &PolicyNet,
    target_critics: &[&ValueNet],
    alpha: f64,
    gamma: f64,
    noise: &[Vec<f64>],
    squash: &Squash,
) -> Result<Vec<f64>> {
    batch
        .iter()
        .zip(noise)
        .map(|(t, eps)| {
            if t.done || gamma == 0.0 {
                return Ok(t.reward);
            }
            let head = policy.forward(&t.next_obs)?;
            let next = squashed_sample(&head, eps, squash)?;
            let x = critic_input(&t.next_obs, &next.action);
            let mut q_min = f64::INFINITY;
            for c in target_critics {
                q_min = q_min.min(c.forward(&x)?);
            }
            Ok(t.reward + gamma * (q_min - alpha * next.log_prob))
        })
        .collect()
}

/// Diversity critic targets `r_d + γ(1 − done)·Q̄_d(s', a')`.
pub fn diversity_critic_targets(
    batch: &[ReplayTransition],
    diversity_rewards: &[f64],
    policy: &PolicyNet,
    target_critic: &ValueNet,
    gamma: f64,
    noise: &[Vec<f64>],
    squash: &Squash,
) -> Result<Vec<f64>> {
    batch
        .iter()
        .zip(diversity_rewards)
        .zip(noise)
        .map(|((t, &r_d), eps)| {
            if t.done || gamma == 0.0 {
                return Ok(r_d);
            }
            let head = policy.forward(&t.next_obs)?;
            let next = squashed_sample(&head, eps, squash)?;
            Ok(r_d + gamma * target_critic.forward(&critic_input(&t.next_obs, &next.action))?)
        })
        .collect()
}

/// Mean squared TD error of `critic` and the ascent direction on its negation.
pub fn critic_regression(critic: &ValueNet, batch: &[ReplayTransition], targets: &[f64]) -> Result<(f64, ParamVector)> {
    if batch.len() != targets.len() || batch.is_empty() {
        return Err(DiceError::dim("critic batch", batch.len(), targets.len()));
    }
    let n = batch.len() as f64;
    let mut grad = vec![0.0; critic.num_params()];
    let mut loss = 0.0;
    for (t, y) in batch.iter().zip(targets) {
        let (q, trace) = critic.forward_trace(&critic_input(&t.obs, &t.action))?;
        let err = q - y;
        loss += err * err / n;
        critic.backward(&trace, -2.0 * err / n, &mut grad);
    }
    Ok((loss, ParamVector::from_vec(grad)))
}

/// Update direction for `log α`: the negated gradient of the temperature loss
/// `−log α·(log π + H_target)`. Positive while the policy entropy is below
/// the target.
pub fn log_alpha_gradient(mean_log_prob: f64, target_entropy: f64) -> f64 {
    mean_log_prob + target_entropy
}
