//! Diagonal Gaussian and categorical action distributions.
//!
//! Every density-like quantity comes with its gradient with respect to the
//! distribution parameters (mean and log-std, or logits) so the policy
//! objectives can be back-propagated by hand.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// `0.5 * ln(2π)`
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Output of a policy head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum HeadOutput {
    Gaussian { mean: Vec<f64>, log_std: Vec<f64> },
    Categorical { logits: Vec<f64> },
}

/// Gradient of a scalar with respect to a head's outputs.
#[derive(Debug, Clone, PartialEq)]
pub enum HeadGrad {
    Gaussian { mean: Vec<f64>, log_std: Vec<f64> },
    Categorical { logits: Vec<f64> },
}

impl HeadGrad {
    pub fn zeros_like(head: &HeadOutput) -> Self {
        match head {
            HeadOutput::Gaussian { mean, log_std } => HeadGrad::Gaussian {
                mean: vec![0.0; mean.len()],
                log_std: vec![0.0; log_std.len()],
            },
            HeadOutput::Categorical { logits } => HeadGrad::Categorical {
                logits: vec![0.0; logits.len()],
            },
        }
    }

    /// `self += scale * other`; both must be the same head kind.
    pub fn add_scaled(&mut self, scale: f64, other: &HeadGrad) {
        match (self, other) {
            (HeadGrad::Gaussian { mean, log_std }, HeadGrad::Gaussian { mean: m2, log_std: l2 }) => {
                mean.iter_mut().zip(m2).for_each(|(a, b)| *a += scale * b);
                log_std.iter_mut().zip(l2).for_each(|(a, b)| *a += scale * b);
            }
            (HeadGrad::Categorical { logits }, HeadGrad::Categorical { logits: l2 }) => {
                logits.iter_mut().zip(l2).for_each(|(a, b)| *a += scale * b);
            }
            _ => panic!("head gradient kind mismatch"),
        }
    }
}

/// An action taken in an environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Action {
    Continuous(Vec<f64>),
    Discrete(usize),
}

impl Action {
    pub fn as_continuous(&self) -> Option<&[f64]> {
        match self {
            Action::Continuous(a) => Some(a),
            Action::Discrete(_) => None,
        }
    }

    /// Flat numeric encoding (one-hot for discrete actions with `n` choices).
    pub fn encode(&self, n_discrete: usize) -> Vec<f64> {
        match self {
            Action::Continuous(a) => a.clone(),
            Action::Discrete(i) => {
                let mut v = vec![0.0; n_discrete];
                v[*i] = 1.0;
                v
            }
        }
    }
}

pub fn gaussian_log_prob(mean: &[f64], log_std: &[f64], action: &[f64]) -> f64 {
    debug_assert!(mean.len() == log_std.len() && mean.len() == action.len());
    mean.iter()
        .zip(log_std)
        .zip(action)
        .map(|((m, ls), a)| {
            let z = (a - m) * (-ls).exp();
            -0.5 * z * z - ls - HALF_LN_2PI
        })
        .sum()
}

/// Gradient of [`gaussian_log_prob`] with respect to `(mean, log_std)`.
pub fn gaussian_log_prob_grad(mean: &[f64], log_std: &[f64], action: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut d_mean = Vec::with_capacity(mean.len());
    let mut d_log_std = Vec::with_capacity(mean.len());
    for ((m, ls), a) in mean.iter().zip(log_std).zip(action) {
        let inv_std = (-ls).exp();
        let z = (a - m) * inv_std;
        d_mean.push(z * inv_std);
        d_log_std.push(z * z - 1.0);
    }
    (d_mean, d_log_std)
}

pub fn gaussian_entropy(log_std: &[f64]) -> f64 {
    log_std.iter().map(|ls| 0.5 + HALF_LN_2PI + ls).sum()
}

/// `KL(p || q)` for diagonal Gaussians.
pub fn gaussian_kl(mean_p: &[f64], log_std_p: &[f64], mean_q: &[f64], log_std_q: &[f64]) -> f64 {
    let mut kl = 0.0;
    for i in 0..mean_p.len() {
        let var_ratio = (2.0 * (log_std_p[i] - log_std_q[i])).exp();
        let diff = (mean_p[i] - mean_q[i]) * (-log_std_q[i]).exp();
        kl += log_std_q[i] - log_std_p[i] + 0.5 * (var_ratio + diff * diff) - 0.5;
    }
    kl
}

/// Gradient of [`gaussian_kl`] with respect to the second argument `(mean_q, log_std_q)`.
pub fn gaussian_kl_grad_q(
    mean_p: &[f64],
    log_std_p: &[f64],
    mean_q: &[f64],
    log_std_q: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let mut d_mean = Vec::with_capacity(mean_p.len());
    let mut d_log_std = Vec::with_capacity(mean_p.len());
    for i in 0..mean_p.len() {
        let inv_var_q = (-2.0 * log_std_q[i]).exp();
        let var_p = (2.0 * log_std_p[i]).exp();
        let diff = mean_p[i] - mean_q[i];
        d_mean.push(-diff * inv_var_q);
        d_log_std.push(1.0 - (var_p + diff * diff) * inv_var_q);
    }
    (d_mean, d_log_std)
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).into_iter().map(f64::exp).collect()
}

pub fn categorical_log_prob(logits: &[f64], action: usize) -> f64 {
    log_softmax(logits)[action]
}

/// Gradient of [`categorical_log_prob`] with respect to the logits.
pub fn categorical_log_prob_grad(logits: &[f64], action: usize) -> Vec<f64> {
    let mut g: Vec<f64> = softmax(logits).into_iter().map(|p| -p).collect();
    g[action] += 1.0;
    g
}

pub fn categorical_entropy(logits: &[f64]) -> f64 {
    log_softmax(logits).iter().map(|lp| -lp.exp() * lp).sum()
}

pub fn categorical_entropy_grad(logits: &[f64]) -> Vec<f64> {
    let lp = log_softmax(logits);
    let h: f64 = lp.iter().map(|l| -l.exp() * l).sum();
    lp.iter().map(|l| -l.exp() * (l + h)).collect()
}

/// `KL(p || q)` between categorical distributions given by logits.
pub fn categorical_kl(logits_p: &[f64], logits_q: &[f64]) -> f64 {
    let lp = log_softmax(logits_p);
    let lq = log_softmax(logits_q);
    lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum()
}

pub fn categorical_kl_grad_q(logits_p: &[f64], logits_q: &[f64]) -> Vec<f64> {
    let p = softmax(logits_p);
    softmax(logits_q).iter().zip(&p).map(|(q, p)| q - p).collect()
}

impl HeadOutput {
    pub fn log_prob(&self, action: &Action) -> f64 {
        match (self, action) {
            (HeadOutput::Gaussian { mean, log_std }, Action::Continuous(a)) => gaussian_log_prob(mean, log_std, a),
            (HeadOutput::Categorical { logits }, Action::Discrete(i)) => categorical_log_prob(logits, *i),
            _ => panic!("action kind does not match policy head"),
        }
    }

    pub fn log_prob_grad(&self, action: &Action) -> HeadGrad {
        match (self, action) {
            (HeadOutput::Gaussian { mean, log_std }, Action::Continuous(a)) => {
                let (m, l) = gaussian_log_prob_grad(mean, log_std, a);
                HeadGrad::Gaussian { mean: m, log_std: l }
            }
            (HeadOutput::Categorical { logits }, Action::Discrete(i)) => HeadGrad::Categorical {
                logits: categorical_log_prob_grad(logits, *i),
            },
            _ => panic!("action kind does not match policy head"),
        }
    }

    pub fn entropy(&self) -> f64 {
        match self {
            HeadOutput::Gaussian { log_std, .. } => gaussian_entropy(log_std),
            HeadOutput::Categorical { logits } => categorical_entropy(logits),
        }
    }

    pub fn entropy_grad(&self) -> HeadGrad {
        match self {
            HeadOutput::Gaussian { mean, log_std } => HeadGrad::Gaussian {
                mean: vec![0.0; mean.len()],
                log_std: vec![1.0; log_std.len()],
            },
            HeadOutput::Categorical { logits } => HeadGrad::Categorical {
                logits: categorical_entropy_grad(logits),
            },
        }
    }

    /// `KL(behavior || self)`.
    pub fn kl_from(&self, behavior: &HeadOutput) -> f64 {
        match (behavior, self) {
            (HeadOutput::Gaussian { mean: mp, log_std: lp }, HeadOutput::Gaussian { mean: mq, log_std: lq }) => {
                gaussian_kl(mp, lp, mq, lq)
            }
            (HeadOutput::Categorical { logits: p }, HeadOutput::Categorical { logits: q }) => categorical_kl(p, q),
            _ => panic!("head kind mismatch"),
        }
    }

    /// Gradient of `KL(behavior || self)` with respect to this head's outputs.
    pub fn kl_from_grad(&self, behavior: &HeadOutput) -> HeadGrad {
        match (behavior, self) {
            (HeadOutput::Gaussian { mean: mp, log_std: lp }, HeadOutput::Gaussian { mean: mq, log_std: lq }) => {
                let (m, l) = gaussian_kl_grad_q(mp, lp, mq, lq);
                HeadGrad::Gaussian { mean: m, log_std: l }
            }
            (HeadOutput::Categorical { logits: p }, HeadOutput::Categorical { logits: q }) => HeadGrad::Categorical {
                logits: categorical_kl_grad_q(p, q),
            },
            _ => panic!("head kind mismatch"),
        }
    }

    /// Mean action for Gaussian heads, action probabilities for categorical
    /// heads. This is the quantity compared by the diversity reward.
    pub fn behavior_summary(&self) -> Vec<f64> {
        match self {
            HeadOutput::Gaussian { mean, .. } => mean.clone(),
            HeadOutput::Categorical { logits } => softmax(logits),
        }
    }
}

/// Draws an action and returns it with its log-probability under `head`.
pub fn sample_action<R: Rng + ?Sized>(head: &HeadOutput, rng: &mut R) -> (Action, f64) {
    match head {
        HeadOutput::Gaussian { mean, log_std } => {
            let action: Vec<f64> = mean
                .iter()
                .zip(log_std)
                .map(|(m, ls)| {
                    let eps: f64 = rng.sample(StandardNormal);
                    m + ls.exp() * eps
                })
                .collect();
            let lp = gaussian_log_prob(mean, log_std, &action);
            (Action::Continuous(action), lp)
        }
        HeadOutput::Categorical { logits } => {
            let probs = softmax(logits);
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut idx = probs.len() - 1;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    idx = i;
                    break;
                }
            }
            (Action::Discrete(idx), categorical_log_prob(logits, idx))
        }
    }
}
